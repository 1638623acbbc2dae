//! Finite rotation sets used as orientation channels.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{rot_x_half_turn, EulerTriple};

/// Which rotation sampling to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationLabel {
    M1,
    M4,
    M24,
    M72,
}

impl RotationLabel {
    pub fn size(self) -> usize {
        match self {
            RotationLabel::M1 => 1,
            RotationLabel::M4 => 4,
            RotationLabel::M24 => 24,
            RotationLabel::M72 => 72,
        }
    }

    pub fn from_size(m: usize) -> Result<Self> {
        match m {
            1 => Ok(RotationLabel::M1),
            4 => Ok(RotationLabel::M4),
            24 => Ok(RotationLabel::M24),
            72 => Ok(RotationLabel::M72),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported rotation set size {m} (expected 1, 4, 24 or 72)"
            ))),
        }
    }
}

impl fmt::Display for RotationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.size())
    }
}

impl FromStr for RotationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim_start_matches(['M', 'm']);
        let m: usize = digits
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad rotation set '{s}'")))?;
        RotationLabel::from_size(m)
    }
}

/// A finite list of rotations approximating SO(3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSet {
    pub label: RotationLabel,
    pub triples: Vec<EulerTriple>,
}

impl RotationSet {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn matrices(&self) -> Vec<Matrix3<f64>> {
        self.triples.iter().map(EulerTriple::to_matrix).collect()
    }

    /// JSON list of `[alpha, beta, gamma]` triples.
    pub fn to_json(&self) -> String {
        let list: Vec<[f64; 3]> = self.triples.iter().map(|t| [t.alpha, t.beta, t.gamma]).collect();
        serde_json::to_string(&list).expect("plain float arrays serialize")
    }

    pub fn from_json(label: RotationLabel, json: &str) -> Result<Self> {
        let list: Vec<[f64; 3]> = serde_json::from_str(json)?;
        if list.len() != label.size() {
            return Err(Error::Format(format!(
                "{label} needs {} triples, found {}",
                label.size(),
                list.len()
            )));
        }
        Ok(Self {
            label,
            triples: list.into_iter().map(|[a, b, g]| EulerTriple::new(a, b, g)).collect(),
        })
    }
}

/// Points on the unit sphere from recursive subdivision of the octahedron
/// faces. Level 0 gives the 6 vertices, level 1 adds the 12 edge midpoints.
pub fn octahedron_points(level: usize) -> Result<Vec<Vector3<f64>>> {
    if level > 3 {
        return Err(Error::Domain(format!("subdivision level {level} > 3")));
    }
    let mut points = vec![
        Vector3::z(),
        -Vector3::z(),
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
    ];
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for &top in &[0usize, 1] {
        for &(a, b) in &[(2usize, 4usize), (4, 3), (3, 5), (5, 2)] {
            faces.push([top, a, b]);
        }
    }
    for _ in 0..level {
        let mut midpoint_of = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for face in &faces {
            let mut mids = [0usize; 3];
            for e in 0..3 {
                let (i, j) = (face[e], face[(e + 1) % 3]);
                let key = (i.min(j), i.max(j));
                mids[e] = *midpoint_of.entry(key).or_insert_with(|| {
                    points.push((points[i] + points[j]).normalize());
                    points.len() - 1
                });
            }
            next.push([face[0], mids[0], mids[2]]);
            next.push([mids[0], face[1], mids[1]]);
            next.push([mids[2], mids[1], face[2]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        faces = next;
    }
    Ok(points)
}

/// Euler angles `(alpha, beta)` with `Rz(alpha) Ry(beta) e_z = p`. At the
/// poles `alpha` is fixed to zero.
pub fn point_to_alpha_beta(p: &Vector3<f64>) -> (f64, f64) {
    let beta = p.z.clamp(-1.0, 1.0).acos();
    if p.x.abs() < 1e-15 && p.y.abs() < 1e-15 {
        return (0.0, beta);
    }
    (p.y.atan2(p.x).rem_euclid(2.0 * PI), beta)
}

fn sphere_times_gamma(points: &[Vector3<f64>]) -> Vec<EulerTriple> {
    let mut out = Vec::with_capacity(points.len() * 4);
    for p in points {
        let (alpha, beta) = point_to_alpha_beta(p);
        for k in 0..4 {
            out.push(EulerTriple::new(alpha, beta, k as f64 * PI / 2.0));
        }
    }
    out
}

pub fn build_rotation_set(label: RotationLabel) -> RotationSet {
    let triples = match label {
        RotationLabel::M1 => vec![EulerTriple::IDENTITY],
        RotationLabel::M4 => {
            // identity and the half-turns about x, y and z
            vec![
                EulerTriple::IDENTITY,
                EulerTriple::from_matrix(&rot_x_half_turn()),
                EulerTriple::new(0.0, PI, 0.0),
                EulerTriple::new(PI, 0.0, 0.0),
            ]
        }
        RotationLabel::M24 => sphere_times_gamma(&octahedron_points(0).expect("level 0")),
        RotationLabel::M72 => sphere_times_gamma(&octahedron_points(1).expect("level 1")),
    };
    RotationSet { label, triples }
}

/// A right-angle rotation stored as a signed permutation of the axes:
/// `(R v)[row] = sign[row] * v[axis[row]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignedPermutation {
    pub axis: [usize; 3],
    pub sign: [i8; 3],
}

impl SignedPermutation {
    /// Recognizes matrices with a single `+-1` per row and column.
    pub fn from_matrix(m: &Matrix3<f64>) -> Option<Self> {
        let mut axis = [0usize; 3];
        let mut sign = [0i8; 3];
        let mut used = [false; 3];
        for row in 0..3 {
            let mut found = None;
            for col in 0..3 {
                let v = m[(row, col)];
                if (v.abs() - 1.0).abs() < 1e-9 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((col, if v > 0.0 { 1 } else { -1 }));
                } else if v.abs() > 1e-9 {
                    return None;
                }
            }
            let (col, s) = found?;
            if used[col] {
                return None;
            }
            used[col] = true;
            axis[row] = col;
            sign[row] = s;
        }
        Some(Self { axis, sign })
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for row in 0..3 {
            m[(row, self.axis[row])] = self.sign[row] as f64;
        }
        m
    }

    pub fn apply(&self, v: [i64; 3]) -> [i64; 3] {
        [
            self.sign[0] as i64 * v[self.axis[0]],
            self.sign[1] as i64 * v[self.axis[1]],
            self.sign[2] as i64 * v[self.axis[2]],
        ]
    }

    pub fn inverse(&self) -> Self {
        let mut axis = [0usize; 3];
        let mut sign = [0i8; 3];
        for row in 0..3 {
            axis[self.axis[row]] = row;
            sign[self.axis[row]] = self.sign[row];
        }
        Self { axis, sign }
    }
}

/// All 24 proper signed permutation matrices, by brute-force enumeration.
pub fn enumerate_right_angle_rotations() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for axis in perms {
        for bits in 0..8u8 {
            let sign = [
                if bits & 1 == 0 { 1 } else { -1 },
                if bits & 2 == 0 { 1 } else { -1 },
                if bits & 4 == 0 { 1 } else { -1 },
            ];
            let m = SignedPermutation { axis, sign }.to_matrix();
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}
