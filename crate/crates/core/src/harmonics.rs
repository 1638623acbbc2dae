//! Spherical harmonics, associated Legendre polynomials, Euler rotations and
//! Wigner D-matrix blocks.
//!
//! Conventions used throughout the crate:
//!
//! * spherical coordinates `(rho, theta, phi)` with elevation `theta` in
//!   `[0, pi]` measured from `+z` and azimuth `phi` in `[0, 2pi)`;
//! * rotations are intrinsic z-y'-z'' Euler triples, `R = Rz(alpha) Ry(beta) Rz(gamma)`;
//! * the Wigner block of degree `n` is defined by the steering identity
//!   `Y_{n,m}(R p) = sum_{m'} D[m, m'] Y_{n,m'}(p)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree supported by the factorial tables.
pub const MAX_DEGREE: usize = 12;

const FACTORIALS: [f64; 2 * MAX_DEGREE + 2] = factorial_table();

const fn factorial_table() -> [f64; 2 * MAX_DEGREE + 2] {
    let mut table = [1.0; 2 * MAX_DEGREE + 2];
    let mut i = 1;
    while i < table.len() {
        table[i] = table[i - 1] * i as f64;
        i += 1;
    }
    table
}

fn ln_factorial(k: usize) -> f64 {
    FACTORIALS[k].ln()
}

/// Degree/order pair `(n, m)` with `|m| <= n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SphericalIndex {
    pub degree: usize,
    pub order: i64,
}

impl SphericalIndex {
    pub fn new(degree: usize, order: i64) -> Result<Self> {
        if order.unsigned_abs() as usize > degree {
            return Err(Error::Domain(format!("|m| = {} > n = {degree}", order.abs())));
        }
        if degree > MAX_DEGREE {
            return Err(Error::Domain(format!("degree {degree} above {MAX_DEGREE}")));
        }
        Ok(Self { degree, order })
    }

    /// All indices with degree `<= max_degree`, ordered by degree then order.
    pub fn family(max_degree: usize) -> Vec<SphericalIndex> {
        (0..=max_degree)
            .flat_map(|n| (-(n as i64)..=n as i64).map(move |m| SphericalIndex { degree: n, order: m }))
            .collect()
    }
}

/// Intrinsic z-y'-z'' Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerTriple {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    // rem_euclid can return exactly 2pi for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

impl EulerTriple {
    pub const IDENTITY: EulerTriple = EulerTriple {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// `R = Rz(alpha) Ry(beta) Rz(gamma)`.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        rot_z(self.alpha) * rot_y(self.beta) * rot_z(self.gamma)
    }

    /// Recovers Euler angles from a rotation matrix. At the gimbal poles
    /// (`beta` = 0 or pi) the angle `gamma` is set to zero.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let cb = r[(2, 2)].clamp(-1.0, 1.0);
        let beta = cb.acos();
        let sb = (r[(0, 2)].powi(2) + r[(1, 2)].powi(2)).sqrt();
        if sb > 1e-12 {
            let alpha = r[(1, 2)].atan2(r[(0, 2)]);
            let gamma = r[(2, 1)].atan2(-r[(2, 0)]);
            Self::new(wrap_angle(alpha), beta, wrap_angle(gamma))
        } else if cb > 0.0 {
            let alpha = r[(1, 0)].atan2(r[(0, 0)]);
            Self::new(wrap_angle(alpha), 0.0, 0.0)
        } else {
            let alpha = (-r[(1, 0)]).atan2(r[(1, 1)]);
            Self::new(wrap_angle(alpha), PI, 0.0)
        }
    }

    /// Euler triple of the product `self * other` of the two rotations.
    pub fn compose(&self, other: &EulerTriple) -> EulerTriple {
        EulerTriple::from_matrix(&(self.to_matrix() * other.to_matrix()))
    }

    pub fn inverse(&self) -> EulerTriple {
        EulerTriple::from_matrix(&self.to_matrix().transpose())
    }
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Half-turn about the x axis, `diag(1, -1, -1)`.
pub fn rot_x_half_turn() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

pub fn euler_to_matrix(rot: &EulerTriple) -> Matrix3<f64> {
    rot.to_matrix()
}

/// Spherical angles `(theta, phi)` of a nonzero vector.
pub fn direction_angles(p: &Vector3<f64>) -> (f64, f64) {
    let rho = p.norm();
    let theta = (p.z / rho).clamp(-1.0, 1.0).acos();
    let phi = wrap_angle(p.y.atan2(p.x));
    (theta, phi)
}

/// Associated Legendre polynomial `P_{n,m}(x)` including the Condon-Shortley
/// phase `(-1)^m`.
pub fn assoc_legendre(n: usize, m: usize, x: f64) -> Result<f64> {
    if m > n {
        return Err(Error::Domain(format!("order m = {m} > degree n = {n}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("|x| = {} > 1", x.abs())));
    }
    Ok(legendre_unchecked(n, m, x))
}

fn legendre_unchecked(n: usize, m: usize, x: f64) -> f64 {
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut odd = 1.0;
    for _ in 0..m {
        pmm *= -odd * somx2;
        odd += 2.0;
    }
    if n == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if n == m + 1 {
        return pm1;
    }
    let mut pl = 0.0;
    for l in (m + 2)..=n {
        pl = ((2 * l - 1) as f64 * x * pm1 - (l + m - 1) as f64 * pmm) / (l - m) as f64;
        pmm = pm1;
        pm1 = pl;
    }
    pl
}

/// Normalization constant `A_{n,m}`.
pub fn sh_normalization(n: usize, m: i64) -> f64 {
    let am = m.unsigned_abs() as usize;
    let sign = if m > 0 && m % 2 == 1 { -1.0 } else { 1.0 };
    let ln_ratio = ln_factorial(n - am) - ln_factorial(n + am);
    sign * ((2 * n + 1) as f64 / (4.0 * PI) * ln_ratio.exp()).sqrt()
}

/// Complex spherical harmonic `Y_{n,m}(theta, phi)`.
pub fn sh_eval(idx: SphericalIndex, theta: f64, phi: f64) -> Complex64 {
    let am = idx.order.unsigned_abs() as usize;
    let p = legendre_unchecked(idx.degree, am, theta.cos().clamp(-1.0, 1.0));
    let a = sh_normalization(idx.degree, idx.order);
    Complex64::from_polar(a * p, idx.order as f64 * phi)
}

/// Evaluates every `Y_{n,m}` with `n <= max_degree` at one direction, in
/// [`SphericalIndex::family`] order.
pub fn sh_eval_all(max_degree: usize, theta: f64, phi: f64) -> Vec<Complex64> {
    let x = theta.cos().clamp(-1.0, 1.0);
    let mut out = Vec::with_capacity((max_degree + 1).pow(2));
    for n in 0..=max_degree {
        for m in -(n as i64)..=n as i64 {
            let am = m.unsigned_abs() as usize;
            let p = legendre_unchecked(n, am, x);
            out.push(Complex64::from_polar(sh_normalization(n, m) * p, m as f64 * phi));
        }
    }
    out
}

/// Wigner small-d element `d^n_{m1,m2}(beta)` from the factorial sum.
pub fn wigner_small_d(n: usize, m1: i64, m2: i64, beta: f64) -> f64 {
    let j = n as i64;
    let (s, c) = (beta / 2.0).sin_cos();
    let pref = 0.5
        * (ln_factorial((j + m1) as usize)
            + ln_factorial((j - m1) as usize)
            + ln_factorial((j + m2) as usize)
            + ln_factorial((j - m2) as usize));
    let k_min = 0.max(m2 - m1);
    let k_max = (j + m2).min(j - m1);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let denom = ln_factorial((j + m2 - k) as usize)
            + ln_factorial(k as usize)
            + ln_factorial((m1 - m2 + k) as usize)
            + ln_factorial((j - m1 - k) as usize);
        let sign = if (m1 - m2 + k) % 2 == 0 { 1.0 } else { -1.0 };
        let cpow = (2 * j + m2 - m1 - 2 * k) as i32;
        let spow = (m1 - m2 + 2 * k) as i32;
        sum += sign * (pref - denom).exp() * c.powi(cpow) * s.powi(spow);
    }
    sum
}

/// The `(2n+1) x (2n+1)` steering matrix of one degree for one rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerBlock {
    pub degree: usize,
    pub rotation: EulerTriple,
    /// Row/column `k` corresponds to order `k - n`.
    pub entries: DMatrix<Complex64>,
}

impl WignerBlock {
    pub fn get(&self, m: i64, mp: i64) -> Complex64 {
        let n = self.degree as i64;
        self.entries[((m + n) as usize, (mp + n) as usize)]
    }

    pub fn dim(&self) -> usize {
        2 * self.degree + 1
    }
}

/// Wigner block with `Y_{n,m}(R p) = sum_{m'} D[m,m'] Y_{n,m'}(p)` for
/// `R = Rz(alpha) Ry(beta) Rz(gamma)`.
pub fn wigner_block(n: usize, rot: &EulerTriple) -> WignerBlock {
    let dim = 2 * n + 1;
    let ni = n as i64;
    let entries = DMatrix::from_fn(dim, dim, |r, c| {
        let m = r as i64 - ni;
        let mp = c as i64 - ni;
        // index order fixed by the sampled steering identity
        let d = wigner_small_d(n, mp, m, rot.beta);
        Complex64::from_polar(d, m as f64 * rot.alpha + mp as f64 * rot.gamma)
    });
    WignerBlock {
        degree: n,
        rotation: *rot,
        entries,
    }
}

/// Projects per-degree coefficient vectors (indexed `m + n`) onto the set
/// satisfying `C_n[-m] = (-1)^m conj(C_n[m])` by averaging each `(m, -m)` pair.
pub fn enforce_realness(coeffs: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    coeffs
        .iter()
        .map(|c| {
            let n = (c.len() - 1) / 2;
            let mut out = c.clone();
            out[n] = Complex64::new(c[n].re, 0.0);
            for m in 1..=n {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                let pos = c[n + m];
                let neg = c[n - m];
                let avg = (pos + neg.conj() * sign) * 0.5;
                out[n + m] = avg;
                out[n - m] = avg.conj() * sign;
            }
            out
        })
        .collect()
}
