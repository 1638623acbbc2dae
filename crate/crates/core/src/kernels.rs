//! Radial profiles, solid spherical harmonic kernels, coefficient steering and
//! voxel kernel rotation.
//!
//! Harmonic coefficients are stored through their real degrees of freedom so
//! that the realness constraint `C_n[-m] = (-1)^m conj(C_n[m])` cannot be
//! broken: per degree `n` the layout is `[C_n[0], Re C_n[1], Im C_n[1], ...,
//! Re C_n[n], Im C_n[n]]`, i.e. `2n + 1` reals starting at offset `n^2`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{direction_angles, enforce_realness, sh_eval_all, wigner_block, EulerTriple};
use crate::volume::Volume;

/// Number of radial samples `ceil((c - 1) / 2 * sqrt(3)) + 1` for a `c^3` kernel.
pub fn radial_param_count(side: usize) -> Result<usize> {
    check_side(side)?;
    let half = (side - 1) as f64 / 2.0;
    Ok((half * 3f64.sqrt()).ceil() as usize + 1)
}

/// Spherical Nyquist bound `floor(pi * c / 4)` on the maximal degree.
pub fn max_degree(side: usize) -> usize {
    (PI * side as f64 / 4.0).floor() as usize
}

pub fn check_side(side: usize) -> Result<()> {
    if side == 0 || side % 2 == 0 {
        return Err(Error::EvenKernelSide(side));
    }
    Ok(())
}

pub fn check_nyquist(degree: usize, side: usize) -> Result<()> {
    let bound = max_degree(side);
    if degree > bound {
        return Err(Error::NyquistExceeded { degree, side, bound });
    }
    Ok(())
}

/// Piecewise-linear profile value at radius `rho` (voxel units); radii past
/// the last sample take the last sample.
pub fn radial_interpolate(h: &[f64], rho: f64) -> f64 {
    tent_weights(h.len(), rho).iter().map(|&(j, w)| w * h[j]).sum()
}

/// Interpolation weights of the profile samples at radius `rho`.
pub fn tent_weights(len: usize, rho: f64) -> Vec<(usize, f64)> {
    let last = len - 1;
    if rho >= last as f64 {
        return vec![(last, 1.0)];
    }
    let j = rho.floor() as usize;
    let t = rho - j as f64;
    if t == 0.0 {
        vec![(j, 1.0)]
    } else {
        vec![(j, 1.0 - t), (j + 1, t)]
    }
}

#[inline]
fn odd_sign(m: usize) -> f64 {
    if m % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Realness-constrained coefficients `C_n[m]`, `n = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCoefficients {
    max_degree: usize,
    dof: Vec<f64>,
}

impl HarmonicCoefficients {
    pub fn zeros(max_degree: usize) -> Self {
        Self {
            max_degree,
            dof: vec![0.0; (max_degree + 1).pow(2)],
        }
    }

    pub fn from_dof(max_degree: usize, dof: Vec<f64>) -> Result<Self> {
        if dof.len() != (max_degree + 1).pow(2) {
            return Err(Error::Shape(format!(
                "{} coefficient DOF for N = {max_degree}",
                dof.len()
            )));
        }
        Ok(Self { max_degree, dof })
    }

    /// Projects arbitrary per-degree complex vectors (indexed `m + n`) onto
    /// the realness constraint.
    pub fn from_complex(vectors: &[Vec<Complex64>]) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Shape("no degrees".into()));
        }
        for (n, v) in vectors.iter().enumerate() {
            if v.len() != 2 * n + 1 {
                return Err(Error::Shape(format!("degree {n} has {} entries", v.len())));
            }
        }
        let projected = enforce_realness(vectors);
        let max_degree = vectors.len() - 1;
        let mut out = Self::zeros(max_degree);
        for (n, v) in projected.iter().enumerate() {
            out.set_degree_from_complex(n, v);
        }
        Ok(out)
    }

    fn set_degree_from_complex(&mut self, n: usize, v: &[Complex64]) {
        let base = n * n;
        self.dof[base] = v[n].re;
        for m in 1..=n {
            self.dof[base + 2 * m - 1] = v[n + m].re;
            self.dof[base + 2 * m] = v[n + m].im;
        }
    }

    /// `C ~ N(0, sigma2)` in the sense `E|C_n[m]|^2 = sigma2` for every order.
    pub fn random(max_degree: usize, sigma2: f64, rng: &mut impl Rng) -> Self {
        let full = Normal::new(0.0, sigma2.sqrt()).expect("finite sigma");
        let half = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("finite sigma");
        let mut out = Self::zeros(max_degree);
        for n in 0..=max_degree {
            let base = n * n;
            out.dof[base] = full.sample(rng);
            for k in 1..=2 * n {
                out.dof[base + k] = half.sample(rng);
            }
        }
        out
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn dof(&self) -> &[f64] {
        &self.dof
    }

    pub fn dof_mut(&mut self) -> &mut [f64] {
        &mut self.dof
    }

    pub fn degree_dof(&self, n: usize) -> &[f64] {
        &self.dof[n * n..(n + 1) * (n + 1)]
    }

    /// `C_n[m]` for any `|m| <= n`.
    pub fn get(&self, n: usize, m: i64) -> Complex64 {
        let base = n * n;
        let am = m.unsigned_abs() as usize;
        if am == 0 {
            return Complex64::new(self.dof[base], 0.0);
        }
        let c = Complex64::new(self.dof[base + 2 * am - 1], self.dof[base + 2 * am]);
        if m > 0 {
            c
        } else {
            c.conj() * odd_sign(am)
        }
    }

    pub fn degree_complex(&self, n: usize) -> Vec<Complex64> {
        (-(n as i64)..=n as i64).map(|m| self.get(n, m)).collect()
    }

    pub fn to_complex(&self) -> Vec<Vec<Complex64>> {
        (0..=self.max_degree).map(|n| self.degree_complex(n)).collect()
    }
}

/// Per-degree radial profiles sampled at integer radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfileSet {
    side: usize,
    max_degree: usize,
    separable: bool,
    profiles: Vec<Vec<f64>>,
}

impl RadialProfileSet {
    pub fn new(side: usize, max_degree: usize, separable: bool, profiles: Vec<Vec<f64>>) -> Result<Self> {
        let n_r = radial_param_count(side)?;
        let expected = if separable { 1 } else { max_degree + 1 };
        if profiles.len() != expected || profiles.iter().any(|p| p.len() != n_r) {
            return Err(Error::Shape(format!(
                "expected {expected} profiles of {n_r} samples for c = {side}"
            )));
        }
        Ok(Self {
            side,
            max_degree,
            separable,
            profiles,
        })
    }

    pub fn constant(side: usize, max_degree: usize, separable: bool, value: f64) -> Result<Self> {
        let n_r = radial_param_count(side)?;
        let count = if separable { 1 } else { max_degree + 1 };
        Self::new(side, max_degree, separable, vec![vec![value; n_r]; count])
    }

    pub fn random(side: usize, max_degree: usize, separable: bool, rng: &mut impl Rng) -> Result<Self> {
        let n_r = radial_param_count(side)?;
        let count = if separable { 1 } else { max_degree + 1 };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let profiles = (0..count)
            .map(|_| (0..n_r).map(|_| normal.sample(rng)).collect())
            .collect();
        Self::new(side, max_degree, separable, profiles)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn separable(&self) -> bool {
        self.separable
    }

    pub fn samples(&self) -> usize {
        self.profiles[0].len()
    }

    /// Profile used for degree `n` (the shared one when separable).
    pub fn profile(&self, n: usize) -> &[f64] {
        if self.separable {
            &self.profiles[0]
        } else {
            &self.profiles[n]
        }
    }

    pub fn profiles(&self) -> &[Vec<f64>] {
        &self.profiles
    }

    pub fn profiles_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.profiles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelProvenance {
    Synthesized,
    Rotated,
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelKernel {
    pub volume: Volume,
    pub provenance: KernelProvenance,
}

impl VoxelKernel {
    pub fn free(volume: Volume) -> Result<Self> {
        let c = volume.shape()[0];
        check_side(c)?;
        if volume.shape() != [c; 3] {
            return Err(Error::Shape(format!("kernel must be cubic, got {:?}", volume.shape())));
        }
        Ok(Self {
            volume,
            provenance: KernelProvenance::Free,
        })
    }

    pub fn side(&self) -> usize {
        self.volume.shape()[0]
    }
}

/// Offsets `x - center` of the voxels of a `c^3` kernel, in storage order.
pub fn kernel_offsets(side: usize) -> Vec<Vector3<f64>> {
    let h = (side / 2) as f64;
    let mut out = Vec::with_capacity(side.pow(3));
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                out.push(Vector3::new(x as f64 - h, y as f64 - h, z as f64 - h));
            }
        }
    }
    out
}

/// Fixed geometry of the solid harmonic basis on a `c^3` grid: voxel radii,
/// profile interpolation weights, per-degree normalization and the real
/// angular basis.
///
/// Real basis index `b` runs over the coefficient DOF layout; its angular
/// factor is `s_n Y_{n,0}`, `2 s_n Re Y_{n,m}` or `-2 s_n Im Y_{n,m}` so that a
/// synthesized kernel is `sum_b dof_b h_{n(b)}(|x|) A_b(x)`.
#[derive(Debug, Clone)]
pub struct AngularBasis {
    side: usize,
    max_degree: usize,
    n_r: usize,
    radii: Vec<f64>,
    tents: Vec<Vec<(usize, f64)>>,
    scales: Vec<f64>,
    /// `complex[k][voxel]` = `s_n Y_{n,m}` for family index `k` (m from -n to n).
    complex: Vec<Vec<Complex64>>,
    /// `real[b][voxel]`.
    real: Vec<Vec<f64>>,
}

impl AngularBasis {
    pub fn new(side: usize, max_degree: usize) -> Result<Self> {
        check_side(side)?;
        check_nyquist(max_degree, side)?;
        let n_r = radial_param_count(side)?;
        let offsets = kernel_offsets(side);
        let voxels = offsets.len();
        let family = (max_degree + 1).pow(2);
        let radii: Vec<f64> = offsets.iter().map(|o| o.norm()).collect();
        let tents = radii.iter().map(|&r| tent_weights(n_r, r)).collect();

        // raw harmonics; the center voxel only carries degree 0
        let mut raw = vec![vec![Complex64::new(0.0, 0.0); voxels]; family];
        for (v, o) in offsets.iter().enumerate() {
            if radii[v] == 0.0 {
                raw[0][v] = Complex64::new(0.5 / PI.sqrt(), 0.0);
                continue;
            }
            let (theta, phi) = direction_angles(o);
            for (k, y) in sh_eval_all(max_degree, theta, phi).into_iter().enumerate() {
                raw[k][v] = y;
            }
        }

        // mean over orders of the squared discrete norm is 1 for each degree
        let mut scales = Vec::with_capacity(max_degree + 1);
        for n in 0..=max_degree {
            let energy: f64 = (n * n..(n + 1) * (n + 1))
                .map(|k| raw[k].iter().map(|y| y.norm_sqr()).sum::<f64>())
                .sum();
            scales.push(((2 * n + 1) as f64 / energy).sqrt());
        }

        let mut complex = raw;
        for n in 0..=max_degree {
            for k in n * n..(n + 1) * (n + 1) {
                for y in complex[k].iter_mut() {
                    *y *= scales[n];
                }
            }
        }

        let mut real = vec![vec![0.0; voxels]; family];
        for n in 0..=max_degree {
            let base = n * n;
            let k0 = n * n + n;
            for v in 0..voxels {
                real[base][v] = complex[k0][v].re;
                for m in 1..=n {
                    let y = complex[k0 + m][v];
                    real[base + 2 * m - 1][v] = 2.0 * y.re;
                    real[base + 2 * m][v] = -2.0 * y.im;
                }
            }
        }

        Ok(Self {
            side,
            max_degree,
            n_r,
            radii,
            tents,
            scales,
            complex,
            real,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn radial_samples(&self) -> usize {
        self.n_r
    }

    pub fn voxels(&self) -> usize {
        self.radii.len()
    }

    pub fn basis_len(&self) -> usize {
        (self.max_degree + 1).pow(2)
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn tents(&self) -> &[Vec<(usize, f64)>] {
        &self.tents
    }

    pub fn scale(&self, n: usize) -> f64 {
        self.scales[n]
    }

    pub fn real(&self, b: usize) -> &[f64] {
        &self.real[b]
    }

    /// `s_n Y_{n,m}` on the grid.
    pub fn complex(&self, n: usize, m: i64) -> &[Complex64] {
        &self.complex[((n * n + n) as i64 + m) as usize]
    }

    /// Degree of real basis index `b`.
    pub fn degree_of(b: usize) -> usize {
        (b as f64).sqrt().floor() as usize
    }

    /// Profile `h_n(|x|)` evaluated on every voxel.
    pub fn radial_field(&self, h: &[f64]) -> Vec<f64> {
        self.tents
            .iter()
            .map(|t| t.iter().map(|&(j, w)| w * h[j]).sum())
            .collect()
    }

    /// Real basis kernel `h_{n(b)}(|x|) A_b(x)`.
    pub fn basis_kernel(&self, b: usize, profiles: &RadialProfileSet) -> Vec<f64> {
        let radial = self.radial_field(profiles.profile(Self::degree_of(b)));
        radial.iter().zip(&self.real[b]).map(|(r, a)| r * a).collect()
    }

    /// Tent basis kernel `tent_j(|x|) A_b(x)`.
    pub fn tent_kernel(&self, j: usize, b: usize) -> Vec<f64> {
        self.tents
            .iter()
            .zip(&self.real[b])
            .map(|(t, a)| {
                t.iter()
                    .filter(|&&(jj, _)| jj == j)
                    .map(|&(_, w)| w * a)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Fast real synthesis `sum_b dof_b h_{n(b)}(|x|) A_b(x)`.
    pub fn synthesize_real(&self, coeffs: &HarmonicCoefficients, profiles: &RadialProfileSet) -> Vec<f64> {
        let mut out = vec![0.0; self.voxels()];
        for n in 0..=self.max_degree {
            let radial = self.radial_field(profiles.profile(n));
            for b in n * n..(n + 1) * (n + 1) {
                let w = coeffs.dof[b];
                for ((o, a), r) in out.iter_mut().zip(&self.real[b]).zip(&radial) {
                    *o += w * a * r;
                }
            }
        }
        out
    }

    /// Complex synthesis `sum_{n,m} C_n[m] s_n h_n(|x|) Y_{n,m}(x)` over every order.
    pub fn synthesize_complex(
        &self,
        coeffs: &HarmonicCoefficients,
        profiles: &RadialProfileSet,
    ) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.voxels()];
        for n in 0..=self.max_degree {
            let radial = self.radial_field(profiles.profile(n));
            for m in -(n as i64)..=n as i64 {
                let c = coeffs.get(n, m);
                let k = (n * n + n) as i64 + m;
                for ((o, y), r) in out.iter_mut().zip(&self.complex[k as usize]).zip(&radial) {
                    *o += c * y * r;
                }
            }
        }
        out
    }
}

fn check_pair(coeffs: &HarmonicCoefficients, profiles: &RadialProfileSet) -> Result<()> {
    if coeffs.max_degree() != profiles.max_degree() {
        return Err(Error::DegreeMismatch {
            coefficients: coeffs.max_degree(),
            profiles: profiles.max_degree(),
        });
    }
    check_nyquist(coeffs.max_degree(), profiles.side())
}

/// Largest imaginary residue of the complex synthesis.
pub fn synthesis_imag_residue(coeffs: &HarmonicCoefficients, profiles: &RadialProfileSet) -> Result<f64> {
    check_pair(coeffs, profiles)?;
    let basis = AngularBasis::new(profiles.side(), coeffs.max_degree())?;
    Ok(basis
        .synthesize_complex(coeffs, profiles)
        .iter()
        .map(|z| z.im.abs())
        .fold(0.0, f64::max))
}

/// Voxelized kernel `sum_n h_n(|x|) sum_m C_n[m] Y_{n,m}(x)`; the imaginary
/// residue (zero up to rounding for constrained coefficients) is discarded.
pub fn synthesize_kernel(coeffs: &HarmonicCoefficients, profiles: &RadialProfileSet) -> Result<VoxelKernel> {
    check_pair(coeffs, profiles)?;
    let basis = AngularBasis::new(profiles.side(), coeffs.max_degree())?;
    let values = basis.synthesize_complex(coeffs, profiles);
    debug_assert!(values.iter().all(|z| z.im.abs() < 1e-9));
    let side = profiles.side();
    Ok(VoxelKernel {
        volume: Volume::new([side; 3], values.iter().map(|z| z.re).collect())?,
        provenance: KernelProvenance::Synthesized,
    })
}

/// Coefficients of the rotated filter `f(R .)`: per degree
/// `C_R[m'] = sum_m D_R[m, m'] C[m]`.
pub fn steer_coefficients(coeffs: &HarmonicCoefficients, rot: &EulerTriple) -> HarmonicCoefficients {
    let mut out = HarmonicCoefficients::zeros(coeffs.max_degree());
    for n in 0..=coeffs.max_degree() {
        let block = wigner_block(n, rot);
        let c = coeffs.degree_complex(n);
        let dim = 2 * n + 1;
        let steered: Vec<Complex64> = (0..dim)
            .map(|col| (0..dim).map(|row| block.entries[(row, col)] * c[row]).sum())
            .collect();
        out.set_degree_from_complex(n, &steered);
    }
    out
}

/// Real matrices mapping coefficient DOF to steered DOF, one block per degree.
#[derive(Debug, Clone)]
pub struct RealSteering {
    pub blocks: Vec<DMatrix<f64>>,
}

impl RealSteering {
    pub fn new(max_degree: usize, rot: &EulerTriple) -> Self {
        let mut blocks = Vec::with_capacity(max_degree + 1);
        for n in 0..=max_degree {
            let dim = 2 * n + 1;
            let block = wigner_block(n, rot);
            let mut mat = DMatrix::zeros(dim, dim);
            for col in 0..dim {
                let mut unit = HarmonicCoefficients::zeros(n);
                unit.dof[n * n + col] = 1.0;
                let c = unit.degree_complex(n);
                let steered: Vec<Complex64> = (0..dim)
                    .map(|mp| (0..dim).map(|m| block.entries[(m, mp)] * c[m]).sum())
                    .collect();
                mat[(0, col)] = steered[n].re;
                for m in 1..=n {
                    mat[(2 * m - 1, col)] = steered[n + m].re;
                    mat[(2 * m, col)] = steered[n + m].im;
                }
            }
            blocks.push(mat);
        }
        Self { blocks }
    }

    /// Steered DOF `L dof`.
    pub fn apply(&self, dof: &[f64], out: &mut [f64]) {
        for (n, block) in self.blocks.iter().enumerate() {
            let base = n * n;
            let dim = 2 * n + 1;
            for r in 0..dim {
                out[base + r] = (0..dim).map(|c| block[(r, c)] * dof[base + c]).sum();
            }
        }
    }

    /// Adds `L^T g` to `out`.
    pub fn apply_transpose_add(&self, g: &[f64], out: &mut [f64]) {
        for (n, block) in self.blocks.iter().enumerate() {
            let base = n * n;
            let dim = 2 * n + 1;
            for c in 0..dim {
                out[base + c] += (0..dim).map(|r| block[(r, c)] * g[base + r]).sum::<f64>();
            }
        }
    }
}

/// `k'(x) = k(R x)` about the kernel center: a voxel permutation for
/// right-angle rotations, trilinear resampling (zero outside) otherwise.
pub fn rotate_voxel_kernel(kernel: &VoxelKernel, rot: &EulerTriple) -> VoxelKernel {
    rotate_voxel_kernel_matrix(kernel, &rot.to_matrix())
}

pub fn rotate_voxel_kernel_matrix(kernel: &VoxelKernel, rot: &Matrix3<f64>) -> VoxelKernel {
    VoxelKernel {
        volume: kernel.volume.rotate(rot),
        provenance: KernelProvenance::Rotated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{build_rotation_set, RotationLabel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_complex(max_degree: usize, rng: &mut impl Rng) -> Vec<Vec<Complex64>> {
        (0..=max_degree)
            .map(|n| {
                (0..2 * n + 1)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect()
    }

    fn random_rotation(rng: &mut impl Rng) -> EulerTriple {
        EulerTriple::new(
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(-1.0f64..1.0).acos(),
            rng.gen_range(0.0..2.0 * PI),
        )
    }

    #[test]
    fn radial_counts() {
        assert_eq!(radial_param_count(7).unwrap(), 7);
        assert_eq!(radial_param_count(1).unwrap(), 1);
        assert_eq!(radial_param_count(9).unwrap(), 8);
        assert!(matches!(radial_param_count(8), Err(Error::EvenKernelSide(8))));
    }

    #[test]
    fn nyquist_bound() {
        assert_eq!(max_degree(7), 5);
        assert_eq!(max_degree(1), 0);
        assert_eq!(max_degree(9), 7);
        assert!(check_nyquist(6, 7).is_err());
        assert!(check_nyquist(5, 7).is_ok());
    }

    #[test]
    fn interpolation() {
        let h = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(radial_interpolate(&h, 0.0), 1.0);
        assert_eq!(radial_interpolate(&h, 0.5), 0.5);
        let flat = [2.5; 7];
        for rho in [0.0, 0.3, 2.7, 5.196, 9.0] {
            assert!((radial_interpolate(&flat, rho) - 2.5).abs() < 1e-15);
        }
        assert_eq!(radial_interpolate(&[0.0, 1.0, 3.0], 10.0), 3.0);
    }

    #[test]
    fn coefficient_dof_roundtrip_and_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coeffs = HarmonicCoefficients::from_complex(&random_complex(4, &mut rng)).unwrap();
        let complex = coeffs.to_complex();
        assert_eq!(enforce_realness(&complex), complex);
        assert_eq!(HarmonicCoefficients::from_complex(&complex).unwrap(), coeffs);
    }

    #[test]
    fn per_degree_normalization() {
        let basis = AngularBasis::new(7, 5).unwrap();
        for n in 0..=5 {
            let mean: f64 = (-(n as i64)..=n as i64)
                .map(|m| {
                    let k = (n * n + n) as i64 + m;
                    basis.complex[k as usize].iter().map(|y| y.norm_sqr()).sum::<f64>()
                })
                .sum::<f64>()
                / (2 * n + 1) as f64;
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_kernel_from_degree_zero() {
        let mut coeffs = HarmonicCoefficients::zeros(0);
        coeffs.dof_mut()[0] = 1.3;
        let profiles = RadialProfileSet::constant(7, 0, true, 0.7).unwrap();
        let k = synthesize_kernel(&coeffs, &profiles).unwrap();
        let first = k.volume.data()[0];
        for v in k.volume.data() {
            assert!((v - first).abs() < 1e-14);
        }
    }

    #[test]
    fn synthesis_routes_agree_and_are_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for separable in [true, false] {
            let coeffs = HarmonicCoefficients::random(3, 0.125, &mut rng);
            let profiles = RadialProfileSet::random(7, 3, separable, &mut rng).unwrap();
            let basis = AngularBasis::new(7, 3).unwrap();
            let complex = basis.synthesize_complex(&coeffs, &profiles);
            let real = basis.synthesize_real(&coeffs, &profiles);
            for (z, r) in complex.iter().zip(&real) {
                assert!(z.im.abs() < 1e-12);
                assert!((z.re - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degree_and_nyquist_errors() {
        let coeffs = HarmonicCoefficients::zeros(3);
        let profiles = RadialProfileSet::constant(7, 2, false, 1.0).unwrap();
        assert!(matches!(
            synthesize_kernel(&coeffs, &profiles),
            Err(Error::DegreeMismatch { .. })
        ));
        let coeffs = HarmonicCoefficients::zeros(6);
        let profiles = RadialProfileSet::constant(7, 6, false, 1.0).unwrap();
        assert!(matches!(
            synthesize_kernel(&coeffs, &profiles),
            Err(Error::NyquistExceeded { .. })
        ));
    }

    #[test]
    fn steering_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs = HarmonicCoefficients::random(4, 0.1, &mut rng);
        let same = steer_coefficients(&coeffs, &EulerTriple::IDENTITY);
        for (a, b) in same.dof().iter().zip(coeffs.dof()) {
            assert!((a - b).abs() < 1e-14);
        }
        let r1 = random_rotation(&mut rng);
        let r2 = random_rotation(&mut rng);
        let steered = steer_coefficients(&coeffs, &r1);
        assert!((steered.dof()[0] - coeffs.dof()[0]).abs() < 1e-14);
        let twice = steer_coefficients(&steered, &r2);
        let once = steer_coefficients(&coeffs, &r1.compose(&r2));
        for (a, b) in twice.dof().iter().zip(once.dof()) {
            assert!((a - b).abs() < 1e-10);
        }
        // realness survives steering of the unconstrained complex product
        for n in 0..=4 {
            let block = wigner_block(n, &r1);
            let c = coeffs.degree_complex(n);
            let dim = 2 * n + 1;
            let full: Vec<Complex64> = (0..dim)
                .map(|col| (0..dim).map(|row| block.entries[(row, col)] * c[row]).sum())
                .collect();
            for m in 0..=n {
                let lhs = full[n - m];
                let rhs = full[n + m].conj() * odd_sign(m);
                assert!((lhs - rhs).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn real_steering_matches_complex_steering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = HarmonicCoefficients::random(3, 0.2, &mut rng);
        let rot = random_rotation(&mut rng);
        let steering = RealSteering::new(3, &rot);
        let mut out = vec![0.0; 16];
        steering.apply(coeffs.dof(), &mut out);
        let expected = steer_coefficients(&coeffs, &rot);
        for (a, b) in out.iter().zip(expected.dof()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn steered_synthesis_equals_rotated_kernel_for_right_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coeffs = HarmonicCoefficients::random(3, 0.125, &mut rng);
        let profiles = RadialProfileSet::random(7, 3, false, &mut rng).unwrap();
        let kernel = synthesize_kernel(&coeffs, &profiles).unwrap();
        for rot in build_rotation_set(RotationLabel::M24).triples {
            let steered = synthesize_kernel(&steer_coefficients(&coeffs, &rot), &profiles).unwrap();
            let rotated = rotate_voxel_kernel(&kernel, &rot);
            assert!(steered.volume.max_abs_diff(&rotated.volume) < 1e-12);
        }
    }

    fn generic_rotation_error(coeffs: &HarmonicCoefficients, profiles: &RadialProfileSet, rng: &mut impl Rng) -> f64 {
        let kernel = synthesize_kernel(coeffs, profiles).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let rot = random_rotation(rng);
            let steered = synthesize_kernel(&steer_coefficients(coeffs, &rot), profiles).unwrap();
            let rotated = rotate_voxel_kernel(&kernel, &rot);
            let diff = steered.volume.zip_map(&rotated.volume, |a, b| a - b).unwrap();
            worst = worst.max(diff.norm() / steered.volume.norm());
        }
        worst
    }

    #[test]
    fn steered_synthesis_close_to_interpolated_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 0..=3 {
            let coeffs = HarmonicCoefficients::random(n, 0.125, &mut rng);
            let smooth: Vec<f64> = (0..7).map(|r| (-(r as f64).powi(2) / 8.0).exp()).collect();
            let profiles = RadialProfileSet::new(7, n, true, vec![smooth]).unwrap();
            let e_smooth = generic_rotation_error(&coeffs, &profiles, &mut rng);
            let noisy = RadialProfileSet::random(7, n, false, &mut rng).unwrap();
            let e_noisy = generic_rotation_error(&coeffs, &noisy, &mut rng);
            println!("N={n}: smooth profile {e_smooth:.4}, random profile {e_noisy:.4}");
        }
    }

    #[test]
    fn only_isotropic_kernels_are_right_angle_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rots = build_rotation_set(RotationLabel::M24).triples;
        for degree in [0usize, 2] {
            let coeffs = HarmonicCoefficients::random(degree, 0.3, &mut rng);
            let profiles = RadialProfileSet::random(7, degree, false, &mut rng).unwrap();
            let kernel = synthesize_kernel(&coeffs, &profiles).unwrap();
            let worst = rots
                .iter()
                .map(|r| rotate_voxel_kernel(&kernel, r).volume.max_abs_diff(&kernel.volume))
                .fold(0.0, f64::max);
            if degree == 0 {
                assert!(worst < 1e-14);
            } else {
                assert!(worst > 1e-3);
            }
        }
    }

    #[test]
    fn rotation_of_voxel_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vol = Volume::from_fn([7; 3], |_, _, _| rng.gen_range(-1.0..1.0));
        let kernel = VoxelKernel::free(vol).unwrap();
        assert_eq!(rotate_voxel_kernel(&kernel, &EulerTriple::IDENTITY).volume, kernel.volume);
        let iso = VoxelKernel::free(Volume::from_fn([7; 3], |x, y, z| {
            let d = [x as f64 - 3.0, y as f64 - 3.0, z as f64 - 3.0];
            (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 4.0).exp()
        }))
        .unwrap();
        for rot in build_rotation_set(RotationLabel::M24).triples {
            assert!(rotate_voxel_kernel(&iso, &rot).volume.max_abs_diff(&iso.volume) < 1e-15);
        }
    }

    #[test]
    fn synthesis_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = AngularBasis::new(7, 3).unwrap();
        let c1 = HarmonicCoefficients::random(3, 0.2, &mut rng);
        let c2 = HarmonicCoefficients::random(3, 0.2, &mut rng);
        let h1 = RadialProfileSet::random(7, 3, false, &mut rng).unwrap();
        let h2 = RadialProfileSet::random(7, 3, false, &mut rng).unwrap();
        let csum = HarmonicCoefficients::from_dof(3, c1.dof().iter().zip(c2.dof()).map(|(a, b)| a + b).collect()).unwrap();
        let hsum = RadialProfileSet::new(
            7,
            3,
            false,
            h1.profiles()
                .iter()
                .zip(h2.profiles())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        )
        .unwrap();
        let lhs = basis.synthesize_real(&csum, &h1);
        let a = basis.synthesize_real(&c1, &h1);
        let b = basis.synthesize_real(&c2, &h1);
        for i in 0..lhs.len() {
            assert!((lhs[i] - a[i] - b[i]).abs() < 1e-12);
        }
        let lhs = basis.synthesize_real(&c1, &hsum);
        let b = basis.synthesize_real(&c1, &h2);
        for i in 0..lhs.len() {
            assert!((lhs[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tent_kernels_sum_to_basis_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let basis = AngularBasis::new(7, 2).unwrap();
        let profiles = RadialProfileSet::random(7, 2, false, &mut rng).unwrap();
        for b in 0..9 {
            let direct = basis.basis_kernel(b, &profiles);
            let h = profiles.profile(AngularBasis::degree_of(b));
            let mut acc = vec![0.0; direct.len()];
            for (j, hj) in h.iter().enumerate() {
                for (a, t) in acc.iter_mut().zip(basis.tent_kernel(j, b)) {
                    *a += hj * t;
                }
            }
            for (a, d) in acc.iter().zip(&direct) {
                assert!((a - d).abs() < 1e-13);
            }
        }
    }
}
