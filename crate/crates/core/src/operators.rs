//! Image operators built on valid cross-correlation: G-LRI (rotated voxel
//! kernels), S-LRI (steered solid harmonic responses), solid spherical
//! energy maps, and the global rotation-invariant feature.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harmonics::EulerTriple;
use crate::kernels::{
    check_nyquist, rotate_voxel_kernel, steer_coefficients, AngularBasis, HarmonicCoefficients,
    RadialProfileSet, VoxelKernel,
};
use crate::rotations::{RotationLabel, RotationSet};
pub use crate::volume::conv3d;
use crate::volume::Volume;

/// Responses of one filter at each rotation of a set.
#[derive(Debug, Clone)]
pub struct OrientationStack {
    pub label: Option<RotationLabel>,
    pub volumes: Vec<Volume>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Conv,
    GLri,
    SLri,
    Sse,
    GlobalRi,
}

#[derive(Debug, Clone)]
pub struct ResponseMap {
    pub volume: Volume,
    pub operator: Operator,
    pub filter: usize,
    pub degree: Option<usize>,
}

/// Complex response `(I * h_n Y_{n,m})`.
#[derive(Debug, Clone)]
pub struct ComplexVolume {
    pub re: Volume,
    pub im: Volume,
}

impl ComplexVolume {
    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re.data()[i], self.im.data()[i])
    }
}

/// Per-voxel maximum of absolute values; ties keep the lowest map index.
pub fn abs_max_pool(maps: &[&[f64]]) -> (Vec<f64>, Vec<u32>) {
    let len = maps[0].len();
    let mut best: Vec<f64> = maps[0].iter().map(|v| v.abs()).collect();
    let mut arg = vec![0u32; len];
    for (r, map) in maps.iter().enumerate().skip(1) {
        for ((b, a), v) in best.iter_mut().zip(arg.iter_mut()).zip(map.iter()) {
            let v = v.abs();
            if v > *b {
                *b = v;
                *a = r as u32;
            }
        }
    }
    (best, arg)
}

pub fn orientation_max_pool(stack: &OrientationStack) -> Result<(Volume, Vec<u32>)> {
    let first = stack
        .volumes
        .first()
        .ok_or_else(|| Error::Shape("empty orientation stack".into()))?;
    for v in &stack.volumes {
        first.check_same_shape(v)?;
    }
    let maps: Vec<&[f64]> = stack.volumes.iter().map(|v| v.data()).collect();
    let (best, arg) = abs_max_pool(&maps);
    Ok((Volume::new(first.shape(), best)?, arg))
}

fn nonempty(set: &RotationSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty rotation set".into()));
    }
    Ok(())
}

pub fn rotated_kernels(kernel: &VoxelKernel, set: &RotationSet) -> Vec<VoxelKernel> {
    set.triples.iter().map(|r| rotate_voxel_kernel(kernel, r)).collect()
}

/// Signed responses `I * k(R .)` for every `R` in the set.
pub fn g_lri_stack(input: &Volume, kernel: &VoxelKernel, set: &RotationSet, stride: usize) -> Result<OrientationStack> {
    nonempty(set)?;
    let volumes = rotated_kernels(kernel, set)
        .par_iter()
        .map(|k| conv3d(input, &k.volume, stride))
        .collect::<Result<Vec<_>>>()?;
    Ok(OrientationStack {
        label: Some(set.label),
        volumes,
    })
}

/// `max_R |I * k(R .)|` per voxel.
pub fn g_lri(input: &Volume, kernel: &VoxelKernel, set: &RotationSet, stride: usize) -> Result<Volume> {
    Ok(orientation_max_pool(&g_lri_stack(input, kernel, set, stride)?)?.0)
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

/// Responses to the real basis kernels `h_{n(b)} A_b`, in coefficient DOF
/// order. A real filter response is `sum_b dof_b * out[b]`.
pub fn real_basis_responses(
    input: &Volume,
    basis: &AngularBasis,
    profiles: &RadialProfileSet,
    stride: usize,
) -> Result<Vec<Volume>> {
    let side = basis.side();
    (0..basis.basis_len())
        .into_par_iter()
        .map(|b| {
            let k = Volume::new([side; 3], basis.basis_kernel(b, profiles))?;
            conv3d(input, &k, stride)
        })
        .collect()
}

/// The `(N+1)^2` complex responses `I * h_n Y_{n,m}` in `(n, m = -n..=n)`
/// order. Only `m >= 0` is convolved; `m < 0` follows from
/// `r_{n,-m} = (-1)^m conj(r_{n,m})`.
pub fn s_lri_base_responses(
    input: &Volume,
    coeffs: &HarmonicCoefficients,
    profiles: &RadialProfileSet,
    stride: usize,
) -> Result<Vec<ComplexVolume>> {
    check_pair(coeffs, profiles)?;
    let max_degree = coeffs.max_degree();
    let basis = AngularBasis::new(profiles.side(), max_degree)?;
    let real = real_basis_responses(input, &basis, profiles, stride)?;
    let mut out = Vec::with_capacity(basis.basis_len());
    for n in 0..=max_degree {
        let base = n * n;
        let positive: Vec<ComplexVolume> = (0..=n)
            .map(|m| {
                if m == 0 {
                    ComplexVolume {
                        re: real[base].clone(),
                        im: Volume::zeros(real[base].shape()),
                    }
                } else {
                    // real basis responses carry 2 Re r and -2 Im r
                    ComplexVolume {
                        re: real[base + 2 * m - 1].map(|v| v / 2.0),
                        im: real[base + 2 * m].map(|v| -v / 2.0),
                    }
                }
            })
            .collect();
        for m in (1..=n).rev() {
            let p = &positive[m];
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            out.push(ComplexVolume {
                re: p.re.map(|v| sign * v),
                im: p.im.map(|v| -sign * v),
            });
        }
        out.extend(positive);
    }
    Ok(out)
}

/// Real recombination `sum_b dof_b * responses[b]`.
pub fn combine_responses(dof: &[f64], responses: &[Volume]) -> Volume {
    let mut out = vec![0.0; responses[0].len()];
    for (w, r) in dof.iter().zip(responses) {
        for (o, v) in out.iter_mut().zip(r.data()) {
            *o += w * v;
        }
    }
    Volume::new(responses[0].shape(), out).expect("matching shapes")
}

/// Signed steered responses `I * f(R .)` for every `R` in the set, each a
/// linear combination of the `(N+1)^2` basis responses.
pub fn s_lri_stack(
    input: &Volume,
    coeffs: &HarmonicCoefficients,
    profiles: &RadialProfileSet,
    set: &RotationSet,
    stride: usize,
) -> Result<OrientationStack> {
    nonempty(set)?;
    check_pair(coeffs, profiles)?;
    let basis = AngularBasis::new(profiles.side(), coeffs.max_degree())?;
    let responses = real_basis_responses(input, &basis, profiles, stride)?;
    Ok(OrientationStack {
        label: Some(set.label),
        volumes: steer_stack(coeffs, &set.triples, &responses),
    })
}

fn steer_stack(coeffs: &HarmonicCoefficients, rotations: &[EulerTriple], responses: &[Volume]) -> Vec<Volume> {
    rotations
        .par_iter()
        .map(|r| combine_responses(steer_coefficients(coeffs, r).dof(), responses))
        .collect()
}

/// `max_R |I * f(R .)|` per voxel, with `f` synthesized from `C` and `H`.
pub fn s_lri(
    input: &Volume,
    coeffs: &HarmonicCoefficients,
    profiles: &RadialProfileSet,
    set: &RotationSet,
    stride: usize,
) -> Result<Volume> {
    Ok(orientation_max_pool(&s_lri_stack(input, coeffs, profiles, set, stride)?)?.0)
}

/// Energy of degree `n` from real basis responses:
/// `sum_m |r_{n,m}|^2 = r_{n,0}^2 + 1/2 sum_{m>0} (re_b^2 + im_b^2)`.
pub fn sse_from_basis(responses: &[Volume], n: usize) -> Volume {
    let base = n * n;
    let mut out: Vec<f64> = responses[base].data().iter().map(|v| v * v).collect();
    for b in base + 1..(n + 1) * (n + 1) {
        for (o, v) in out.iter_mut().zip(responses[b].data()) {
            *o += 0.5 * v * v;
        }
    }
    Volume::new(responses[base].shape(), out).expect("matching shapes")
}

/// Solid spherical energy map of degree `n`.
pub fn sse(input: &Volume, profiles: &RadialProfileSet, n: usize, stride: usize) -> Result<ResponseMap> {
    if n > profiles.max_degree() {
        return Err(Error::InvalidConfig(format!(
            "degree {n} above profile degree {}",
            profiles.max_degree()
        )));
    }
    let basis = AngularBasis::new(profiles.side(), n)?;
    let mut truncated = Vec::with_capacity(n + 1);
    for d in 0..=n {
        truncated.push(profiles.profile(d).to_vec());
    }
    let profiles = if profiles.separable() {
        RadialProfileSet::new(profiles.side(), n, true, vec![truncated.swap_remove(0)])?
    } else {
        RadialProfileSet::new(profiles.side(), n, false, truncated)?
    };
    let responses = real_basis_responses(input, &basis, &profiles, stride)?;
    Ok(ResponseMap {
        volume: sse_from_basis(&responses, n),
        operator: Operator::Sse,
        filter: 0,
        degree: Some(n),
    })
}

/// Where the kernels of the global feature come from.
#[derive(Debug, Clone, Copy)]
pub enum KernelSource<'a> {
    Voxel(&'a VoxelKernel),
    Steered {
        coeffs: &'a HarmonicCoefficients,
        profiles: &'a RadialProfileSet,
    },
}

/// `max_R mean_x |(I * f(R .))(x)|`, the mean running over the valid region.
pub fn global_ri_feature(input: &Volume, source: KernelSource<'_>, set: &RotationSet, stride: usize) -> Result<f64> {
    let stack = match source {
        KernelSource::Voxel(k) => g_lri_stack(input, k, set, stride)?,
        KernelSource::Steered { coeffs, profiles } => s_lri_stack(input, coeffs, profiles, set, stride)?,
    };
    Ok(stack
        .volumes
        .iter()
        .map(|v| v.data().iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
        .fold(f64::NEG_INFINITY, f64::max))
}
