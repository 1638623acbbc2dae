use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{radial_param_count, AngularBasis};
use crate::volume::{correlate_into, valid_shape, Volume};

use super::ModelConfig;

/// Precomputed responses of each training volume to the "tent" kernels
/// `t_j(|x|) A_b(x)`, where `t_j` is the piecewise-linear hat centred on
/// radius `j`. Any solid harmonic basis response is a profile-weighted sum
/// of these, `Phi_b = sum_j h_{n(b)}[j] T_{j,b}`, so steered and energy
/// models skip the convolutions during training.
///
/// Per sample the layout is `[voxel][j][b]` in single precision.
#[derive(Debug, Clone)]
pub struct BasisCache {
    side: usize,
    stride: usize,
    max_degree: usize,
    radial: usize,
    input_shape: [usize; 3],
    out_shape: [usize; 3],
    samples: Vec<Vec<f32>>,
}

impl BasisCache {
    pub fn bytes_needed(side: usize, stride: usize, max_degree: usize, input_shape: [usize; 3], count: usize) -> Result<usize> {
        let out = valid_shape(input_shape, side, stride)?;
        let voxels = out[0] * out[1] * out[2];
        Ok(count * voxels * radial_param_count(side)? * (max_degree + 1).pow(2) * std::mem::size_of::<f32>())
    }

    pub fn build(side: usize, stride: usize, max_degree: usize, volumes: &[Volume]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::InvalidConfig("cannot cache an empty set".into()))?;
        let input_shape = first.shape();
        for v in volumes {
            if v.shape() != input_shape {
                return Err(Error::Shape("cached volumes must share one shape".into()));
            }
        }
        let basis = AngularBasis::new(side, max_degree)?;
        let radial = basis.radial_samples();
        let blen = basis.basis_len();
        let out_shape = valid_shape(input_shape, side, stride)?;
        let voxels = out_shape[0] * out_shape[1] * out_shape[2];
        let tents: Vec<Vec<f64>> = (0..radial)
            .flat_map(|j| (0..blen).map(move |b| (j, b)))
            .map(|(j, b)| basis.tent_kernel(j, b))
            .collect();
        let samples = volumes
            .par_iter()
            .map(|v| {
                let mut out = vec![0f32; voxels * radial * blen];
                let mut map = vec![0.0; voxels];
                for (t, kernel) in tents.iter().enumerate() {
                    map.iter_mut().for_each(|m| *m = 0.0);
                    correlate_into(v.data(), input_shape, kernel, side, stride, &mut map, out_shape);
                    for (x, m) in map.iter().enumerate() {
                        out[x * radial * blen + t] = *m as f32;
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            side,
            stride,
            max_degree,
            radial,
            input_shape,
            out_shape,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.samples[i]
    }

    pub fn basis_len(&self) -> usize {
        (self.max_degree + 1).pow(2)
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn out_shape(&self) -> [usize; 3] {
        self.out_shape
    }

    /// Errors unless the cache can serve `cfg` on inputs of `input_shape`
    /// with `count` samples.
    pub fn check(&self, cfg: &ModelConfig, input_shape: [usize; 3], count: usize) -> Result<()> {
        let fits = cfg.variant.has_profiles()
            && cfg.side == self.side
            && cfg.stride == self.stride
            && cfg.max_degree <= self.max_degree
            && input_shape == self.input_shape
            && count == self.samples.len();
        if fits {
            Ok(())
        } else {
            Err(Error::StaleCache(format!(
                "cache (c={}, stride={}, N<={}, {:?}, {} samples) does not serve {cfg} on {input_shape:?} x {count}",
                self.side,
                self.stride,
                self.max_degree,
                self.input_shape,
                self.samples.len()
            )))
        }
    }

    pub(crate) fn radial(&self) -> usize {
        self.radial
    }
}
