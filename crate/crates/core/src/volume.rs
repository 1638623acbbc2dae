//! Dense 3D scalar grids and the valid-mode cross-correlation engine.
//!
//! Storage is row-major with axis order `(x, y, z)`: the linear index of voxel
//! `(x, y, z)` in a grid of shape `(d1, d2, d3)` is `(x * d2 + y) * d3 + z`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::SignedPermutation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let len = shape[0] * shape[1] * shape[2];
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{} values for shape {:?} ({len} voxels)",
                data.len(),
                shape
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at voxel {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn cube(side: usize) -> Self {
        Self::zeros([side; 3])
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        self.check_same_shape(other)?;
        Ok(Volume {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Volume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sub-block starting at `offset` with the given shape.
    pub fn crop(&self, offset: [usize; 3], shape: [usize; 3]) -> Result<Volume> {
        for k in 0..3 {
            if offset[k] + shape[k] > self.shape[k] {
                return Err(Error::Shape(format!(
                    "crop {offset:?}+{shape:?} outside {:?}",
                    self.shape
                )));
            }
        }
        Ok(Volume::from_fn(shape, |x, y, z| {
            self.get(x + offset[0], y + offset[1], z + offset[2])
        }))
    }

    /// Rotation about the grid center by a right-angle rotation:
    /// `out(p) = self(center + R (p - center))`. Exact (a voxel permutation).
    pub fn rotate_exact(&self, rot: &SignedPermutation) -> Result<Volume> {
        let d = self.shape[0];
        if self.shape != [d; 3] {
            return Err(Error::Shape(format!("exact rotation needs a cube, got {:?}", self.shape)));
        }
        let off = d as i64 - 1;
        Ok(Volume::from_fn(self.shape, |x, y, z| {
            // doubled coordinates relative to the center keep everything integral
            let q = [2 * x as i64 - off, 2 * y as i64 - off, 2 * z as i64 - off];
            let r = rot.apply(q);
            let src = [(r[0] + off) / 2, (r[1] + off) / 2, (r[2] + off) / 2];
            self.get(src[0] as usize, src[1] as usize, src[2] as usize)
        }))
    }

    /// Linear-interpolation weights realizing `out(p) = self(center + R (p - center))`
    /// for an arbitrary rotation; samples outside the grid read as zero.
    /// Returns, per output voxel, the list of `(source index, weight)`.
    pub fn rotation_weights(shape: [usize; 3], rot: &Matrix3<f64>) -> Vec<Vec<(usize, f64)>> {
        let center = Vector3::new(
            (shape[0] as f64 - 1.0) / 2.0,
            (shape[1] as f64 - 1.0) / 2.0,
            (shape[2] as f64 - 1.0) / 2.0,
        );
        let mut out = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let p = Vector3::new(x as f64, y as f64, z as f64) - center;
                    let s = center + rot * p;
                    out.push(trilinear_weights(shape, [s.x, s.y, s.z]));
                }
            }
        }
        out
    }

    /// Trilinear resampling `out(p) = self(center + R (p - center))`.
    pub fn rotate_trilinear(&self, rot: &Matrix3<f64>) -> Volume {
        let weights = Volume::rotation_weights(self.shape, rot);
        Volume {
            shape: self.shape,
            data: weights
                .iter()
                .map(|w| w.iter().map(|&(i, a)| a * self.data[i]).sum())
                .collect(),
        }
    }

    /// Rotation using the exact path for right-angle rotations and
    /// trilinear interpolation otherwise.
    pub fn rotate(&self, rot: &Matrix3<f64>) -> Volume {
        match SignedPermutation::from_matrix(rot) {
            Some(p) if self.shape == [self.shape[0]; 3] => {
                self.rotate_exact(&p).expect("cubic volume")
            }
            _ => self.rotate_trilinear(rot),
        }
    }
}

/// Weights of the (up to 8) grid neighbours of a continuous position.
pub fn trilinear_weights(shape: [usize; 3], pos: [f64; 3]) -> Vec<(usize, f64)> {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let pos = [snap(pos[0]), snap(pos[1]), snap(pos[2])];
    let base = [pos[0].floor(), pos[1].floor(), pos[2].floor()];
    let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for k in 0..3 {
            let hi = (corner >> k) & 1 == 1;
            w *= if hi { frac[k] } else { 1.0 - frac[k] };
            idx[k] = base[k] as i64 + hi as i64;
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).all(|k| idx[k] >= 0 && (idx[k] as usize) < shape[k]) {
            let lin = (idx[0] as usize * shape[1] + idx[1] as usize) * shape[2] + idx[2] as usize;
            out.push((lin, w));
        }
    }
    out
}

/// Output shape of a valid cross-correlation.
pub fn valid_shape(input: [usize; 3], side: usize, stride: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let mut out = [0; 3];
    for k in 0..3 {
        if side > input[k] {
            return Err(Error::KernelTooLarge {
                kernel: side,
                input: input[k],
            });
        }
        out[k] = (input[k] - side) / stride + 1;
    }
    Ok(out)
}

fn kernel_side(kernel: &Volume) -> Result<usize> {
    let c = kernel.shape[0];
    if kernel.shape != [c; 3] {
        return Err(Error::Shape(format!("kernel must be cubic, got {:?}", kernel.shape)));
    }
    Ok(c)
}

/// Valid (no padding) cross-correlation
/// `out[x] = sum_o k[o] * input[stride * x + o]`.
pub fn conv3d(input: &Volume, kernel: &Volume, stride: usize) -> Result<Volume> {
    let c = kernel_side(kernel)?;
    let out_shape = valid_shape(input.shape, c, stride)?;
    let mut out = Volume::zeros(out_shape);
    correlate_into(input.data(), input.shape, kernel.data(), c, stride, out.data_mut(), out_shape);
    Ok(out)
}

/// Accumulates the valid cross-correlation of a raw input grid with a raw
/// `c^3` kernel into `out`.
pub fn correlate_into(
    input: &[f64],
    in_shape: [usize; 3],
    kernel: &[f64],
    c: usize,
    stride: usize,
    out: &mut [f64],
    out_shape: [usize; 3],
) {
    let [_, d1, d2] = in_shape;
    let [o0, o1, o2] = out_shape;
    for a in 0..c {
        for b in 0..c {
            for cz in 0..c {
                let w = kernel[(a * c + b) * c + cz];
                if w == 0.0 {
                    continue;
                }
                for x in 0..o0 {
                    for y in 0..o1 {
                        let orow = &mut out[(x * o1 + y) * o2..][..o2];
                        let start = ((stride * x + a) * d1 + stride * y + b) * d2 + cz;
                        if stride == 1 {
                            let irow = &input[start..start + o2];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += w * i;
                            }
                        } else {
                            for (z, o) in orow.iter_mut().enumerate() {
                                *o += w * input[start + stride * z];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv3d`] with respect to the kernel:
/// `dk[o] = sum_x grad[x] * input[stride * x + o]`.
pub fn kernel_gradient(input: &Volume, grad: &Volume, side: usize, stride: usize) -> Result<Volume> {
    let expected = valid_shape(input.shape, side, stride)?;
    if grad.shape != expected {
        return Err(Error::Shape(format!(
            "gradient shape {:?}, expected {expected:?}",
            grad.shape
        )));
    }
    let mut out = Volume::cube(side);
    kernel_gradient_into(input.data(), input.shape, grad.data(), expected, side, stride, out.data_mut());
    Ok(out)
}

pub fn kernel_gradient_into(
    input: &[f64],
    in_shape: [usize; 3],
    grad: &[f64],
    grad_shape: [usize; 3],
    c: usize,
    stride: usize,
    out: &mut [f64],
) {
    let [_, d1, d2] = in_shape;
    let [o0, o1, o2] = grad_shape;
    for a in 0..c {
        for b in 0..c {
            for cz in 0..c {
                let mut acc = 0.0;
                for x in 0..o0 {
                    for y in 0..o1 {
                        let grow = &grad[(x * o1 + y) * o2..][..o2];
                        let start = ((stride * x + a) * d1 + stride * y + b) * d2 + cz;
                        if stride == 1 {
                            acc += dot_lanes(grow, &input[start..start + o2]);
                        } else {
                            for (z, g) in grow.iter().enumerate() {
                                acc += g * input[start + stride * z];
                            }
                        }
                    }
                }
                out[(a * c + b) * c + cz] += acc;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            lanes[k] += x[k] * y[k];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}
