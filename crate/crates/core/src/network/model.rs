use crate::error::{Error, Result};
use crate::kernels::{AngularBasis, RealSteering, VoxelKernel, KernelProvenance};
use crate::rotations::build_rotation_set;
use crate::volume::{correlate_into, kernel_gradient_into, valid_shape, Volume};

use super::{BasisCache, Layout, ModelConfig, Variant};

/// What a single forward pass reads: the raw volume, optionally with its
/// cached tent responses.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Direct(&'a Volume),
    Cached {
        volume: &'a Volume,
        tents: &'a [f32],
        radial: usize,
        basis_len: usize,
    },
}

impl<'a> ModelInput<'a> {
    pub fn cached(volume: &'a Volume, cache: &'a BasisCache, index: usize) -> Self {
        ModelInput::Cached {
            volume,
            tents: cache.sample(index),
            radial: cache.radial(),
            basis_len: cache.basis_len(),
        }
    }

    pub fn volume(&self) -> &'a Volume {
        match *self {
            ModelInput::Direct(v) => v,
            ModelInput::Cached { volume, .. } => volume,
        }
    }
}

#[derive(Debug, Clone)]
enum FilterCache {
    Conv,
    Pooled {
        signed: Vec<f64>,
        arg: Vec<u32>,
    },
    Best {
        rotation: usize,
        response: Vec<f64>,
    },
    SteeredPooled {
        phi: Vec<f64>,
        weights: Vec<f64>,
        signed: Vec<f64>,
        arg: Vec<u32>,
    },
    SteeredBest {
        phi: Vec<f64>,
        weights: Vec<f64>,
        rotation: usize,
        response: Vec<f64>,
    },
    Energy {
        phi: Vec<f64>,
    },
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<'a> {
    input: ModelInput<'a>,
    fingerprint: u64,
    filters: Vec<FilterCache>,
    channels: Vec<Vec<f64>>,
    features: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardPass<'_> {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Pooled per-channel features.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Channel maps before bias and ReLU (length 1 for global variants).
    pub fn channel_maps(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    /// Softmax cross-entropy against `class`, stabilized by log-sum-exp.
    pub fn loss(&self, class: usize) -> f64 {
        log_sum_exp(&self.logits) - self.logits[class]
    }

    /// Gradient of [`ForwardPass::loss`] with respect to the logits.
    pub fn loss_gradient(&self, class: usize) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        let mut g: Vec<f64> = self.logits.iter().map(|z| (z - lse).exp()).collect();
        g[class] -= 1.0;
        g
    }

    /// Discrete state of every piecewise-linear switch (argmax, signs, ReLU
    /// masks); equal patterns mean the loss is smooth between two passes.
    fn pattern(&self, bias: &[f64]) -> Vec<u32> {
        let mut out = Vec::new();
        let signs = |v: &[f64], out: &mut Vec<u32>| out.extend(v.iter().map(|x| (x.signum() + 1.0) as u32));
        for fc in &self.filters {
            match fc {
                FilterCache::Conv | FilterCache::Energy { .. } => {}
                FilterCache::Pooled { signed, arg } | FilterCache::SteeredPooled { signed, arg, .. } => {
                    out.extend_from_slice(arg);
                    signs(signed, &mut out);
                }
                FilterCache::Best { rotation, response } | FilterCache::SteeredBest { rotation, response, .. } => {
                    out.push(*rotation as u32);
                    signs(response, &mut out);
                }
            }
        }
        for (c, map) in self.channels.iter().enumerate() {
            let b = bias.get(c).copied().unwrap_or(0.0);
            out.extend(map.iter().map(|a| (a + b > 0.0) as u32));
        }
        out.extend(self.hidden_pre.iter().map(|u| (*u > 0.0) as u32));
        out
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn fingerprint(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for byte in p.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// `[rows][cols]` to `[cols][rows]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Responses of every orientation at one voxel, `wt` laid out `[b][r]`.
#[inline]
fn steer_all(wt: &[f64], phi: &[f64], out: &mut [f64]) {
    let m = out.len();
    out.fill(0.0);
    for (b, &p) in phi.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&wt[b * m..(b + 1) * m]) {
            *o += p * w;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A configuration plus the fixed geometry it needs (basis kernels,
/// steering matrices, kernel rotation maps).
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    basis: Option<AngularBasis>,
    steering: Vec<RealSteering>,
    /// Per rotation and kernel voxel, the `(source voxel, weight)` pairs of
    /// `k(R x)`.
    kernel_maps: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let set = build_rotation_set(cfg.rotation_label());
        let basis = if cfg.variant.has_profiles() {
            Some(AngularBasis::new(cfg.side, cfg.max_degree)?)
        } else {
            None
        };
        let steering = if cfg.variant.is_steered() {
            set.triples.iter().map(|r| RealSteering::new(cfg.max_degree, r)).collect()
        } else {
            Vec::new()
        };
        let kernel_maps = if matches!(cfg.variant, Variant::GLri | Variant::GRi) {
            set.matrices()
                .iter()
                .map(|m| Volume::rotation_weights([cfg.side; 3], m))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            layout,
            basis,
            steering,
            kernel_maps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    /// Voxel kernel of filter `f` (synthesized for steered variants).
    pub fn filter_kernel(&self, params: &[f64], f: usize) -> VoxelKernel {
        let c = self.cfg.side;
        let fl = &self.layout.filters[f];
        let (data, provenance) = if self.cfg.variant.has_kernel() {
            (params[fl.kernel.clone()].to_vec(), KernelProvenance::Free)
        } else {
            let basis = self.basis.as_ref().expect("profile variants carry a basis");
            let mut out = vec![0.0; c * c * c];
            for n in 0..=self.cfg.max_degree {
                let radial = basis.radial_field(self.profile(params, f, n));
                for b in n * n..(n + 1) * (n + 1) {
                    let w = if self.cfg.variant.is_steered() { params[fl.coeffs.start + b] } else { 1.0 };
                    for ((o, a), r) in out.iter_mut().zip(basis.real(b)).zip(&radial) {
                        *o += w * a * r;
                    }
                }
            }
            (out, KernelProvenance::Synthesized)
        };
        VoxelKernel {
            volume: Volume::new([c; 3], data).expect("cubic kernel"),
            provenance,
        }
    }

    fn profile<'p>(&self, params: &'p [f64], f: usize, n: usize) -> &'p [f64] {
        let nr = self.cfg.radial_samples();
        let start = self.layout.filters[f].profiles.start + if self.cfg.separable { 0 } else { n * nr };
        &params[start..start + nr]
    }

    fn profile_offset(&self, f: usize, n: usize) -> usize {
        let nr = self.cfg.radial_samples();
        self.layout.filters[f].profiles.start + if self.cfg.separable { 0 } else { n * nr }
    }

    fn out_shape(&self, input: &ModelInput<'_>) -> Result<[usize; 3]> {
        valid_shape(input.volume().shape(), self.cfg.side, self.cfg.stride)
    }

    fn correlate(&self, input: &Volume, kernel: &[f64], out_shape: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; out_shape.iter().product()];
        correlate_into(input.data(), input.shape(), kernel, self.cfg.side, self.cfg.stride, &mut out, out_shape);
        out
    }

    fn kernel_gradient(&self, input: &Volume, grad: &[f64], out_shape: [usize; 3]) -> Vec<f64> {
        let mut dk = vec![0.0; self.cfg.side.pow(3)];
        kernel_gradient_into(input.data(), input.shape(), grad, out_shape, self.cfg.side, self.cfg.stride, &mut dk);
        dk
    }

    fn rotated_kernel(&self, kernel: &[f64], r: usize) -> Vec<f64> {
        self.kernel_maps[r]
            .iter()
            .map(|w| w.iter().map(|&(s, a)| a * kernel[s]).sum())
            .collect()
    }

    /// Basis responses `Phi[x][b]`, `b < (N+1)^2`.
    fn basis_responses(&self, params: &[f64], f: usize, input: &ModelInput<'_>, out_shape: [usize; 3]) -> Vec<f64> {
        let blen = self.cfg.basis_len();
        let voxels: usize = out_shape.iter().product();
        let mut phi = vec![0.0; voxels * blen];
        match *input {
            ModelInput::Cached {
                tents,
                radial,
                basis_len,
                ..
            } => {
                let mut h = vec![0.0; radial * blen];
                for b in 0..blen {
                    let prof = self.profile(params, f, AngularBasis::degree_of(b));
                    for j in 0..radial {
                        h[j * blen + b] = prof[j];
                    }
                }
                for x in 0..voxels {
                    let t = &tents[x * radial * basis_len..(x + 1) * radial * basis_len];
                    let p = &mut phi[x * blen..(x + 1) * blen];
                    for j in 0..radial {
                        let tj = &t[j * basis_len..j * basis_len + blen];
                        let hj = &h[j * blen..(j + 1) * blen];
                        for ((pb, hb), tb) in p.iter_mut().zip(hj).zip(tj) {
                            *pb += hb * *tb as f64;
                        }
                    }
                }
            }
            ModelInput::Direct(volume) => {
                let basis = self.basis.as_ref().expect("profile variants carry a basis");
                for n in 0..=self.cfg.max_degree {
                    let radial = basis.radial_field(self.profile(params, f, n));
                    for b in n * n..(n + 1) * (n + 1) {
                        let kernel: Vec<f64> = basis.real(b).iter().zip(&radial).map(|(a, r)| a * r).collect();
                        let map = self.correlate(volume, &kernel, out_shape);
                        for (x, v) in map.iter().enumerate() {
                            phi[x * blen + b] = *v;
                        }
                    }
                }
            }
        }
        phi
    }

    /// Accumulates the profile gradient of filter `f` given `dPhi[x][b]`.
    fn profile_gradient(
        &self,
        f: usize,
        input: &ModelInput<'_>,
        dphi: &[f64],
        out_shape: [usize; 3],
        grad: &mut [f64],
    ) {
        let blen = self.cfg.basis_len();
        let voxels: usize = out_shape.iter().product();
        let nr = self.cfg.radial_samples();
        let mut dh = vec![0.0; nr * blen];
        match *input {
            ModelInput::Cached {
                tents,
                radial,
                basis_len,
                ..
            } => {
                for x in 0..voxels {
                    let t = &tents[x * radial * basis_len..(x + 1) * radial * basis_len];
                    let d = &dphi[x * blen..(x + 1) * blen];
                    for j in 0..radial {
                        let tj = &t[j * basis_len..j * basis_len + blen];
                        for ((acc, db), tb) in dh[j * blen..(j + 1) * blen].iter_mut().zip(d).zip(tj) {
                            *acc += db * *tb as f64;
                        }
                    }
                }
            }
            ModelInput::Direct(volume) => {
                let basis = self.basis.as_ref().expect("profile variants carry a basis");
                let mut map = vec![0.0; voxels];
                for b in 0..blen {
                    for (x, m) in map.iter_mut().enumerate() {
                        *m = dphi[x * blen + b];
                    }
                    if map.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let g = self.kernel_gradient(volume, &map, out_shape);
                    for (v, (gv, a)) in g.iter().zip(basis.real(b)).enumerate() {
                        for &(j, w) in &basis.tents()[v] {
                            dh[j * blen + b] += w * a * gv;
                        }
                    }
                }
            }
        }
        for b in 0..blen {
            let off = self.profile_offset(f, AngularBasis::degree_of(b));
            for j in 0..nr {
                grad[off + j] += dh[j * blen + b];
            }
        }
    }

    fn steered_weights(&self, params: &[f64], f: usize) -> Vec<f64> {
        let blen = self.cfg.basis_len();
        let theta = &params[self.layout.filters[f].coeffs.clone()];
        let mut w = vec![0.0; self.steering.len() * blen];
        for (r, s) in self.steering.iter().enumerate() {
            s.apply(theta, &mut w[r * blen..(r + 1) * blen]);
        }
        w
    }

    fn filter_forward(
        &self,
        params: &[f64],
        f: usize,
        input: &ModelInput<'_>,
        out_shape: [usize; 3],
        channels: &mut Vec<Vec<f64>>,
    ) -> FilterCache {
        let volume = input.volume();
        let voxels: usize = out_shape.iter().product();
        let fl = &self.layout.filters[f];
        match self.cfg.variant {
            Variant::Z3 | Variant::Z3Augm => {
                channels.push(self.correlate(volume, &params[fl.kernel.clone()], out_shape));
                FilterCache::Conv
            }
            Variant::GLri => {
                let kernel = &params[fl.kernel.clone()];
                let mut signed = vec![0.0f64; voxels];
                let mut arg = vec![0u32; voxels];
                for r in 0..self.kernel_maps.len() {
                    let resp = self.correlate(volume, &self.rotated_kernel(kernel, r), out_shape);
                    for x in 0..voxels {
                        if r == 0 || resp[x].abs() > signed[x].abs() {
                            signed[x] = resp[x];
                            arg[x] = r as u32;
                        }
                    }
                }
                channels.push(signed.iter().map(|v| v.abs()).collect());
                FilterCache::Pooled { signed, arg }
            }
            Variant::GRi => {
                let kernel = &params[fl.kernel.clone()];
                let mut best = (0, f64::NEG_INFINITY, Vec::new());
                for r in 0..self.kernel_maps.len() {
                    let resp = self.correlate(volume, &self.rotated_kernel(kernel, r), out_shape);
                    let mean = resp.iter().map(|v| v.abs()).sum::<f64>() / voxels as f64;
                    if mean > best.1 {
                        best = (r, mean, resp);
                    }
                }
                channels.push(vec![best.1]);
                FilterCache::Best {
                    rotation: best.0,
                    response: best.2,
                }
            }
            Variant::SLri => {
                let blen = self.cfg.basis_len();
                let phi = self.basis_responses(params, f, input, out_shape);
                let weights = self.steered_weights(params, f);
                let m = self.steering.len();
                let wt = transpose(&weights, m, blen);
                let mut signed = vec![0.0; voxels];
                let mut arg = vec![0u32; voxels];
                let mut v = vec![0.0; m];
                for x in 0..voxels {
                    steer_all(&wt, &phi[x * blen..(x + 1) * blen], &mut v);
                    let mut at = 0;
                    for r in 1..m {
                        if v[r].abs() > v[at].abs() {
                            at = r;
                        }
                    }
                    signed[x] = v[at];
                    arg[x] = at as u32;
                }
                channels.push(signed.iter().map(|v| v.abs()).collect());
                FilterCache::SteeredPooled {
                    phi,
                    weights,
                    signed,
                    arg,
                }
            }
            Variant::SRi => {
                let blen = self.cfg.basis_len();
                let phi = self.basis_responses(params, f, input, out_shape);
                let weights = self.steered_weights(params, f);
                let m = self.steering.len();
                let wt = transpose(&weights, m, blen);
                let mut sums = vec![0.0; m];
                let mut v = vec![0.0; m];
                for x in 0..voxels {
                    steer_all(&wt, &phi[x * blen..(x + 1) * blen], &mut v);
                    for (s, vr) in sums.iter_mut().zip(&v) {
                        *s += vr.abs();
                    }
                }
                let mut rotation = 0;
                for r in 1..m {
                    if sums[r] > sums[rotation] {
                        rotation = r;
                    }
                }
                let w = &weights[rotation * blen..(rotation + 1) * blen];
                let response = (0..voxels).map(|x| dot(w, &phi[x * blen..(x + 1) * blen])).collect();
                channels.push(vec![sums[rotation] / voxels as f64]);
                FilterCache::SteeredBest {
                    phi,
                    weights,
                    rotation,
                    response,
                }
            }
            Variant::Sse => {
                let blen = self.cfg.basis_len();
                let phi = self.basis_responses(params, f, input, out_shape);
                for n in 0..=self.cfg.max_degree {
                    let map = (0..voxels)
                        .map(|x| {
                            let p = &phi[x * blen..(x + 1) * blen];
                            let zero = p[n * n] * p[n * n];
                            let rest: f64 = p[n * n + 1..(n + 1) * (n + 1)].iter().map(|v| v * v).sum();
                            zero + 0.5 * rest
                        })
                        .collect();
                    channels.push(map);
                }
                FilterCache::Energy { phi }
            }
        }
    }

    fn filter_backward(
        &self,
        f: usize,
        input: &ModelInput<'_>,
        cache: &FilterCache,
        da: &[Vec<f64>],
        out_shape: [usize; 3],
        grad: &mut [f64],
    ) {
        let volume = input.volume();
        let voxels: usize = out_shape.iter().product();
        let fl = self.layout.filters[f].clone();
        let blen = self.cfg.basis_len();
        match cache {
            FilterCache::Conv => {
                let dk = self.kernel_gradient(volume, &da[f], out_shape);
                for (g, d) in grad[fl.kernel].iter_mut().zip(dk) {
                    *g += d;
                }
            }
            FilterCache::Pooled { signed, arg } => {
                let s: Vec<f64> = da[f].iter().zip(signed).map(|(d, v)| d * sign(*v)).collect();
                let mut routed = vec![0.0; voxels];
                for r in 0..self.kernel_maps.len() {
                    let mut any = false;
                    for x in 0..voxels {
                        routed[x] = if arg[x] as usize == r { s[x] } else { 0.0 };
                        any |= routed[x] != 0.0;
                    }
                    if any {
                        let dk = self.kernel_gradient(volume, &routed, out_shape);
                        self.unrotate_into(&dk, r, &mut grad[fl.kernel.clone()]);
                    }
                }
            }
            FilterCache::Best { rotation, response } => {
                let d = da[f][0] / voxels as f64;
                let g: Vec<f64> = response.iter().map(|v| d * sign(*v)).collect();
                let dk = self.kernel_gradient(volume, &g, out_shape);
                self.unrotate_into(&dk, *rotation, &mut grad[fl.kernel]);
            }
            FilterCache::SteeredPooled {
                phi,
                weights,
                signed,
                arg,
            } => {
                let mut dphi = vec![0.0; voxels * blen];
                let mut dw = vec![0.0; weights.len()];
                for x in 0..voxels {
                    let s = da[f][x] * sign(signed[x]);
                    if s == 0.0 {
                        continue;
                    }
                    let r = arg[x] as usize;
                    let w = &weights[r * blen..(r + 1) * blen];
                    let p = &phi[x * blen..(x + 1) * blen];
                    for b in 0..blen {
                        dphi[x * blen + b] = s * w[b];
                        dw[r * blen + b] += s * p[b];
                    }
                }
                self.coefficient_gradient(&dw, &mut grad[fl.coeffs]);
                self.profile_gradient(f, input, &dphi, out_shape, grad);
            }
            FilterCache::SteeredBest {
                phi,
                weights,
                rotation,
                response,
            } => {
                let d = da[f][0] / voxels as f64;
                let r = *rotation;
                let w = &weights[r * blen..(r + 1) * blen];
                let mut dphi = vec![0.0; voxels * blen];
                let mut dw = vec![0.0; weights.len()];
                for x in 0..voxels {
                    let s = d * sign(response[x]);
                    let p = &phi[x * blen..(x + 1) * blen];
                    for b in 0..blen {
                        dphi[x * blen + b] = s * w[b];
                        dw[r * blen + b] += s * p[b];
                    }
                }
                self.coefficient_gradient(&dw, &mut grad[fl.coeffs]);
                self.profile_gradient(f, input, &dphi, out_shape, grad);
            }
            FilterCache::Energy { phi } => {
                let per = self.cfg.max_degree + 1;
                let mut dphi = vec![0.0; voxels * blen];
                for n in 0..per {
                    let d = &da[f * per + n];
                    for x in 0..voxels {
                        if d[x] == 0.0 {
                            continue;
                        }
                        let base = x * blen;
                        dphi[base + n * n] = 2.0 * d[x] * phi[base + n * n];
                        for b in n * n + 1..(n + 1) * (n + 1) {
                            dphi[base + b] = d[x] * phi[base + b];
                        }
                    }
                }
                self.profile_gradient(f, input, &dphi, out_shape, grad);
            }
        }
    }

    fn unrotate_into(&self, dk_rot: &[f64], r: usize, dk: &mut [f64]) {
        for (v, w) in self.kernel_maps[r].iter().enumerate() {
            for &(s, a) in w {
                dk[s] += a * dk_rot[v];
            }
        }
    }

    fn coefficient_gradient(&self, dw: &[f64], out: &mut [f64]) {
        let blen = self.cfg.basis_len();
        for (r, s) in self.steering.iter().enumerate() {
            let g = &dw[r * blen..(r + 1) * blen];
            if g.iter().any(|&v| v != 0.0) {
                s.apply_transpose_add(g, out);
            }
        }
    }

    pub fn forward<'a>(&self, params: &[f64], input: ModelInput<'a>) -> Result<ForwardPass<'a>> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "{} parameters, model has {}",
                params.len(),
                self.layout.total
            )));
        }
        if let ModelInput::Cached { tents, radial, basis_len, volume } = input {
            let voxels: usize = self.out_shape(&input)?.iter().product();
            if !self.cfg.variant.has_profiles()
                || basis_len < self.cfg.basis_len()
                || radial != self.cfg.radial_samples()
                || tents.len() != voxels * radial * basis_len
            {
                return Err(Error::StaleCache(format!(
                    "cached responses do not match {} on {:?}",
                    self.cfg,
                    volume.shape()
                )));
            }
        }
        let out_shape = self.out_shape(&input)?;
        let mut channels = Vec::with_capacity(self.cfg.channels());
        let filters = (0..self.cfg.filters)
            .map(|f| self.filter_forward(params, f, &input, out_shape, &mut channels))
            .collect();

        let bias = &params[self.layout.bias.clone()];
        let features: Vec<f64> = channels
            .iter()
            .enumerate()
            .map(|(c, map)| {
                let b = bias.get(c).copied().unwrap_or(0.0);
                map.iter().map(|a| (a + b).max(0.0)).sum::<f64>() / map.len() as f64
            })
            .collect();

        let (hidden_pre, hidden) = if self.cfg.hidden > 0 {
            let w = &params[self.layout.hidden_w.clone()];
            let b = &params[self.layout.hidden_b.clone()];
            let ch = features.len();
            let pre: Vec<f64> = (0..self.cfg.hidden)
                .map(|i| b[i] + dot(&w[i * ch..(i + 1) * ch], &features))
                .collect();
            let post = pre.iter().map(|u| u.max(0.0)).collect();
            (pre, post)
        } else {
            (Vec::new(), Vec::new())
        };
        let head_in = if self.cfg.hidden > 0 { &hidden } else { &features };
        let w = &params[self.layout.out_w.clone()];
        let b = &params[self.layout.out_b.clone()];
        let k = head_in.len();
        let logits = (0..self.cfg.classes)
            .map(|c| b[c] + dot(&w[c * k..(c + 1) * k], head_in))
            .collect();

        Ok(ForwardPass {
            input,
            fingerprint: fingerprint(params),
            filters,
            channels,
            features,
            hidden_pre,
            hidden,
            logits,
        })
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the logits.
    pub fn backward(&self, params: &[f64], pass: &ForwardPass<'_>, grad_logits: &[f64]) -> Result<Vec<f64>> {
        if fingerprint(params) != pass.fingerprint || params.len() != self.layout.total {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if grad_logits.len() != self.cfg.classes {
            return Err(Error::Shape(format!("{} logit gradients", grad_logits.len())));
        }
        let mut grad = vec![0.0; self.layout.total];
        let l = &self.layout;

        let head_in = if self.cfg.hidden > 0 { &pass.hidden } else { &pass.features };
        let k = head_in.len();
        let w = &params[l.out_w.clone()];
        let mut d_head = vec![0.0; k];
        for (c, g) in grad_logits.iter().enumerate() {
            grad[l.out_b.start + c] += g;
            for i in 0..k {
                grad[l.out_w.start + c * k + i] += g * head_in[i];
                d_head[i] += g * w[c * k + i];
            }
        }

        let ch = pass.features.len();
        let d_features = if self.cfg.hidden > 0 {
            let w1 = &params[l.hidden_w.clone()];
            let mut df = vec![0.0; ch];
            for i in 0..self.cfg.hidden {
                let du = if pass.hidden_pre[i] > 0.0 { d_head[i] } else { 0.0 };
                grad[l.hidden_b.start + i] += du;
                for c in 0..ch {
                    grad[l.hidden_w.start + i * ch + c] += du * pass.features[c];
                    df[c] += du * w1[i * ch + c];
                }
            }
            df
        } else {
            d_head
        };

        let bias = &params[l.bias.clone()];
        let da: Vec<Vec<f64>> = pass
            .channels
            .iter()
            .enumerate()
            .map(|(c, map)| {
                let b = bias.get(c).copied().unwrap_or(0.0);
                let scale = d_features[c] / map.len() as f64;
                map.iter().map(|a| if a + b > 0.0 { scale } else { 0.0 }).collect()
            })
            .collect();
        if self.cfg.variant.has_bias() {
            for (c, d) in da.iter().enumerate() {
                grad[l.bias.start + c] += d.iter().sum::<f64>();
            }
        }

        let out_shape = self.out_shape(&pass.input)?;
        for (f, cache) in pass.filters.iter().enumerate() {
            self.filter_backward(f, &pass.input, cache, &da, out_shape, &mut grad);
        }
        Ok(grad)
    }

    pub fn loss(&self, params: &[f64], input: ModelInput<'_>, class: usize) -> Result<f64> {
        Ok(self.forward(params, input)?.loss(class))
    }

    /// `(loss, prediction correct, gradient)` for one labelled input.
    pub fn loss_and_gradient(&self, params: &[f64], input: ModelInput<'_>, class: usize) -> Result<(f64, bool, Vec<f64>)> {
        if class >= self.cfg.classes {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        let pass = self.forward(params, input)?;
        let grad = self.backward(params, &pass, &pass.loss_gradient(class))?;
        Ok((pass.loss(class), pass.predicted_class() == class, grad))
    }

    fn pattern(&self, params: &[f64], input: ModelInput<'_>) -> Result<Vec<u32>> {
        let pass = self.forward(params, input)?;
        Ok(pass.pattern(&params[self.layout.bias.clone()]))
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Central-difference agreement for one parameter class.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub class: &'static str,
    pub checked: usize,
    /// Parameters whose perturbation flipped an argmax, sign or ReLU switch.
    pub skipped: usize,
    pub max_relative_error: f64,
}

/// Compares `backward` with central differences of step `step` for every
/// parameter. Parameters whose perturbation changes the activation pattern
/// are reported as skipped.
pub fn gradient_check(
    model: &Model,
    params: &[f64],
    input: ModelInput<'_>,
    class: usize,
    step: f64,
) -> Result<Vec<GradientCheck>> {
    let (_, _, analytic) = model.loss_and_gradient(params, input, class)?;
    let reference = model.pattern(params, input)?;
    let mut out = Vec::new();
    for (name, indices) in model.layout().classes() {
        let mut check = GradientCheck {
            class: name,
            checked: 0,
            skipped: 0,
            max_relative_error: 0.0,
        };
        for i in indices {
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let stable_plus = model.pattern(&p, input)? == reference;
            let plus = model.loss(&p, input, class)?;
            p[i] = params[i] - step;
            let stable_minus = model.pattern(&p, input)? == reference;
            let minus = model.loss(&p, input, class)?;
            if !(stable_plus && stable_minus) {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            check.max_relative_error = check.max_relative_error.max((a - numeric).abs() / denom);
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}
