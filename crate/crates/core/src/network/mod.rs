//! Single-layer classifiers: an operator layer followed by bias, ReLU,
//! global average pooling and a softmax classifier.

mod cache;
mod checkpoint;
mod model;
mod optim;

pub use cache::BasisCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{gradient_check, ForwardPass, GradientCheck, Model, ModelInput};
pub use optim::{adam_step, evaluate, train, train_from, LabeledVolumes, MetricRow, TrainConfig};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{check_nyquist, check_side, radial_param_count, HarmonicCoefficients};
use crate::rotations::RotationLabel;

/// Input channels of the operator layer (grey-level volumes).
pub const INPUT_CHANNELS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain 3D convolution.
    Z3,
    /// Plain convolution trained with random right-angle rotations.
    Z3Augm,
    /// Max over rotated voxel kernels of the absolute response.
    GLri,
    /// Max over rotated voxel kernels of the mean absolute response.
    GRi,
    /// Max over steered solid harmonic filters of the absolute response.
    SLri,
    /// Max over steered filters of the mean absolute response.
    SRi,
    /// Per-degree solid spherical energies.
    Sse,
}

impl Variant {
    pub fn has_kernel(self) -> bool {
        matches!(self, Variant::Z3 | Variant::Z3Augm | Variant::GLri | Variant::GRi)
    }

    pub fn is_steered(self) -> bool {
        matches!(self, Variant::SLri | Variant::SRi)
    }

    pub fn has_profiles(self) -> bool {
        matches!(self, Variant::SLri | Variant::SRi | Variant::Sse)
    }

    pub fn uses_rotations(self) -> bool {
        matches!(self, Variant::GLri | Variant::GRi | Variant::SLri | Variant::SRi)
    }

    /// Feature is a single spatially pooled scalar per rotation.
    pub fn is_global(self) -> bool {
        matches!(self, Variant::GRi | Variant::SRi)
    }

    pub fn has_bias(self) -> bool {
        self != Variant::SRi
    }

    pub fn augments(self) -> bool {
        self == Variant::Z3Augm
    }
}

/// Architecture of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// One radial profile shared by all degrees (`h`) instead of one per
    /// degree (`h_n`).
    pub separable: bool,
    pub max_degree: usize,
    pub rotations: RotationLabel,
    pub filters: usize,
    pub side: usize,
    pub stride: usize,
    pub classes: usize,
    /// Width of an optional hidden fully connected layer (0 = none).
    pub hidden: usize,
}

impl ModelConfig {
    /// Synthetic-texture setup: 7^3 kernels, stride 1, 2 filters, 2 classes.
    pub fn synthetic(variant: Variant, separable: bool, max_degree: usize, rotations: RotationLabel) -> Self {
        Self {
            variant,
            separable,
            max_degree,
            rotations,
            filters: 2,
            side: 7,
            stride: 1,
            classes: 2,
            hidden: 0,
        }
    }

    /// Parses names such as `z3`, `z3-augm`, `g-lri`, `s-lri-hn`, `sse-h`.
    pub fn parse_model(name: &str) -> Result<(Variant, bool)> {
        let lower = name.to_ascii_lowercase().replace('_', "");
        let parsed = match lower.as_str() {
            "z3" => (Variant::Z3, false),
            "z3-augm" | "z3augm" => (Variant::Z3Augm, false),
            "g-lri" => (Variant::GLri, false),
            "g-ri" => (Variant::GRi, false),
            "s-lri-h" => (Variant::SLri, true),
            "s-lri-hn" => (Variant::SLri, false),
            "s-ri-h" => (Variant::SRi, true),
            "s-ri-hn" => (Variant::SRi, false),
            "sse-h" | "sse-lri-h" => (Variant::Sse, true),
            "sse-hn" | "sse-lri-hn" => (Variant::Sse, false),
            _ => return Err(Error::InvalidConfig(format!("unknown model '{name}'"))),
        };
        Ok(parsed)
    }

    pub fn name(&self) -> String {
        let profile = if self.separable { "h" } else { "h_n" };
        match self.variant {
            Variant::Z3 => "Z3".into(),
            Variant::Z3Augm => "Z3-augm".into(),
            Variant::GLri => "G-LRI".into(),
            Variant::GRi => "G-RI".into(),
            Variant::SLri => format!("S-LRI-{profile}"),
            Variant::SRi => format!("S-RI-{profile}"),
            Variant::Sse => format!("SSE-LRI-{profile}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_side(self.side)?;
        if self.filters == 0 {
            return Err(Error::InvalidConfig("at least one filter is required".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("at least two classes are required".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if self.variant.has_profiles() {
            check_nyquist(self.max_degree, self.side)?;
        }
        Ok(())
    }

    pub fn radial_samples(&self) -> usize {
        radial_param_count(self.side).expect("validated side")
    }

    pub fn profiles_per_filter(&self) -> usize {
        if self.separable {
            1
        } else {
            self.max_degree + 1
        }
    }

    pub fn basis_len(&self) -> usize {
        (self.max_degree + 1).pow(2)
    }

    /// Channels entering the pooling stage.
    pub fn channels(&self) -> usize {
        match self.variant {
            Variant::Sse => self.filters * (self.max_degree + 1),
            _ => self.filters,
        }
    }

    /// Rotations actually used (a single identity for rotation-free variants).
    pub fn rotation_label(&self) -> RotationLabel {
        if self.variant.uses_rotations() {
            self.rotations
        } else {
            RotationLabel::M1
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())?;
        if self.variant.has_profiles() {
            write!(f, " N={}", self.max_degree)?;
        }
        if self.variant.uses_rotations() {
            write!(f, " {}", self.rotations)?;
        }
        write!(f, " filters={}", self.filters)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(ModelConfig::parse_model(s)?.0)
    }
}

/// Trainable parameter counts from the closed-form formulas.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let nf = cfg.filters;
    let nc = cfg.classes;
    let ch = cfg.channels();
    let head = if cfg.hidden == 0 {
        ch * nc + nc
    } else {
        ch * cfg.hidden + cfg.hidden + cfg.hidden * nc + nc
    };
    let profiles = || nf * cfg.radial_samples() * cfg.profiles_per_filter();
    let layer = match cfg.variant {
        Variant::Z3 | Variant::Z3Augm | Variant::GLri | Variant::GRi => nf * cfg.side.pow(3) + nf,
        Variant::SLri => profiles() + nf + cfg.basis_len() * nf,
        Variant::SRi => profiles() + cfg.basis_len() * nf,
        Variant::Sse => profiles() + nf * (cfg.max_degree + 1),
    };
    layer + head
}

/// Slices of one filter inside the flat parameter vector; unused parts are empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterLayout {
    pub coeffs: Range<usize>,
    pub profiles: Range<usize>,
    pub kernel: Range<usize>,
}

/// Field order of the flat parameter vector: for each filter its
/// coefficient DOF, radial profiles (degree-major) and voxel kernel; then the
/// channel biases, the hidden layer (row-major weights, then biases) and the
/// output layer (row-major `classes x inputs` weights, then biases).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub filters: Vec<FilterLayout>,
    pub bias: Range<usize>,
    pub hidden_w: Range<usize>,
    pub hidden_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let coeff_len = if cfg.variant.is_steered() { cfg.basis_len() } else { 0 };
        let profile_len = if cfg.variant.has_profiles() {
            cfg.radial_samples() * cfg.profiles_per_filter()
        } else {
            0
        };
        let kernel_len = if cfg.variant.has_kernel() { cfg.side.pow(3) } else { 0 };
        let filters = (0..cfg.filters)
            .map(|_| FilterLayout {
                coeffs: take(coeff_len),
                profiles: take(profile_len),
                kernel: take(kernel_len),
            })
            .collect();
        let ch = cfg.channels();
        let bias = take(if cfg.variant.has_bias() { ch } else { 0 });
        let (hidden_w, hidden_b, head_in) = if cfg.hidden > 0 {
            (take(cfg.hidden * ch), take(cfg.hidden), cfg.hidden)
        } else {
            (take(0), take(0), ch)
        };
        let out_w = take(cfg.classes * head_in);
        let out_b = take(cfg.classes);
        Self {
            filters,
            bias,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            total: at,
        }
    }

    /// Parameter classes as `(name, indices)`, for gradient checks and reports.
    pub fn classes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let gather = |f: &dyn Fn(&FilterLayout) -> Range<usize>| -> Vec<usize> {
            self.filters.iter().flat_map(f).collect()
        };
        let mut out = vec![
            ("coefficients", gather(&|l| l.coeffs.clone())),
            ("profiles", gather(&|l| l.profiles.clone())),
            ("kernel", gather(&|l| l.kernel.clone())),
            ("bias", self.bias.clone().collect()),
            ("hidden", self.hidden_w.clone().chain(self.hidden_b.clone()).collect()),
            ("output", self.out_w.clone().chain(self.out_b.clone()).collect()),
        ];
        out.retain(|(_, idx)| !idx.is_empty());
        out
    }
}

/// Flat parameters together with the Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub params: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ParameterState {
    pub fn from_params(params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            params,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

/// Variance of the coefficient initialization, `2 / (n_in (N+1)^2)`.
pub fn coefficient_variance(max_degree: usize) -> f64 {
    2.0 / (INPUT_CHANNELS * (max_degree + 1).pow(2)) as f64
}

/// Random initial parameters: coefficients with the variance above,
/// profiles standard normal, voxel kernels and dense weights He-normal,
/// biases zero.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParameterState> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    for fl in &layout.filters {
        if !fl.coeffs.is_empty() {
            let c = HarmonicCoefficients::random(cfg.max_degree, coefficient_variance(cfg.max_degree), &mut rng);
            params[fl.coeffs.clone()].copy_from_slice(c.dof());
        }
        for p in &mut params[fl.profiles.clone()] {
            *p = unit.sample(&mut rng);
        }
        let kernel = he(INPUT_CHANNELS * cfg.side.pow(3));
        for p in &mut params[fl.kernel.clone()] {
            *p = kernel.sample(&mut rng);
        }
    }
    let ch = cfg.channels();
    if cfg.hidden > 0 {
        let d = he(ch);
        for p in &mut params[layout.hidden_w.clone()] {
            *p = d.sample(&mut rng);
        }
    }
    let head_in = if cfg.hidden > 0 { cfg.hidden } else { ch };
    let d = he(head_in);
    for p in &mut params[layout.out_w.clone()] {
        *p = d.sample(&mut rng);
    }
    Ok(ParameterState::from_params(params))
}
