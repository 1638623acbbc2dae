use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::{build_rotation_set, RotationLabel, SignedPermutation};
use crate::volume::Volume;

use super::{init_parameters, BasisCache, Model, ModelInput, ParameterState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Random right-angle rotation of every presented sample.
    pub augment: bool,
    /// Metrics are reported every this many iterations (and at the end).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 5000,
            learning_rate: 1e-3,
            beta1: 0.99,
            beta2: 0.9999,
            epsilon: 1e-8,
            seed: 0,
            augment: false,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch size and log interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("learning rate and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Volumes with 0-based class indices.
#[derive(Debug, Clone, Copy)]
pub struct LabeledVolumes<'a> {
    pub volumes: &'a [Volume],
    pub classes: &'a [usize],
}

impl<'a> LabeledVolumes<'a> {
    pub fn new(volumes: &'a [Volume], classes: &'a [usize]) -> Result<Self> {
        if volumes.len() != classes.len() {
            return Err(Error::Shape(format!(
                "{} volumes but {} labels",
                volumes.len(),
                classes.len()
            )));
        }
        Ok(Self { volumes, classes })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_ms: u128,
}

/// One Adam update with bias correction.
pub fn adam_step(state: &mut ParameterState, grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i];
        state.first_moment[i] = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        state.second_moment[i] = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        let m = state.first_moment[i] / c1;
        let v = state.second_moment[i] / c2;
        state.params[i] -= cfg.learning_rate * m / (v.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Mean loss and accuracy over a labelled set.
pub fn evaluate(model: &Model, params: &[f64], data: LabeledVolumes<'_>, cache: Option<&BasisCache>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    if let Some(c) = cache {
        c.check(model.config(), data.volumes[0].shape(), data.len())?;
    }
    let results = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let input = match cache {
                Some(c) => ModelInput::cached(&data.volumes[i], c, i),
                None => ModelInput::Direct(&data.volumes[i]),
            };
            let pass = model.forward(params, input)?;
            Ok((pass.loss(data.classes[i]), pass.predicted_class() == data.classes[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().filter(|r| r.1).count() as f64 / n,
    ))
}

/// Trains from the seeded initialization.
pub fn train(
    model: &Model,
    train_set: LabeledVolumes<'_>,
    test_set: Option<LabeledVolumes<'_>>,
    cache: Option<&BasisCache>,
    cfg: &TrainConfig,
) -> Result<(ParameterState, Vec<MetricRow>)> {
    let state = init_parameters(model.config(), cfg.seed)?;
    train_from(model, state, train_set, test_set, cache, cfg)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Minibatch Adam from a given state. Per-sample gradients are computed in
/// parallel and summed in sample order, so results do not depend on the
/// thread count.
pub fn train_from(
    model: &Model,
    mut state: ParameterState,
    train_set: LabeledVolumes<'_>,
    test_set: Option<LabeledVolumes<'_>>,
    cache: Option<&BasisCache>,
    cfg: &TrainConfig,
) -> Result<(ParameterState, Vec<MetricRow>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if let Some(c) = cache {
        c.check(model.config(), train_set.volumes[0].shape(), train_set.len())?;
    }
    let augment = cfg.augment || model.config().variant.augments();
    let rotations: Vec<SignedPermutation> = build_rotation_set(RotationLabel::M24)
        .matrices()
        .iter()
        .map(|m| SignedPermutation::from_matrix(m).expect("right-angle rotation"))
        .collect();
    let mut order_rng = stream(cfg.seed, 1);
    let mut augment_rng = stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let start = Instant::now();
    let mut metrics = Vec::new();
    let (mut window_loss, mut window_correct, mut window_seen) = (0.0, 0usize, 0usize);

    for it in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let turn = if augment {
                Some(rotations[augment_rng.gen_range(0..rotations.len())])
            } else {
                None
            };
            batch.push((order[cursor], turn));
            cursor += 1;
        }

        let params = &state.params;
        let results = batch
            .par_iter()
            .map(|&(i, turn)| {
                let class = train_set.classes[i];
                match turn {
                    Some(p) => {
                        let rotated = train_set.volumes[i].rotate_exact(&p)?;
                        model.loss_and_gradient(params, ModelInput::Direct(&rotated), class)
                    }
                    None => {
                        let input = match cache {
                            Some(c) => ModelInput::cached(&train_set.volumes[i], c, i),
                            None => ModelInput::Direct(&train_set.volumes[i]),
                        };
                        model.loss_and_gradient(params, input, class)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = vec![0.0; state.params.len()];
        for (loss, correct, g) in &results {
            window_loss += loss;
            window_correct += *correct as usize;
            window_seen += 1;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let scale = 1.0 / results.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        adam_step(&mut state, &grad, cfg)?;

        if it % cfg.log_every == 0 || it == cfg.iterations {
            let test_acc = match test_set {
                Some(t) => Some(evaluate(model, &state.params, t, None)?.1),
                None => None,
            };
            metrics.push(MetricRow {
                iteration: it,
                train_loss: window_loss / window_seen as f64,
                train_acc: window_correct as f64 / window_seen as f64,
                test_acc,
                wall_ms: start.elapsed().as_millis(),
            });
            window_loss = 0.0;
            window_correct = 0;
            window_seen = 0;
        }
    }
    Ok((state, metrics))
}
