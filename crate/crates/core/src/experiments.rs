//! Desk-scale experiment harness: accuracy grids over model variants,
//! training-time benchmarks, and the oracle suites run by `lri3d verify`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_split, split_arrays, Dataset, Split};
use crate::error::{Error, Result};
use crate::harmonics::{direction_angles, sh_eval_all, wigner_block, EulerTriple};
use crate::kernels::{
    radial_interpolate, rotate_voxel_kernel, synthesis_imag_residue, synthesize_kernel, HarmonicCoefficients,
    RadialProfileSet, VoxelKernel,
};
use crate::network::{
    count_parameters, evaluate, gradient_check, init_parameters, train, BasisCache, LabeledVolumes, MetricRow, Model,
    ModelConfig, ModelInput, TrainConfig, Variant,
};
use crate::operators::{conv3d, g_lri, s_lri, sse};
use crate::rotations::{build_rotation_set, RotationLabel, SignedPermutation};
use crate::volume::Volume;

/// One row of an experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub model: ModelConfig,
    /// Random right-angle rotations of the training samples.
    pub augment: bool,
}

impl GridEntry {
    pub fn new(model: ModelConfig) -> Self {
        let augment = model.variant.augments();
        let label = if model.variant.uses_rotations() {
            format!("{}(M{})", model.name(), model.rotations.size())
        } else {
            model.name()
        };
        Self { label, model, augment }
    }
}

/// Builds a grid entry from a model name with the desk defaults
/// (two filters, side 7, two classes, no hidden layer).
pub fn grid_entry(name: &str, max_degree: usize, rotations: RotationLabel) -> Result<GridEntry> {
    let (variant, separable) = ModelConfig::parse_model(name)?;
    let cfg = ModelConfig::synthetic(variant, separable, max_degree, rotations);
    cfg.validate()?;
    Ok(GridEntry::new(cfg))
}

/// Z3, SSE-LRI-h, SSE-LRI-h_n and S-LRI-h_n(M24); `compare_ri` adds the
/// augmentation and globally invariant rows.
pub fn default_grid(max_degree: usize, rotations: RotationLabel, compare_ri: bool) -> Result<Vec<GridEntry>> {
    let mut names = vec!["z3", "sse-h", "sse-hn", "s-lri-hn"];
    if compare_ri {
        names.extend(["z3-augm", "g-ri", "s-ri-hn"]);
    }
    names.into_iter().map(|n| grid_entry(n, max_degree, rotations)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: Vec<GridEntry>,
    /// One repetition per seed.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Upper bound on memory spent caching tent responses of the training set.
    pub cache_budget_bytes: usize,
}

impl ExperimentConfig {
    pub fn new(grid: Vec<GridEntry>, repetitions: usize, base_seed: u64, train: TrainConfig) -> Self {
        Self {
            grid,
            seeds: (0..repetitions as u64).map(|r| base_seed + r).collect(),
            train,
            cache_budget_bytes: 2 << 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("empty grid or no repetitions".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("repetition seeds must be distinct".into()));
        }
        for e in &self.grid {
            e.model.validate()?;
        }
        self.train.validate()
    }
}

/// Training and test volumes with 0-based classes.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train_volumes: Vec<Volume>,
    pub train_classes: Vec<usize>,
    pub test_volumes: Vec<Volume>,
    pub test_classes: Vec<usize>,
}

impl ExperimentData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let (train_volumes, train_classes) = split_arrays(&ds.train);
        let (test_volumes, test_classes) = split_arrays(&ds.test);
        Self {
            train_volumes,
            train_classes,
            test_volumes,
            test_classes,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (train_volumes, train_classes) = read_split(dir, Split::Train)?;
        let (test_volumes, test_classes) = read_split(dir, Split::Test)?;
        Ok(Self {
            train_volumes,
            train_classes,
            test_volumes,
            test_classes,
        })
    }

    pub fn train_set(&self) -> Result<LabeledVolumes<'_>> {
        LabeledVolumes::new(&self.train_volumes, &self.train_classes)
    }

    pub fn test_set(&self) -> Result<LabeledVolumes<'_>> {
        LabeledVolumes::new(&self.test_volumes, &self.test_classes)
    }
}

/// One trained repetition of one grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub parameters: usize,
    pub test_accuracy: f64,
    pub metrics: Vec<MetricRow>,
    pub wall_ms: u128,
}

/// Aggregate over the repetitions of one grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub model: ModelConfig,
    pub parameters: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single repetition).
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn uses_cache(entry: &GridEntry) -> bool {
    entry.model.variant.has_profiles() && !entry.augment
}

/// Shared tent caches, one per `(side, stride)`, sized for the largest degree
/// in the grid. Entries whose cache would exceed the budget train directly.
fn build_caches(cfg: &ExperimentConfig, volumes: &[Volume]) -> Result<BTreeMap<(usize, usize), BasisCache>> {
    let mut wanted: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in cfg.grid.iter().filter(|e| uses_cache(e)) {
        let n = wanted.entry((e.model.side, e.model.stride)).or_insert(0);
        *n = (*n).max(e.model.max_degree);
    }
    let mut out = BTreeMap::new();
    let mut spent = 0usize;
    for ((side, stride), n) in wanted {
        let bytes = BasisCache::bytes_needed(side, stride, n, volumes[0].shape(), volumes.len())?;
        if spent + bytes > cfg.cache_budget_bytes {
            continue;
        }
        spent += bytes;
        out.insert((side, stride), BasisCache::build(side, stride, n, volumes)?);
    }
    Ok(out)
}

/// Trains every grid entry once per seed and evaluates on the test split.
/// `on_cell` is called as cells finish (from worker threads).
pub fn run_grid(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    on_cell: &(dyn Fn(&CellResult) + Sync),
) -> Result<(Vec<GridRow>, Vec<CellResult>)> {
    cfg.validate()?;
    let train_set = data.train_set()?;
    let test_set = data.test_set()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidConfig("empty training or test split".into()));
    }
    let caches = build_caches(cfg, &data.train_volumes)?;
    let models = cfg
        .grid
        .iter()
        .map(|e| Model::new(e.model.clone()))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, u64)> = (0..cfg.grid.len())
        .flat_map(|g| cfg.seeds.iter().map(move |&s| (g, s)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(g, seed)| {
            let entry = &cfg.grid[g];
            let cache = if uses_cache(entry) {
                caches.get(&(entry.model.side, entry.model.stride))
            } else {
                None
            };
            let tc = TrainConfig {
                seed,
                augment: entry.augment,
                ..cfg.train.clone()
            };
            let start = Instant::now();
            let (state, metrics) = train(&models[g], train_set, Some(test_set), cache, &tc)?;
            let test_accuracy = match metrics.last().and_then(|m| m.test_acc) {
                Some(a) => a,
                None => evaluate(&models[g], &state.params, test_set, None)?.1,
            };
            let cell = CellResult {
                label: entry.label.clone(),
                seed,
                parameters: models[g].parameter_count(),
                test_accuracy,
                metrics,
                wall_ms: start.elapsed().as_millis(),
            };
            on_cell(&cell);
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = cfg
        .grid
        .iter()
        .map(|e| {
            let accuracies: Vec<f64> = results
                .iter()
                .filter(|c| c.label == e.label)
                .map(|c| c.test_accuracy)
                .collect();
            let (mean, std) = mean_std(&accuracies);
            GridRow {
                label: e.label.clone(),
                model: e.model.clone(),
                parameters: count_parameters(&e.model),
                accuracies,
                mean,
                std,
            }
        })
        .collect();
    Ok((rows, results))
}

fn degree_column(cfg: &ModelConfig) -> String {
    if cfg.variant.has_profiles() {
        cfg.max_degree.to_string()
    } else {
        "-".into()
    }
}

fn rotation_column(cfg: &ModelConfig) -> String {
    if cfg.variant.uses_rotations() {
        cfg.rotations.size().to_string()
    } else {
        "-".into()
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("model,N,M,filters,params,mean_acc,std_acc,accuracies\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4},{}",
            r.label,
            degree_column(&r.model),
            rotation_column(&r.model),
            r.model.filters,
            r.parameters,
            r.mean,
            r.std,
            accs.join(";")
        );
    }
    out
}

/// Aligned text table, accuracies in percent.
pub fn grid_text(rows: &[GridRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>2}  {:>2}  {:>9}  {:>8}  {}\n",
        "model", "N", "M", "# filters", "# param.", "accuracy"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>2}  {:>2}  {:>9}  {:>8}  {:.1} ± {:.1}",
            r.label,
            degree_column(&r.model),
            rotation_column(&r.model),
            r.model.filters,
            r.parameters,
            100.0 * r.mean,
            100.0 * r.std
        );
    }
    out
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("iteration,train_loss,train_acc,test_acc,wall_ms\n");
    for m in rows {
        let test = m.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            m.iteration, m.train_loss, m.train_acc, test, m.wall_ms
        );
    }
    out
}

/// Where a benchmark spends its time per training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchPath {
    /// As training runs: profile variants read cached tent responses.
    Training,
    /// Every step convolves from scratch.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub side: usize,
    pub degrees: Vec<usize>,
    pub rotations: RotationLabel,
    pub iterations: usize,
    pub runs: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub path: BenchPath,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            side: 9,
            degrees: vec![0, 3, 6],
            rotations: RotationLabel::M24,
            iterations: 200,
            runs: 3,
            samples: 16,
            batch_size: 8,
            seed: 0,
            path: BenchPath::Training,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub max_degree: Option<usize>,
    pub parameters: usize,
    /// Median wall time of one run, scaled to 1000 iterations.
    pub seconds_per_1000: f64,
    pub ratio_to_z3: f64,
    /// One-off cost of building the shared tent cache, when used.
    pub cache_seconds: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// The timing table: Z3, then S-LRI-h, S-LRI-h_n, SSE-LRI-h and
/// SSE-LRI-h_n at each degree, all on the same volumes.
pub fn bench_models(cfg: &BenchConfig) -> Result<Vec<ModelConfig>> {
    let mut out = Vec::new();
    let mut z3 = ModelConfig::synthetic(Variant::Z3, false, 0, cfg.rotations);
    z3.side = cfg.side;
    out.push(z3);
    for (variant, separable) in [
        (Variant::SLri, true),
        (Variant::SLri, false),
        (Variant::Sse, true),
        (Variant::Sse, false),
    ] {
        for &n in &cfg.degrees {
            let mut m = ModelConfig::synthetic(variant, separable, n, cfg.rotations);
            m.side = cfg.side;
            m.validate()?;
            out.push(m);
        }
    }
    Ok(out)
}

pub fn run_bench(cfg: &BenchConfig, volumes: &[Volume], classes: &[usize]) -> Result<Vec<BenchRow>> {
    if cfg.runs == 0 || cfg.iterations == 0 || cfg.samples == 0 {
        return Err(Error::InvalidConfig("bench needs runs, iterations and samples".into()));
    }
    let count = cfg.samples.min(volumes.len());
    let data = LabeledVolumes::new(&volumes[..count], &classes[..count])?;
    let models = bench_models(cfg)?;
    let (cache, cache_seconds) = match cfg.path {
        BenchPath::Training => {
            let n = models
                .iter()
                .filter(|m| m.variant.has_profiles())
                .map(|m| m.max_degree)
                .max()
                .unwrap_or(0);
            let start = Instant::now();
            let c = BasisCache::build(cfg.side, 1, n, data.volumes)?;
            (Some(c), Some(start.elapsed().as_secs_f64()))
        }
        BenchPath::Direct => (None, None),
    };
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        iterations: cfg.iterations,
        log_every: cfg.iterations,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut rows = Vec::new();
    let mut z3_time = f64::NAN;
    for m in models {
        let model = Model::new(m.clone())?;
        let use_cache = if m.variant.has_profiles() { cache.as_ref() } else { None };
        let times = (0..cfg.runs)
            .map(|_| {
                let start = Instant::now();
                train(&model, data, None, use_cache, &tc)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect::<Result<Vec<_>>>()?;
        let seconds = median(times) * 1000.0 / cfg.iterations as f64;
        if m.variant == Variant::Z3 {
            z3_time = seconds;
        }
        rows.push(BenchRow {
            label: m.name(),
            max_degree: m.variant.has_profiles().then_some(m.max_degree),
            parameters: count_parameters(&m),
            seconds_per_1000: seconds,
            ratio_to_z3: seconds / z3_time,
            cache_seconds: if use_cache.is_some() { cache_seconds } else { None },
        });
    }
    Ok(rows)
}

pub fn bench_text(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<12}  {:>2}  {:>8}  {:>12}  {:>8}  {}\n",
        "model", "N", "# param.", "s/1000 it", "vs Z3", "cache build (s)"
    );
    for r in rows {
        let n = r.max_degree.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
        let cache = r.cache_seconds.map(|s| format!("{s:.1}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<12}  {:>2}  {:>8}  {:>12.2}  {:>8.2}  {}",
            r.label, n, r.parameters, r.seconds_per_1000, r.ratio_to_z3, cache
        );
    }
    out
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("model,N,params,seconds_per_1000,ratio_to_z3,cache_seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{}",
            r.label,
            r.max_degree.map(|n| n.to_string()).unwrap_or_default(),
            r.parameters,
            r.seconds_per_1000,
            r.ratio_to_z3,
            r.cache_seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        );
    }
    out
}

/// Source of steering matrices for the verification suites; the corrupted
/// form multiplies one entry by a phase so that a broken implementation
/// can be demonstrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WignerSource {
    Exact,
    CorruptedPhase { degree: usize, m: i64, mp: i64, phase: f64 },
}

impl WignerSource {
    pub fn block(&self, n: usize, rot: &EulerTriple) -> DMatrix<Complex64> {
        let mut d = wigner_block(n, rot).entries;
        if let WignerSource::CorruptedPhase { degree, m, mp, phase } = *self {
            if degree == n && m.unsigned_abs() as usize <= n && mp.unsigned_abs() as usize <= n {
                let (r, c) = ((m + n as i64) as usize, (mp + n as i64) as usize);
                d[(r, c)] *= Complex64::from_polar(1.0, phase);
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_euler(rng: &mut impl Rng) -> EulerTriple {
    let tau = std::f64::consts::TAU;
    EulerTriple::new(rng.gen_range(0.0..tau), rng.gen_range(-1.0f64..=1.0).acos(), rng.gen_range(0.0..tau))
}

fn random_volume(shape: [usize; 3], rng: &mut impl Rng) -> Volume {
    Volume::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn m24_permutations() -> Vec<SignedPermutation> {
    build_rotation_set(RotationLabel::M24)
        .matrices()
        .iter()
        .map(|m| SignedPermutation::from_matrix(m).expect("right-angle rotation"))
        .collect()
}

/// `(identity error, unitarity error)` over degrees `0..=max_degree`:
/// `Y_n(R p) = D Y_n(p)` at random points and `D D^H = I`.
pub fn wigner_errors(source: WignerSource, max_degree: usize, rotations: usize, points: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vector3<f64>> = (0..points).map(|_| random_unit(&mut rng)).collect();
    let (mut ident, mut unit) = (0.0f64, 0.0f64);
    for _ in 0..rotations {
        let rot = random_euler(&mut rng);
        let r = rot.to_matrix();
        let blocks: Vec<DMatrix<Complex64>> = (0..=max_degree).map(|n| source.block(n, &rot)).collect();
        for (n, d) in blocks.iter().enumerate() {
            let prod = d * d.adjoint();
            let eye = DMatrix::<Complex64>::identity(2 * n + 1, 2 * n + 1);
            unit = unit.max((prod - eye).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        for p in &pts {
            let (t0, p0) = direction_angles(p);
            let (t1, p1) = direction_angles(&(r * p));
            let y0 = sh_eval_all(max_degree, t0, p0);
            let y1 = sh_eval_all(max_degree, t1, p1);
            for (n, d) in blocks.iter().enumerate() {
                let base = n * n;
                for row in 0..2 * n + 1 {
                    let rhs: Complex64 = (0..2 * n + 1).map(|c| d[(row, c)] * y0[base + c]).sum();
                    ident = ident.max((y1[base + row] - rhs).norm());
                }
            }
        }
    }
    (ident, unit)
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteReport {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn suite_wigner(source: WignerSource) -> SuiteReport {
    timed("wigner", || {
        let (ident, unit) = wigner_errors(source, 6, 50, 200, 1);
        Ok((
            ident < 1e-8 && unit < 1e-10,
            format!("identity {ident:.2e} (< 1e-8), unitarity {unit:.2e} (< 1e-10)"),
        ))
    })
}

pub fn suite_realness() -> SuiteReport {
    timed("realness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let n = i % 7;
            let sep = i % 2 == 0;
            let c = HarmonicCoefficients::random(n, 1.0, &mut rng);
            let h = RadialProfileSet::random(9, n, sep, &mut rng)?;
            worst = worst.max(synthesis_imag_residue(&c, &h)?);
        }
        Ok((worst < 1e-12, format!("max |imag| {worst:.2e} over 100 draws (< 1e-12)")))
    })
}

/// Largest deviation from `conv(R I) = R conv(I)` over right-angle rotations.
fn plain_equivariance_gap(input: &Volume, kernel: &Volume) -> Result<f64> {
    let out = conv3d(input, kernel, 1)?;
    let mut worst = 0.0f64;
    for p in m24_permutations() {
        let got = conv3d(&input.rotate_exact(&p)?, kernel, 1)?;
        worst = worst.max(got.max_abs_diff(&out.rotate_exact(&p)?));
    }
    Ok(worst)
}

pub fn suite_isotropy() -> SuiteReport {
    timed("isotropy", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_volume([12; 3], &mut rng);
        let profile: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let iso = Volume::from_fn([9; 3], |x, y, z| {
            let d = |a: usize| a as f64 - 4.0;
            radial_interpolate(&profile, (d(x).powi(2) + d(y).powi(2) + d(z).powi(2)).sqrt())
        });
        let iso_gap = plain_equivariance_gap(&input, &iso)?;
        // any generic directional kernel should break it; search a few
        let mut found = None;
        for attempt in 0..10 {
            let kernel = random_volume([5; 3], &mut rng);
            let gap = plain_equivariance_gap(&input, &kernel)?;
            if gap > 1e-6 {
                found = Some((attempt, gap));
                break;
            }
        }
        Ok(match found {
            Some((attempt, gap)) => (
                iso_gap < 1e-12,
                format!("isotropic gap {iso_gap:.2e} (< 1e-12); directional kernel #{attempt} gap {gap:.2e}"),
            ),
            None => (false, "no directional kernel violated equivariance".into()),
        })
    })
}

pub fn suite_equivariance() -> SuiteReport {
    timed("equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_volume([16; 3], &mut rng);
        let set = build_rotation_set(RotationLabel::M24);
        let kernel = VoxelKernel::free(random_volume([7; 3], &mut rng))?;
        let c = HarmonicCoefficients::random(3, 0.5, &mut rng);
        let h = RadialProfileSet::random(7, 3, false, &mut rng)?;
        let g_ref = g_lri(&input, &kernel, &set, 1)?;
        let s_ref = s_lri(&input, &c, &h, &set, 1)?;
        let e_ref = (0..=3).map(|n| Ok(sse(&input, &h, n, 1)?.volume)).collect::<Result<Vec<_>>>()?;
        let (mut g_err, mut s_err, mut e_err) = (0.0f64, 0.0f64, 0.0f64);
        for p in m24_permutations() {
            let turned = input.rotate_exact(&p)?;
            g_err = g_err.max(g_lri(&turned, &kernel, &set, 1)?.max_abs_diff(&g_ref.rotate_exact(&p)?));
            s_err = s_err.max(s_lri(&turned, &c, &h, &set, 1)?.max_abs_diff(&s_ref.rotate_exact(&p)?));
            for (n, e) in e_ref.iter().enumerate() {
                e_err = e_err.max(sse(&turned, &h, n, 1)?.volume.max_abs_diff(&e.rotate_exact(&p)?));
            }
        }
        let worst = g_err.max(s_err).max(e_err);
        Ok((
            worst < 1e-12,
            format!("g_lri {g_err:.2e}, s_lri {s_err:.2e}, sse {e_err:.2e} (< 1e-12)"),
        ))
    })
}

/// Coefficients of `f(R .)` computed from the given steering matrices.
fn steer_with(source: WignerSource, coeffs: &HarmonicCoefficients, rot: &EulerTriple) -> Result<HarmonicCoefficients> {
    let degrees: Vec<Vec<Complex64>> = (0..=coeffs.max_degree())
        .map(|n| {
            let d = source.block(n, rot);
            let c = coeffs.degree_complex(n);
            (0..2 * n + 1)
                .map(|col| (0..2 * n + 1).map(|row| d[(row, col)] * c[row]).sum())
                .collect()
        })
        .collect();
    HarmonicCoefficients::from_complex(&degrees)
}

/// Worst relative L2 gap between kernels synthesized from steered
/// coefficients and voxel rotations of the unsteered kernel, over M24.
pub fn steering_gap(source: WignerSource, max_degree: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = HarmonicCoefficients::random(max_degree, 1.0, &mut rng);
    let h = RadialProfileSet::random(9, max_degree, false, &mut rng)?;
    let kernel = synthesize_kernel(&c, &h)?;
    let mut worst = 0.0f64;
    for rot in &build_rotation_set(RotationLabel::M24).triples {
        let steered = synthesize_kernel(&steer_with(source, &c, rot)?, &h)?;
        let rotated = rotate_voxel_kernel(&kernel, rot);
        let diff = steered.volume.zip_map(&rotated.volume, |a, b| a - b)?;
        worst = worst.max(diff.norm() / rotated.volume.norm());
    }
    Ok(worst)
}

pub fn suite_steering(source: WignerSource) -> SuiteReport {
    timed("steering", || {
        let worst = (1..=6)
            .map(|n| steering_gap(source, n, 5 + n as u64))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((worst < 1e-10, format!("steered vs rotated kernels, rel. L2 {worst:.2e} (< 1e-10)")))
    })
}

/// Seeded initialization with biases nudged off zero so that ReLU masks
/// are generic.
pub fn generic_parameters(cfg: &ModelConfig, seed: u64) -> Result<Vec<f64>> {
    let model_layout = crate::network::Layout::new(cfg);
    let mut params = init_parameters(cfg, seed)?.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    for i in model_layout
        .bias
        .clone()
        .chain(model_layout.hidden_b.clone())
        .chain(model_layout.out_b.clone())
    {
        params[i] = rng.gen_range(-0.05..0.05);
    }
    Ok(params)
}

pub const ALL_MODELS: [&str; 10] = [
    "z3", "z3-augm", "g-lri", "g-ri", "s-lri-h", "s-lri-hn", "s-ri-h", "s-ri-hn", "sse-h", "sse-hn",
];

/// Worst central-difference relative error per model, on a random `12^3` input.
pub fn gradient_errors(step: f64) -> Result<Vec<(String, f64, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = Volume::from_fn([12; 3], |_, _, _| rng.gen_range(0.0..1.0));
    ALL_MODELS
        .par_iter()
        .map(|name| {
            let (v, sep) = ModelConfig::parse_model(name)?;
            let mut cfg = ModelConfig::synthetic(v, sep, 3, RotationLabel::M24);
            cfg.hidden = 3;
            let params = generic_parameters(&cfg, 7)?;
            let model = Model::new(cfg)?;
            let report = gradient_check(&model, &params, ModelInput::Direct(&input), 1, step)?;
            let worst = report.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
            let unchecked = report.iter().filter(|c| c.checked == 0).count();
            Ok((name.to_string(), worst, unchecked))
        })
        .collect()
}

pub fn suite_gradients() -> SuiteReport {
    timed("gradients", || {
        let errs = gradient_errors(1e-3)?;
        let passed = errs.iter().all(|(_, e, u)| *e < 1e-4 && *u == 0);
        let worst = errs
            .iter()
            .map(|(n, e, _)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((passed, format!("max rel. err per model (< 1e-4): {worst}")))
    })
}

/// Expected trainable parameter counts of reference configurations
/// (two filters, side 7, M24, two classes).
pub fn parameter_fixture() -> Vec<(&'static str, usize, usize)> {
    vec![
        ("s-lri-h", 3, 54),
        ("s-lri-hn", 3, 96),
        ("sse-h", 3, 40),
        ("sse-hn", 3, 82),
        ("z3", 3, 694),
        ("g-lri", 3, 694),
        ("g-ri", 3, 694),
        ("s-ri-hn", 3, 94),
        ("s-lri-h", 0, 24),
        ("s-lri-h", 6, 120),
        ("s-lri-hn", 6, 204),
        ("sse-h", 0, 22),
        ("sse-h", 6, 58),
        ("sse-hn", 6, 142),
    ]
}

pub fn suite_counts() -> SuiteReport {
    timed("parameter counts", || {
        let mut bad = Vec::new();
        for (name, n, expected) in parameter_fixture() {
            let (v, sep) = ModelConfig::parse_model(name)?;
            let got = count_parameters(&ModelConfig::synthetic(v, sep, n, RotationLabel::M24));
            if got != expected {
                bad.push(format!("{name} N={n}: {got} != {expected}"));
            }
        }
        Ok(if bad.is_empty() {
            (true, format!("{} configurations match", parameter_fixture().len()))
        } else {
            (false, bad.join("; "))
        })
    })
}

pub fn verify_all(source: WignerSource) -> Vec<SuiteReport> {
    vec![
        suite_wigner(source),
        suite_realness(),
        suite_isotropy(),
        suite_equivariance(),
        suite_steering(source),
        suite_gradients(),
        suite_counts(),
    ]
}
