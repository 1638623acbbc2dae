use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lri3d::dataset::{generate_dataset, write_dataset, DatasetConfig, Split};
use lri3d::experiments::{
    bench_csv, bench_text, default_grid, grid_csv, grid_entry, grid_text, metrics_csv, run_bench, run_grid,
    verify_all, BenchConfig, BenchPath, ExperimentConfig, ExperimentData, WignerSource,
};
use lri3d::network::{
    evaluate, load_checkpoint, save_checkpoint, train, BasisCache, Checkpoint, LabeledVolumes, Model, ModelConfig,
    TrainConfig,
};
use lri3d::rotations::RotationLabel;

#[derive(Parser)]
#[command(name = "lri3d", version, about = "Locally rotation invariant 3D CNNs on synthetic textures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-class synthetic texture dataset.
    GenDataset(GenArgs),
    /// Train one model; writes metrics.csv and model.ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train a grid of variants with repetitions and tabulate accuracy.
    Table(TableArgs),
    /// Time training iterations per variant.
    Bench(BenchArgs),
    /// Run the oracle suites; nonzero exit on any failure.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "train", default_value_t = 200)]
    n_train: usize,
    #[arg(long = "test", default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

/// Where training data comes from: a generated directory, or generated in
/// memory from a seed.
#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by gen-dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for an in-memory dataset when --data is absent.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 200)]
    train_size: usize,
    #[arg(long, default_value_t = 100)]
    test_size: usize,
}

impl DataArgs {
    fn load(&self) -> Result<ExperimentData> {
        match &self.data {
            Some(dir) => ExperimentData::load(dir).with_context(|| format!("reading dataset {}", dir.display())),
            None => {
                let ds = generate_dataset(DatasetConfig {
                    seed: self.data_seed,
                    n_train: self.train_size,
                    n_test: self.test_size,
                })?;
                Ok(ExperimentData::from_dataset(&ds))
            }
        }
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64, augment: bool) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            iterations: self.iterations,
            learning_rate: self.lr,
            seed,
            augment,
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// z3, z3-augm, g-lri, g-ri, s-lri-h, s-lri-hn, s-ri-h, s-ri-hn, sse-h, sse-hn
    #[arg(long, default_value = "s-lri-hn")]
    model: String,
    /// Maximal spherical harmonic degree.
    #[arg(long = "N", default_value_t = 3)]
    max_degree: usize,
    /// Number of sampled orientations (1, 4, 24 or 72).
    #[arg(long = "M", default_value_t = 24)]
    rotations: usize,
    #[arg(long, default_value_t = 2)]
    filters: usize,
    /// Kernel side.
    #[arg(long = "c", default_value_t = 7)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Width of an optional hidden fully connected layer.
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random right-angle rotations of training samples.
    #[arg(long)]
    augment: bool,
    /// Convolve from scratch every step instead of caching tent responses.
    #[arg(long)]
    no_cache: bool,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

impl TrainArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        let (variant, separable) = ModelConfig::parse_model(&self.model)?;
        let cfg = ModelConfig {
            variant,
            separable,
            max_degree: self.max_degree,
            rotations: RotationLabel::from_size(self.rotations)?,
            filters: self.filters,
            side: self.side,
            stride: self.stride,
            classes: 2,
            hidden: self.hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct TableArgs {
    /// Comma-separated model names; defaults to Z3, SSE-LRI-h, SSE-LRI-h_n, S-LRI-h_n.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Add Z3 with augmentation, G-RI and S-RI-h_n rows.
    #[arg(long, value_enum)]
    compare: Option<Compare>,
    #[arg(long = "N", default_value_t = 3)]
    max_degree: usize,
    #[arg(long = "M", default_value_t = 24)]
    rotations: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Seed of the first repetition; later ones count up from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound (MiB) on memory used to cache training responses.
    #[arg(long, default_value_t = 2048)]
    cache_mb: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "table")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compare {
    Ri,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "c", default_value_t = 9)]
    side: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,3,6")]
    degrees: Vec<usize>,
    #[arg(long = "M", default_value_t = 24)]
    rotations: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PathArg::Training)]
    path: PathArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Training,
    Direct,
}

#[derive(Args)]
struct VerifyArgs {
    /// Multiply the degree-2 (m, m') = (1, 1) steering entry by this phase,
    /// to see the suites catch a broken implementation.
    #[arg(long)]
    corrupt_wigner_phase: Option<f64>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_dataset(args: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        seed: args.seed,
        n_train: args.n_train,
        n_test: args.n_test,
    };
    let ds = generate_dataset(cfg)?;
    write_dataset(&args.out, &ds).with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} training and {} test volumes to {}",
        cfg.n_train,
        cfg.n_test,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.model_config()?;
    let model = Model::new(cfg.clone())?;
    println!("{cfg}: {} trainable parameters", model.parameter_count());
    let data = args.data.load()?;
    let augment = args.augment || cfg.variant.augments();
    let cache = if cfg.variant.has_profiles() && !augment && !args.no_cache {
        Some(BasisCache::build(cfg.side, cfg.stride, cfg.max_degree, &data.train_volumes)?)
    } else {
        None
    };
    let tc = args.optim.config(args.seed, args.augment);
    let test = if data.test_volumes.is_empty() { None } else { Some(data.test_set()?) };
    let (state, metrics) = train(&model, data.train_set()?, test, cache.as_ref(), &tc)?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.csv"), &metrics_csv(&metrics))?;
    save_checkpoint(
        &args.out.join("model.ckpt"),
        &Checkpoint {
            config: cfg,
            step: state.step,
            seed: args.seed,
            params: state.params,
        },
    )?;
    if let Some(last) = metrics.last() {
        let test = last.test_acc.map(|a| format!("{:.3}", a)).unwrap_or_else(|| "-".into());
        println!(
            "iteration {}: train loss {:.4}, train acc {:.3}, test acc {}",
            last.iteration, last.train_loss, last.train_acc, test
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let model = Model::new(ckpt.config.clone())?;
    let data = args.data.load()?;
    let (volumes, classes, split) = match args.split {
        SplitArg::Train => (&data.train_volumes, &data.train_classes, Split::Train),
        SplitArg::Test => (&data.test_volumes, &data.test_classes, Split::Test),
    };
    let (loss, acc) = evaluate(&model, &ckpt.params, LabeledVolumes::new(volumes, classes)?, None)?;
    println!(
        "{} after {} steps on {:?} ({} volumes): loss {:.4}, accuracy {:.3}",
        ckpt.config,
        ckpt.step,
        split,
        volumes.len(),
        loss,
        acc
    );
    Ok(())
}

fn cmd_table(args: TableArgs) -> Result<()> {
    let rotations = RotationLabel::from_size(args.rotations)?;
    let grid = if args.models.is_empty() {
        default_grid(args.max_degree, rotations, args.compare.is_some())?
    } else {
        let mut g = args
            .models
            .iter()
            .map(|m| grid_entry(m, args.max_degree, rotations))
            .collect::<lri3d::Result<Vec<_>>>()?;
        if args.compare.is_some() {
            for m in ["z3-augm", "g-ri", "s-ri-hn"] {
                let e = grid_entry(m, args.max_degree, rotations)?;
                if !g.iter().any(|x| x.label == e.label) {
                    g.push(e);
                }
            }
        }
        g
    };
    let mut cfg = ExperimentConfig::new(grid, args.reps, args.seed, args.optim.config(args.seed, false));
    cfg.cache_budget_bytes = args.cache_mb << 20;
    let data = args.data.load()?;
    create_dir(&args.out)?;
    let failures = Mutex::new(Vec::new());
    let (rows, cells) = run_grid(&cfg, &data, &|cell| {
        eprintln!(
            "{} seed {}: test acc {:.3} ({:.1} s)",
            cell.label,
            cell.seed,
            cell.test_accuracy,
            cell.wall_ms as f64 / 1e3
        );
        let name = format!("{}_seed{}.csv", sanitize(&cell.label), cell.seed);
        if let Err(e) = write(&args.out.join(name), &metrics_csv(&cell.metrics)) {
            failures.lock().expect("unpoisoned").push(e.to_string());
        }
    })?;
    if let Some(e) = failures.into_inner().expect("unpoisoned").first() {
        bail!("{e}");
    }
    write(&args.out.join("table.csv"), &grid_csv(&rows))?;
    let text = grid_text(&rows);
    write(&args.out.join("table.txt"), &text)?;
    write(&args.out.join("cells.json"), &serde_json::to_string_pretty(&cells)?)?;
    print!("{text}");
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        side: args.side,
        degrees: args.degrees,
        rotations: RotationLabel::from_size(args.rotations)?,
        iterations: args.iterations,
        runs: args.runs,
        samples: args.samples,
        batch_size: args.batch,
        seed: args.seed,
        path: match args.path {
            PathArg::Training => BenchPath::Training,
            PathArg::Direct => BenchPath::Direct,
        },
    };
    let ds = generate_dataset(DatasetConfig {
        seed: args.seed,
        n_train: cfg.samples,
        n_test: 0,
    })?;
    let data = ExperimentData::from_dataset(&ds);
    let rows = run_bench(&cfg, &data.train_volumes, &data.train_classes)?;
    print!("{}", bench_text(&rows));
    if let Some(out) = args.out {
        create_dir(&out)?;
        write(&out.join("bench.csv"), &bench_csv(&rows))?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let source = match args.corrupt_wigner_phase {
        Some(phase) => WignerSource::CorruptedPhase {
            degree: 2,
            m: 1,
            mp: 1,
            phase,
        },
        None => WignerSource::Exact,
    };
    let reports = verify_all(source);
    for r in &reports {
        println!(
            "{:<18} {:<4} {:>6.1}s  {}",
            r.name,
            if r.passed { "ok" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenDataset(a) => gen_dataset(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Table(a) => cmd_table(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    lri3d::configure_threads();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
