use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catgan::dataset::container::{self, pack_dataset, read_dataset};
use catgan::dataset::manifest::Manifest;
use catgan::dataset::split::{self, SplitReport};
use catgan::dataset::stats::{self, compute_stats};
use catgan::dataset::{mnist, PixelRange, Samples};
use catgan::models::{GanModel, HeadVariant, ModelConfig, VaLoss, Weighting};
use catgan::train::{self, TrainConfig};
use catgan::{checkpoint, grid, sweep, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Semi-supervised categorical GANs: data preparation, training and
/// checkpoint evaluation.
///
/// Set CATGAN_PRECISION=f32 to train and evaluate in single precision
/// (default f64).
#[derive(Parser, Debug)]
#[command(name = "catgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pack annotated face crops into a training file.
    DatasetBuild(BuildArgs),
    /// AU and valence/arousal distribution tables as CSV.
    DatasetStats(StatsArgs),
    /// Identity-closed train/test split of the manifest's videos.
    Split(SplitArgs),
    /// Train a GAN.
    Train(TrainArgs),
    /// Score every checkpoint on a test set and print the best per metric.
    Evaluate(EvaluateArgs),
    /// Write a 4x4 PNG grid of generator samples.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Corpus manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Output packed file.
    #[arg(long)]
    out: PathBuf,
    /// Side length of the stored RGB images.
    #[arg(long, default_value_t = 28)]
    size: u16,
    /// Split report from `split`; with --side, pack only that side.
    #[arg(long, requires = "side")]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    side: Option<Side>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Side {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split report; without it all videos form one group.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Directory for au_stats.csv, va_histogram.csv and au_scatter.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = stats::DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output split report (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = split::DEFAULT_FRACTION)]
    target_fraction: f64,
    #[arg(long, default_value_t = split::TRIALS)]
    trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Head {
    Softmax,
    Au,
    VaMse,
    VaCcc,
    JointMse,
    JointCcc,
    /// Fully connected GAN on flat 28x28 MNIST digits.
    Vanilla,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Head::Au)]
    head: Head,
    /// Number of classes for the softmax head.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Generator learning rate; the discriminator uses half.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// The discriminator trains on multiples of update-rate + 1, the
    /// generator on every other iteration.
    #[arg(long, default_value_t = 5)]
    update_rate: u64,
    /// Label smoothing of the fake target.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 20_000)]
    iterations: u64,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight the joint loss 0.27/0.40/0.33 (VA/AU/real-fake).
    #[arg(long)]
    ponderated: bool,
    /// Generator minimizes -log(1 - p_fake) instead of log p_fake.
    #[arg(long)]
    non_saturating: bool,
    /// Write metric rows every this many iterations.
    #[arg(long, default_value_t = 1)]
    log_every: u64,
    /// Packed training file.
    #[arg(long, required_unless_present = "mnist", conflicts_with = "mnist")]
    data: Option<PathBuf>,
    /// Packed test file.
    #[arg(long, required_unless_present = "mnist", conflicts_with = "mnist")]
    test: Option<PathBuf>,
    #[command(flatten)]
    mnist: MnistArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MnistArgs {
    /// Directory with gzipped MNIST IDX files instead of packed data.
    #[arg(long)]
    mnist: Option<PathBuf>,
    /// Leading MNIST digits used for training; the rest are the test set.
    #[arg(long, default_value_t = 8000)]
    mnist_train: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoints: PathBuf,
    /// Packed test file.
    #[arg(long, required_unless_present = "mnist", conflicts_with = "mnist")]
    data: Option<PathBuf>,
    #[command(flatten)]
    mnist: MnistArgs,
    /// CSV output; defaults to sweep.csv in the checkpoint directory.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Images scored per forward pass.
    #[arg(long, default_value_t = 256)]
    chunk: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples drawn; at most 16 fit the grid.
    #[arg(long, default_value_t = grid::GRID_CELLS)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(catgan::Error),
}

impl From<catgan::Error> for Failure {
    fn from(e: catgan::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(p: &Path) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", p.display())))
    }
}

fn require_dir(p: &Path) -> Outcome {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("no such directory: {}", p.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn precision() -> std::result::Result<Precision, Failure> {
    match std::env::var("CATGAN_PRECISION").as_deref() {
        Err(_) | Ok("f64") => Ok(Precision::F64),
        Ok("f32") => Ok(Precision::F32),
        Ok(other) => Err(usage(format!("CATGAN_PRECISION must be f32 or f64, got {other:?}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Failure::Usage(_) => 1,
                Failure::Runtime(_) => 2,
            })
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::DatasetBuild(a) => dataset_build(a),
        Command::DatasetStats(a) => dataset_stats(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => match precision()? {
            Precision::F32 => train_cmd::<f32>(a),
            Precision::F64 => train_cmd::<f64>(a),
        },
        Command::Evaluate(a) => match precision()? {
            Precision::F32 => evaluate_cmd::<f32>(a),
            Precision::F64 => evaluate_cmd::<f64>(a),
        },
        Command::Generate(a) => match precision()? {
            Precision::F32 => generate_cmd::<f32>(a),
            Precision::F64 => generate_cmd::<f64>(a),
        },
    }
}

fn load_split(path: &Path) -> std::result::Result<SplitReport, Failure> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Runtime(e.into()))
}

fn dataset_build(a: BuildArgs) -> Outcome {
    require_file(&a.manifest)?;
    if let Some(s) = &a.split {
        require_file(s)?;
    }
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let manifest = Manifest::load(&a.manifest)?;
    let only: Option<HashSet<String>> = match (&a.split, a.side) {
        (Some(path), Some(side)) => {
            let r = load_split(path)?;
            Some(match side {
                Side::Train => r.train,
                Side::Test => r.test,
            }
            .into_iter()
            .collect())
        }
        _ => None,
    };
    let data = manifest.build(a.size, only.as_ref())?;
    pack_dataset(&data, &a.out)?;
    println!(
        "packed {} images of {}x{}x3 into {} ({} bytes)",
        data.len(),
        a.size,
        a.size,
        a.out.display(),
        container::HEADER_BYTES + data.payload_bytes()
    );
    Ok(())
}

fn dataset_stats(a: StatsArgs) -> Outcome {
    require_file(&a.manifest)?;
    if let Some(s) = &a.split {
        require_file(s)?;
    }
    if a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let manifest = Manifest::load(&a.manifest)?;
    let sides = match &a.split {
        Some(p) => {
            let r = load_split(p)?;
            vec![("train", r.train.into_iter().collect::<HashSet<_>>()), ("test", r.test.into_iter().collect())]
        }
        None => vec![("all", manifest.videos.iter().map(|v| v.video_id.clone()).collect())],
    };
    let mut groups = Vec::new();
    for (name, ids) in &sides {
        let mut records = Vec::new();
        for v in manifest.videos.iter().filter(|v| ids.contains(&v.video_id)) {
            records.extend(manifest.records(v)?);
        }
        groups.push((*name, records));
    }
    let views: Vec<(&str, &[_])> = groups.iter().map(|(n, r)| (*n, r.as_slice())).collect();
    let report = compute_stats(&views, a.bins);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("au_stats.csv"), report.au_csv())?;
    std::fs::write(a.out.join("va_histogram.csv"), report.histogram_csv())?;
    std::fs::write(a.out.join("au_scatter.csv"), report.scatter_csv())?;
    print!("{}", report.au_csv());
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Outcome {
    require_file(&a.manifest)?;
    if !(split::MIN_FRACTION..=split::MAX_FRACTION).contains(&a.target_fraction) {
        return Err(usage(format!(
            "--target-fraction must be in [{}, {}]",
            split::MIN_FRACTION,
            split::MAX_FRACTION
        )));
    }
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let manifest = Manifest::load(&a.manifest)?;
    let report = split::split_dataset(&manifest.video_meta()?, a.target_fraction, a.seed, a.trials)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report).map_err(catgan::Error::from)?)?;
    println!(
        "train {} videos, test {} videos, {:.1}% of frames in training, max AU gap {:.2} points",
        report.train.len(),
        report.test.len(),
        100.0 * report.train_fraction,
        report.max_gap
    );
    for (k, gap) in report.gaps.iter().enumerate() {
        println!("AU{}\t{:.2}\t{:.2}\t{gap:.2}", catgan::metrics::AU_IDS[k], report.train_au_pct[k], report.test_au_pct[k]);
    }
    Ok(())
}

fn head_variant(head: Head, classes: usize, ponderated: bool) -> std::result::Result<Option<HeadVariant>, Failure> {
    let weighting = if ponderated { Weighting::Ponderated } else { Weighting::Equal };
    if ponderated && !matches!(head, Head::JointMse | Head::JointCcc) {
        return Err(usage("--ponderated applies to joint heads only"));
    }
    Ok(Some(match head {
        Head::Vanilla => return Ok(None),
        Head::Softmax => HeadVariant::Softmax { k: classes },
        Head::Au => HeadVariant::Au,
        Head::VaMse => HeadVariant::Va { loss: VaLoss::Mse },
        Head::VaCcc => HeadVariant::Va { loss: VaLoss::OneMinusCcc },
        Head::JointMse => HeadVariant::Joint {
            va_loss: VaLoss::Mse,
            weighting,
        },
        Head::JointCcc => HeadVariant::Joint {
            va_loss: VaLoss::OneMinusCcc,
            weighting,
        },
    }))
}

/// MNIST prepared for a model: flat `[0,1]` digits for the vanilla GAN,
/// RGB `[-1,1]` otherwise.
fn mnist_sets(dir: &Path, n_train: usize, vanilla: bool) -> std::result::Result<(Samples, Samples), Failure> {
    require_dir(dir)?;
    let data = if vanilla {
        mnist::load(dir, PixelRange::Unit)?.reshaped(vec![784])?
    } else {
        mnist::load(dir, PixelRange::Signed)?.to_rgb()?
    };
    if n_train == 0 || n_train >= data.len() {
        return Err(usage(format!("--mnist-train must be in 1..{}", data.len())));
    }
    Ok(data.split_at(n_train)?)
}

fn packed_samples(path: &Path) -> std::result::Result<Samples, Failure> {
    Ok(read_dataset(path)?.to_samples(PixelRange::Signed)?)
}

fn train_cmd<T: Scalar>(a: TrainArgs) -> Outcome {
    let head = head_variant(a.head, a.classes, a.ponderated)?;
    let vanilla = head.is_none();
    let (train_set, test_set) = match &a.mnist.mnist {
        Some(dir) => {
            if !matches!(a.head, Head::Vanilla | Head::Softmax) {
                return Err(usage("MNIST carries class labels only; use --head softmax or vanilla"));
            }
            mnist_sets(dir, a.mnist.mnist_train, vanilla)?
        }
        None => {
            let (d, t) = (a.data.as_deref().expect("clap"), a.test.as_deref().expect("clap"));
            require_file(d)?;
            require_file(t)?;
            if vanilla {
                return Err(usage("the vanilla GAN trains on --mnist only"));
            }
            (packed_samples(d)?, packed_samples(t)?)
        }
    };
    let mut config = match head {
        None => TrainConfig::vanilla(),
        Some(h) => {
            let size = train_set.shape[0];
            TrainConfig::categorical(h, size)
        }
    };
    if !vanilla {
        config.learning_rate = a.lr;
        config.update_rate = a.update_rate;
        config.alpha = a.alpha;
        config.batch_size = a.batch_size;
    }
    config.iterations = a.iterations;
    config.checkpoint_every = a.checkpoint_every;
    config.seed = a.seed;
    config.non_saturating = a.non_saturating;
    config.log_every = a.log_every;
    config.validate().map_err(|e| usage(e.to_string()))?;
    if let ModelConfig::Categorical { head, .. } = config.model {
        head.validate().map_err(|e| usage(e.to_string()))?;
    }

    let every = (a.iterations / 100).max(1);
    let outcome = train::train::<T>(&config, &train_set, &test_set, &a.out, |log| {
        if log.loss.iteration % every == 0 {
            info!(
                "iteration {} d_loss {:.4} g_loss {:.4}",
                log.loss.iteration, log.loss.d_loss, log.loss.g_loss
            );
        }
    })?;
    for r in &outcome.records {
        println!("checkpoint {} at iteration {}", r.path.display(), r.iteration);
    }
    Ok(())
}

fn evaluate_cmd<T: Scalar>(a: EvaluateArgs) -> Outcome {
    require_dir(&a.checkpoints)?;
    if a.chunk == 0 {
        return Err(usage("--chunk must be positive"));
    }
    let files = sweep::checkpoint_files(&a.checkpoints)?;
    // the data layout depends on the model, so peek at the first readable one
    let probe = files.iter().find_map(|f| checkpoint::load::<T>(f).ok());
    let Some(probe) = probe else {
        return Err(catgan::Error::NoCheckpoints(a.checkpoints.clone()).into());
    };
    let test = match (&a.mnist.mnist, &a.data) {
        (Some(dir), _) => mnist_sets(dir, a.mnist.mnist_train, probe.model.head().is_none())?.1,
        (None, Some(d)) => {
            require_file(d)?;
            packed_samples(d)?
        }
        (None, None) => unreachable!("clap requires one"),
    };
    let result = sweep::evaluate_checkpoints::<T>(&a.checkpoints, &test, a.chunk)?;
    print!("{}", result.table.to_text());
    let csv = a.csv.unwrap_or_else(|| a.checkpoints.join("sweep.csv"));
    std::fs::write(&csv, result.table.to_csv())?;
    for (p, why) in &result.skipped {
        eprintln!("skipped {}: {why}", p.display());
    }
    Ok(())
}

fn generate_cmd<T: Scalar>(a: GenerateArgs) -> Outcome {
    require_file(&a.checkpoint)?;
    if a.count == 0 || a.count > grid::GRID_CELLS {
        return Err(usage(format!("--count must be in 1..={}", grid::GRID_CELLS)));
    }
    let ckpt = checkpoint::load::<T>(&a.checkpoint)?;
    let noise = GanModel::<T>::sample_noise(a.count, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let images = ckpt.model.generate(&noise)?;
    let config = ckpt.model.config;
    grid::save_grid(&a.out, &images, &config.image_shape(), train::pixel_range(&config))?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}
