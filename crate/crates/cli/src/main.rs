use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dinoyolo::detector::{build_model, param_report, plan_model, DetectionModel};
use dinoyolo::evaluation::{export_feature_maps, latency_bench, FeatureSite, DEFAULT_RUNS, DEFAULT_WARMUP};
use dinoyolo::harness::{
    gen_synthetic_dataset, load_image, run_ablation, write_dataset, write_history, AblationPlan, DatasetSpec, RunConfig,
    SyntheticSpec,
};
use dinoyolo::injection::IntegrationStrategy;
use dinoyolo::training::{evaluate, load_checkpoint, save_checkpoint, train, EpochRecord, TrainObserver};

#[derive(Parser)]
#[command(name = "dinoyolo", version, about = "Train, evaluate and ablate frozen-teacher feature injection detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded synthetic shapes dataset to images/ and labels/.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and per-epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Time single-image inference of a checkpoint.
    Bench(BenchArgs),
    /// Count total, trainable and frozen parameters.
    Params(ParamsArgs),
    /// Run a scale x teacher x strategy matrix and write the results CSV.
    Ablate(AblateArgs),
    /// Write one activation map per channel as PGM (and optionally PPM).
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file holding a synthetic dataset spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override keys of a run configuration file.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    strategy: Option<IntegrationStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Read images/ and labels/ from this directory instead of generating data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.scale {
            run.scale = v.clone();
        }
        if let Some(v) = &self.teacher {
            run.teacher = v.clone();
        }
        if let Some(v) = self.strategy {
            run.strategy = v;
        }
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.epochs {
            run.epochs = v;
        }
        if let Some(v) = self.lr {
            run.lr = v;
        }
        if let Some(v) = self.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = self.val_samples {
            run.val_samples = v;
        }
        if let Some(dir) = &self.data_dir {
            run.dataset = DatasetSpec::Directory { images: dir.join("images"), labels: dir.join("labels") };
        }
        if let Some(n) = self.samples {
            match &mut run.dataset {
                DatasetSpec::Synthetic(spec) => spec.samples = n,
                DatasetSpec::Directory { .. } => bail!("--samples only applies to synthetic data"),
            }
        }
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint written after training.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and validation CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supplies the dataset, split and decoding settings.
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
}

#[derive(Args)]
struct ParamsArgs {
    /// Count the parameters stored in a checkpoint instead.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON ablation plan; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated scale presets.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<String>>,
    /// Comma-separated teacher presets.
    #[arg(long, value_delimiter = ',')]
    teachers: Option<Vec<String>>,
    /// Comma-separated strategies; must include none.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    strategies: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One of P0-out, P3-pre, P3-post, P4, P5.
    #[arg(long)]
    site: FeatureSite,
    #[arg(long)]
    out: PathBuf,
    /// Also write pseudocolor PPMs.
    #[arg(long)]
    colormap: bool,
}

struct EpochLog(bool);

impl TrainObserver for EpochLog {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if self.0 {
            let map = r.map50.map_or(String::from("-"), |m| format!("{m:.4}"));
            eprintln!("epoch {:>4}  loss {:.4}  map50 {map}", r.epoch, r.loss.total);
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(path: &Path) -> Result<DetectionModel> {
    let (model, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SyntheticSpec::default(),
    };
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.samples = args.samples.unwrap_or(spec.samples);
    spec.image_size = args.image_size.unwrap_or(spec.image_size);
    spec.num_classes = args.classes.unwrap_or(spec.num_classes);
    let data = gen_synthetic_dataset(&spec)?;
    write_dataset(&args.out, &data, spec.image_size)?;
    println!("wrote {} samples to {} ({} redraws)", data.images.len(), args.out.display(), data.redraws);
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let run = args.run.resolve()?;
    let (train_set, val_set) = run.load_split()?;
    let (mut model, _) = build_model(&run.model())?;
    let outcome = train(&mut model, &train_set, Some(&val_set), &run.train(), &mut EpochLog(args.verbose))?;
    save_checkpoint(&model, outcome.steps, &args.out)?;
    if let Some(path) = &args.history {
        write_history(path, &outcome.history)?;
    }
    print_json(outcome.history.last().context("training ran zero epochs")?)
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let model = load(&args.checkpoint)?;
    let mut run = args.run.resolve()?;
    run.input_size = model.config().input_size;
    run.num_classes = model.config().num_classes;
    let (_, val_set) = run.load_split()?;
    match evaluate(&model, &val_set, &run.eval())? {
        Some(summary) => print_json(&summary),
        None => bail!("validation split has no ground-truth boxes"),
    }
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let model = load(&args.checkpoint)?;
    let report = latency_bench(&model, model.config().input_size, args.warmup, args.runs)?;
    print_json(&report)
}

fn params_cmd(args: ParamsArgs) -> Result<()> {
    let report = match &args.checkpoint {
        Some(path) => param_report(&load(path)?.store),
        None => {
            let mut model = args.run.resolve()?.model();
            model.input_size = args.input_size.unwrap_or(model.input_size);
            plan_model(&model)?.1
        }
    };
    if args.json {
        print_json(&report)
    } else {
        println!("{report}");
        Ok(())
    }
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut plan: AblationPlan = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => AblationPlan::default(),
    };
    if let Some(v) = args.scales {
        plan.scales = v;
    }
    if let Some(v) = args.teachers {
        plan.teachers = v;
    }
    if let Some(list) = &args.strategies {
        plan.strategies =
            list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    }
    if let Some(v) = args.epochs {
        plan.train.epochs = v;
    }
    let records = run_ablation(&plan, Some(&args.out))?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    println!("wrote {} rows to {} ({failed} failed)", records.len(), args.out.display());
    Ok(())
}

fn dump_cmd(args: DumpArgs) -> Result<()> {
    let model = load(&args.checkpoint)?;
    let image = load_image(&args.image, model.config().input_size)?;
    let batch = image.reshape([1, 3, model.config().input_size, model.config().input_size])?;
    let files = export_feature_maps(&model, &batch, args.site, &args.out, args.colormap)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Params(a) => params_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::DumpFeatures(a) => dump_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
