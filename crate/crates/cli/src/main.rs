use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use idet_core::config::KeyValues;
use idet_core::data::{
    generate_synthetic, load_dataset, read_pgm_mask, select_split, split_of, write_pgm, ImagePair, Split, SynthConfig,
};
use idet_core::degrade::{alpha_sweep, check_enhancement, default_alphas, DegradeConfig, Enhancement};
use idet_core::experiments::{gradcheck, runs};
use idet_core::metrics::{confusion, metrics_from_confusion};
use idet_core::training::{load_model, parse_run_config, predict, RunDir, TrainConfig, Trainer};
use idet_core::{Arch, ConfusionCounts, Error, MetricReport, ModelConfig, RngSeed};

#[derive(Parser)]
#[command(name = "idet", version, about = "Change detection with iterative difference-enhanced transformers")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic change-detection dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus logs into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint (or saved prediction masks) on a dataset.
    Eval(EvalArgs),
    /// Sweep the noise severity injected into the feature difference.
    Degrade(DegradeArgs),
    /// Train the variant (or loss) matrix over several seeds.
    Ablate(AblateArgs),
    /// Train the full model for each iteration count T = 0..max.
    SweepT(SweepTArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_pairs: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.07)]
    change_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 4)]
    complexity: usize,
    #[arg(long, default_value_t = 1)]
    min_changes: usize,
    #[arg(long, default_value_t = 5)]
    max_changes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Model and training settings: a `key = value` file plus overrides.
#[derive(Args, Clone)]
struct RunConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set iterations=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

impl RunConfigArgs {
    fn key_values(&self) -> idet_core::Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::new(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        if let Some(e) = self.epochs {
            kv.set("epochs", e);
        }
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        if let Some(v) = &self.variant {
            kv.set("variant", v);
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (with manifest.txt).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and CSV logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunConfigArgs,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
}

fn pick_split(pairs: Vec<ImagePair>, split: SplitArg) -> Vec<ImagePair> {
    match split {
        SplitArg::All => pairs,
        SplitArg::Train => select_split(&pairs, Split::Train),
        SplitArg::Val => select_split(&pairs, Split::Val),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "pred_dir", conflicts_with = "pred_dir")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>_pred.pgm` masks to score instead of a checkpoint.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Write predicted masks as `<id>_pred.pgm` here.
    #[arg(long, requires = "checkpoint")]
    save_pred: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated severities; 5, 10, ..., 100 by default.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Expected enhancement after the D tap (checked against the checkpoint).
    #[arg(long)]
    enhancement: Option<String>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Variants,
    Loss,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `ablation.csv` and `ablation_summary.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "variants")]
    suite: Suite,
    #[arg(long, value_delimiter = ',', default_values_t = runs::SEEDS)]
    seeds: Vec<u64>,
    #[command(flatten)]
    run: RunConfigArgs,
}

#[derive(Args)]
struct SweepTArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    max_t: usize,
    #[arg(long, value_delimiter = ',', default_values_t = runs::SEEDS)]
    seeds: Vec<u64>,
    #[command(flatten)]
    run: RunConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer ops only, skipping the block and full-model checks.
    #[arg(long)]
    ops_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> idet_core::Result<ExitCode> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Degrade(a) => degrade(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepT(a) => sweep_t(a),
        Command::Gradcheck(a) => return grad_check(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write_output(out: Option<&Path>, text: &str) -> idet_core::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(a: GenerateArgs) -> idet_core::Result<()> {
    let cfg = SynthConfig {
        n_pairs: a.n_pairs,
        height: a.height,
        width: a.width,
        change_ratio_target: a.change_ratio,
        photometric_jitter: a.jitter,
        background_complexity: a.complexity,
        min_changes: a.min_changes,
        max_changes: a.max_changes,
        seed: RngSeed(a.seed),
    };
    let ids = generate_synthetic(&cfg, &a.out)?;
    info!("wrote {} pairs to {}", ids.len(), a.out.display());
    Ok(())
}

fn splits(data: &Path) -> idet_core::Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    let pairs = load_dataset(data)?;
    let (train, val): (Vec<ImagePair>, Vec<ImagePair>) =
        pairs.into_iter().partition(|p| split_of(&p.id) == Split::Train);
    info!("{} training and {} validation pairs", train.len(), val.len());
    Ok((train, val))
}

fn train(a: TrainArgs) -> idet_core::Result<()> {
    let (train, val) = splits(&a.data)?;
    let run = RunDir::new(&a.out)?;
    let mut trainer = if a.resume {
        let kv = a.run.key_values()?;
        let extra: Vec<&str> = kv.keys().filter(|&k| k != "epochs").collect();
        if !extra.is_empty() {
            return Err(Error::Usage(format!(
                "--resume takes its settings from the checkpoint; only --epochs may change (got {})",
                extra.join(", ")
            )));
        }
        Trainer::resume(&run.checkpoint(), a.run.epochs)?
    } else {
        let (model, cfg) = parse_run_config(&a.run.key_values()?)?;
        Trainer::new(&model, &cfg)?
    };
    trainer.fit(&train, &val, Some(&run))?;
    if let Some(b) = &trainer.best {
        info!("best validation F1 {:.4} at epoch {} ({})", b.f1, b.epoch, run.best().display());
    }
    Ok(())
}

fn describe(cfg: &ModelConfig) -> (&'static str, usize) {
    (cfg.label(), cfg.net.idet.iterations)
}

fn eval(a: EvalArgs) -> idet_core::Result<()> {
    let pairs = pick_split(load_dataset(&a.data)?, a.split);
    if pairs.is_empty() {
        return Err(Error::Input("the selected split is empty".into()));
    }
    let dataset = a.data.file_name().map_or("data".into(), |n| n.to_string_lossy().into_owned());
    let (preds, label, t) = match (&a.checkpoint, &a.pred_dir) {
        (Some(ckpt), _) => {
            let (model, cfg, store) = load_model(ckpt)?;
            let (label, t) = describe(&cfg);
            (predict(&model, &store, &pairs, a.batch_size)?, label, t)
        }
        (None, Some(dir)) => {
            let preds = pairs
                .iter()
                .map(|p| read_pgm_mask(&dir.join(format!("{}_pred.pgm", p.id))))
                .collect::<idet_core::Result<Vec<_>>>()?;
            (preds, "predictions", 0)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(dir) = &a.save_pred {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (p, m) in pairs.iter().zip(&preds) {
            write_pgm(&dir.join(format!("{}_pred.pgm", p.id)), m)?;
        }
    }
    let mut total = ConfusionCounts::default();
    for (p, m) in pairs.iter().zip(&preds) {
        total += confusion(m, &p.gt)?;
    }
    let report = metrics_from_confusion(&total)?;
    if report.degenerate {
        warn!("some metrics are 0/0 and reported as 0");
    }
    info!("F1={:.6} over {} pairs", report.f1, pairs.len());
    let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row(&dataset, label, t));
    write_output(a.out.as_deref(), &csv)
}

fn degrade(a: DegradeArgs) -> idet_core::Result<()> {
    let pairs = pick_split(load_dataset(&a.data)?, a.split);
    let (model, _, store) = load_model(&a.checkpoint)?;
    if let Some(e) = &a.enhancement {
        check_enhancement(&model, Enhancement::parse(e)?)?;
    }
    let cfg = DegradeConfig {
        alphas: a.alphas.unwrap_or_else(default_alphas),
        seed: RngSeed(a.seed),
    };
    let curve = alpha_sweep(&model, &store, &pairs, &cfg)?;
    write_output(a.out.as_deref(), &curve.csv())
}

fn run_settings(args: &RunConfigArgs) -> idet_core::Result<(ModelConfig, TrainConfig)> {
    let kv = args.key_values()?;
    if kv.get("seed").is_some() {
        return Err(Error::Usage("training seeds come from --seeds".into()));
    }
    parse_run_config(&kv)
}

fn ablate(a: AblateArgs) -> idet_core::Result<()> {
    let (model, cfg) = run_settings(&a.run)?;
    if model.arch == Arch::Basic {
        return Err(Error::Usage("ablation arms are MS-IDET variants; drop arch = basic".into()));
    }
    let (train, val) = splits(&a.data)?;
    let arms = match a.suite {
        Suite::Variants => runs::variant_arms(&model, &cfg),
        Suite::Loss => runs::loss_arms(&model, &cfg),
    };
    let rows = runs::run_arms(&arms, &a.seeds, &train, &val)?;
    write_output(Some(&a.out.join("ablation.csv")), &runs::results_csv(&rows))?;
    write_output(Some(&a.out.join("ablation_summary.csv")), &runs::summary_csv(&rows))?;
    print!("{}", runs::summary_csv(&rows));
    Ok(())
}

fn sweep_t(a: SweepTArgs) -> idet_core::Result<()> {
    let (model, cfg) = run_settings(&a.run)?;
    if model.arch == Arch::Basic {
        return Err(Error::Usage("sweep-t needs the MS-IDET model".into()));
    }
    let (train, val) = splits(&a.data)?;
    let arms = runs::iteration_arms(&model, &cfg, a.max_t);
    let rows = runs::run_arms(&arms, &a.seeds, &train, &val)?;
    write_output(a.out.as_deref(), &runs::iterations_csv(&rows, a.max_t))
}

fn grad_check(a: GradcheckArgs) -> idet_core::Result<ExitCode> {
    let seed = RngSeed(a.seed);
    let results = if a.ops_only {
        gradcheck::op_suite()?
    } else {
        gradcheck::full_suite(seed)?
    };
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
