use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vogseg::corruption::{corrupt_dataset, CorruptionKind, CorruptionMode};
use vogseg::dataset::{dataset_digest, generate_phantom, read_dataset, split_dataset, write_dataset};
use vogseg::detection::Detector;
use vogseg::experiment::{
    render_tables, run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport, PreparedData,
    train_and_evaluate,
};
use vogseg::pipeline::Pipeline;
use vogseg::refurbish::events_to_jsonl;
use vogseg::segmenter::save_checkpoint;
use vogseg::Error;

#[derive(Parser)]
#[command(name = "vogseg", version, about = "Label-error injection, detection and refurbishment for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with a train/val/test split.
    Generate(GenerateArgs),
    /// Corrupt the train and validation labels of a dataset.
    Corrupt(CorruptArgs),
    /// Train one model on a dataset directory.
    Train(TrainArgs),
    /// Detector accuracy, sensitivity and specificity for each error type.
    Exp1(ExperimentArgs),
    /// Label Dice before and after refurbishment.
    Exp2(ExperimentArgs),
    /// Test Dice of baseline and refurbished training with paired tests.
    Exp3(ExperimentArgs),
    /// Re-render the tables of a saved experiment report.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a single replicate seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// 500 phantoms and 100 epochs.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Incomplete,
    Boundary,
    Merged,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Systematic,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorArg {
    Vog,
    Loss,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Baseline,
    Refurb,
}

#[derive(Args)]
struct CorruptArgs {
    /// Source dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    proportion: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    pipeline: Option<PipelineArg>,
    #[arg(long, value_enum)]
    detector: Option<DetectorArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_enum)]
    detector: Option<DetectorArg>,
    /// Independent runs trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by exp1, exp2 or exp3.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

impl From<KindArg> for CorruptionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Incomplete => CorruptionKind::Incomplete,
            KindArg::Boundary => CorruptionKind::Boundary,
            KindArg::Merged => CorruptionKind::Merged,
        }
    }
}

impl From<ModeArg> for CorruptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => CorruptionMode::Random,
            ModeArg::Systematic => CorruptionMode::Systematic,
        }
    }
}

impl From<DetectorArg> for Detector {
    fn from(d: DetectorArg) -> Self {
        match d {
            DetectorArg::Vog => Detector::Vog,
            DetectorArg::Loss => Detector::Loss,
        }
    }
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Baseline => Pipeline::Baseline,
            PipelineArg::Refurb => Pipeline::Refurbished,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if common.paper_scale {
        config = config.paper_scale();
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn first_seed(config: &ExperimentConfig) -> Result<u64> {
    Ok(*config
        .seeds
        .first()
        .ok_or_else(|| Error::Config("no seed configured".into()))?)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        ))
        .into());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    let seed = first_seed(&config)?;
    let params = config.phantom(seed);
    prepare_out(&args.common.out, args.common.force)?;
    let samples = generate_phantom(&params)?;
    let mut manifest = split_dataset(&samples, config.split_fractions, seed)?;
    manifest.generator = Some(params);
    write_dataset(&args.common.out, &samples, &manifest)?;
    let [train, val, test] = manifest.counts();
    println!("{}", dataset_digest(&samples));
    eprintln!("{} samples (train {train}, val {val}, test {test})", samples.len());
    Ok(())
}

fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    let seed = first_seed(&config)?;
    let (mut samples, manifest) = read_dataset(&args.data)?;
    let spec = config.corruption_spec(args.kind.into(), args.mode.into(), args.proportion, seed);
    let outcome = corrupt_dataset(&mut samples, &manifest, &spec)?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    prepare_out(&args.common.out, args.common.force)?;
    write_dataset(&args.common.out, &samples, &manifest)?;
    write(&args.common.out, "corruption.json", serde_json::to_string_pretty(&(&spec, &outcome))?)?;
    println!("{}", dataset_digest(&samples));
    eprintln!("corrupted {} samples", outcome.corrupted_ids.len());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(p) = args.pipeline {
        config.pipeline = p.into();
    }
    if let Some(d) = args.detector {
        config.detector = d.into();
    }
    let seed = first_seed(&config)?;
    let (samples, manifest) = read_dataset(&args.data)?;
    let data = PreparedData::from_samples(&samples, &manifest)?;
    prepare_out(&args.common.out, args.common.force)?;
    let out = &args.common.out;
    let (run, best) = train_and_evaluate(&config, seed, &data, config.pipeline)?;
    for d in &run.detections {
        write(
            out,
            &format!("detection_{}_epoch{:03}.csv", d.header.detector.as_str(), d.header.epoch),
            d.to_csv(),
        )?;
    }
    write(out, "events.jsonl", events_to_jsonl(&run.events)?)?;
    write(out, "test_dice.csv", run.test.to_csv())?;
    write(out, "run.json", serde_json::to_string_pretty(&run)?)?;
    save_checkpoint(&out.join("model.ckpt"), &best)?;
    eprintln!(
        "best epoch {} (validation Dice {:.4}); test foreground Dice {:.4}",
        run.best_epoch, run.best_val_dice, run.test.summary.mean.mean
    );
    Ok(())
}

fn cmd_experiment(kind: ExperimentKind, args: ExperimentArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(d) = args.detector {
        config.detector = d.into();
    }
    if let Some(j) = args.jobs {
        config.jobs = j;
    }
    config.validate()?;
    prepare_out(&args.common.out, args.common.force)?;
    let report = run_experiment(kind, &config)?;
    write_report(&args.common.out, &report)?;
    eprintln!(
        "{}: {} runs in {:.0} s",
        kind.as_str(),
        report.runs.len(),
        report.wall_clock_seconds
    );
    Ok(())
}

fn write_report(out: &Path, report: &ExperimentReport) -> Result<()> {
    write(out, "report.json", report.to_json()?)?;
    for (name, contents) in render_tables(report)? {
        write(out, name, contents)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let report = ExperimentReport::from_json(&text)?;
    prepare_out(&args.out, args.force)?;
    for (name, contents) in render_tables(&report)? {
        write(&args.out, name, contents)?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a),
        Command::Exp1(a) => cmd_experiment(ExperimentKind::Exp1, a),
        Command::Exp2(a) => cmd_experiment(ExperimentKind::Exp2, a),
        Command::Exp3(a) => cmd_experiment(ExperimentKind::Exp3, a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
