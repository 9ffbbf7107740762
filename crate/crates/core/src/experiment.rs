//! Experiment configuration, run planning and report tables.
//!
//! A replicate seed drives phantom generation, the split, corruption, weight
//! initialization and batch shuffling of every run in that replicate, so the
//! baseline and refurbished runs of one arm train on identical data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_dataset, CorruptionKind, CorruptionMode, CorruptionParams, CorruptionSpec};
use crate::dataset::{dataset_digest, generate_phantom, split_dataset, LabeledSample, PhantomParams, Split};
use crate::detection::{DetectionReport, DetectionSummary, Detector};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, foreground_dice, wilcoxon_signed_rank, Evaluation, PairedTestResult, Summary, ALPHA};
use crate::pipeline::{run_pipeline, Pipeline, Schedule};
use crate::refurbish::RefurbishmentEvent;
use crate::segmenter::{Architecture, Checkpoint, EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSweep {
    pub kinds: Vec<CorruptionKind>,
    pub modes: Vec<CorruptionMode>,
    pub proportions: Vec<f64>,
    pub params: CorruptionParams,
}

impl Default for CorruptionSweep {
    fn default() -> Self {
        CorruptionSweep {
            kinds: CorruptionKind::ALL.to_vec(),
            modes: vec![CorruptionMode::Random, CorruptionMode::Systematic],
            proportions: vec![0.125, 0.25, 0.5],
            params: CorruptionParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Phantom generator settings; the seed field is replaced by each replicate seed.
    pub dataset: PhantomParams,
    pub split_fractions: [f64; 3],
    pub corruption: CorruptionSweep,
    pub architecture: Architecture,
    /// Optimizer settings; the seed field is replaced by each replicate seed.
    pub train: TrainConfig,
    pub schedule: Schedule,
    /// Detector whose flags drive refurbishment.
    pub detector: Detector,
    /// Pipeline used by single training runs.
    pub pipeline: Pipeline,
    pub seeds: Vec<u64>,
    /// Independent runs trained concurrently.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PhantomParams::default(),
            split_fractions: [0.8, 0.1, 0.1],
            corruption: CorruptionSweep::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            schedule: Schedule::default(),
            detector: Detector::Vog,
            pipeline: Pipeline::Baseline,
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// 500 phantoms and 100 epochs.
    pub fn paper_scale(mut self) -> Self {
        self.dataset.count = 500;
        self.train.epochs = 100;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.train.validate()?;
        if self.train.epochs < self.schedule.first_event() {
            return Err(Error::Config(format!(
                "{} epochs end before the first detection epoch {}",
                self.train.epochs,
                self.schedule.first_event()
            )));
        }
        let c = &self.corruption;
        if self.seeds.is_empty() || c.kinds.is_empty() || c.modes.is_empty() || c.proportions.is_empty() {
            return Err(Error::Config("seeds, kinds, modes and proportions must be non-empty".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        for &p in &c.proportions {
            self.corruption_spec(c.kinds[0], c.modes[0], p, 0).validate()?;
        }
        Ok(())
    }

    pub fn corruption_spec(&self, kind: CorruptionKind, mode: CorruptionMode, proportion: f64, seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            params: self.corruption.params.clone(),
            ..CorruptionSpec::new(kind, mode, proportion, seed)
        }
    }

    pub fn phantom(&self, seed: u64) -> PhantomParams {
        PhantomParams { seed, ..self.dataset }
    }
}

/// Train, validation and test samples of one corrupted dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub digest: String,
}

impl PreparedData {
    pub fn from_samples(samples: &[LabeledSample], manifest: &crate::dataset::DatasetManifest) -> Result<Self> {
        let data = PreparedData {
            train: manifest.select(samples, Split::Train),
            val: manifest.select(samples, Split::Val),
            test: manifest.select(samples, Split::Test),
            digest: dataset_digest(samples),
        };
        if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
            return Err(Error::Data("every split needs at least one sample".into()));
        }
        Ok(data)
    }
}

/// Generates, splits and corrupts the phantom dataset of one arm.
pub fn prepare_data(config: &ExperimentConfig, arm: &Arm) -> Result<PreparedData> {
    let mut samples = generate_phantom(&config.phantom(arm.seed))?;
    let manifest = split_dataset(&samples, config.split_fractions, arm.seed)?;
    let spec = config.corruption_spec(arm.kind, arm.mode, arm.proportion, arm.seed);
    corrupt_dataset(&mut samples, &manifest, &spec)?;
    PreparedData::from_samples(&samples, &manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub mode: CorruptionMode,
    pub kind: CorruptionKind,
    pub proportion: f64,
    pub seed: u64,
}

/// Training label of a corrupted training sample before and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub id: String,
    pub before: f64,
    pub after: f64,
    pub refurbished: bool,
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub pipeline: Pipeline,
    pub detector: Detector,
    pub dataset_digest: String,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub trace: Vec<EpochRecord>,
    pub detections: Vec<DetectionReport>,
    pub events: Vec<RefurbishmentEvent>,
    pub label_quality: Vec<LabelQuality>,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: Arm,
    #[serde(flatten)]
    pub run: RunResult,
}

impl RunResult {
    /// Detection report of `detector` at `epoch`, if detection ran then.
    pub fn detection(&self, detector: Detector, epoch: usize) -> Option<&DetectionReport> {
        self.detections
            .iter()
            .find(|d| d.header.detector == detector && d.header.epoch == epoch)
    }
}

/// Trains one pipeline on prepared data and evaluates the best checkpoint on
/// the clean test masks.
pub fn execute_run(config: &ExperimentConfig, seed: u64, data: &PreparedData, pipeline: Pipeline) -> Result<RunResult> {
    train_and_evaluate(config, seed, data, pipeline).map(|(run, _)| run)
}

/// [`execute_run`], also returning the best checkpoint.
pub fn train_and_evaluate(
    config: &ExperimentConfig,
    seed: u64,
    data: &PreparedData,
    pipeline: Pipeline,
) -> Result<(RunResult, Checkpoint)> {
    let mut train = data.train.clone();
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = run_pipeline(
        &mut train,
        &data.val,
        config.architecture,
        &train_config,
        config.schedule,
        pipeline,
        config.detector,
    )?;
    let refurbished: BTreeSet<&str> = outcome
        .events
        .iter()
        .flat_map(|e| e.samples.iter().map(|s| s.id.as_str()))
        .collect();
    let label_quality = data
        .train
        .iter()
        .zip(&train)
        .filter(|(s, _)| s.corrupted)
        .map(|(before, after)| {
            Ok(LabelQuality {
                id: before.id.clone(),
                before: foreground_dice(&before.mask, &before.clean_mask)?,
                after: foreground_dice(&after.mask, &after.clean_mask)?,
                refurbished: refurbished.contains(before.id.as_str()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = evaluate_model(&outcome.training.best.params, &data.test)?;
    let run = RunResult {
        pipeline,
        detector: config.detector,
        dataset_digest: data.digest.clone(),
        best_epoch: outcome.training.best.epoch,
        best_val_dice: outcome.training.best.val_dice,
        trace: outcome.training.trace,
        detections: outcome.detections,
        events: outcome.events,
        label_quality,
        test,
    };
    Ok((run, outcome.training.best))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Exp1,
    Exp2,
    Exp3,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Exp1 => "exp1",
            ExperimentKind::Exp2 => "exp2",
            ExperimentKind::Exp3 => "exp3",
        }
    }

    fn pipelines(self) -> &'static [Pipeline] {
        match self {
            ExperimentKind::Exp1 => &[Pipeline::Baseline],
            ExperimentKind::Exp2 => &[Pipeline::Refurbished],
            ExperimentKind::Exp3 => &[Pipeline::Baseline, Pipeline::Refurbished],
        }
    }

    /// Experiment 1 only uses random corruption.
    fn modes(self, config: &ExperimentConfig) -> Vec<CorruptionMode> {
        match self {
            ExperimentKind::Exp1 => vec![CorruptionMode::Random],
            _ => config.corruption.modes.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    /// Pretty JSON with the wall-clock field zeroed.
    pub fn deterministic_json(&self) -> Result<String> {
        let copy = ExperimentReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        };
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("experiment report: {e}")))
    }

    pub fn runs_for(&self, pipeline: Pipeline) -> impl Iterator<Item = &RunReport> {
        self.runs.iter().filter(move |r| r.run.pipeline == pipeline)
    }
}

/// Every (arm, pipeline) pair of an experiment, in report order.
pub fn plan(kind: ExperimentKind, config: &ExperimentConfig) -> Vec<(Arm, Pipeline)> {
    let mut out = Vec::new();
    for mode in kind.modes(config) {
        for &proportion in &config.corruption.proportions {
            for &k in &config.corruption.kinds {
                for &seed in &config.seeds {
                    for &pipeline in kind.pipelines() {
                        let arm = Arm {
                            mode,
                            kind: k,
                            proportion,
                            seed,
                        };
                        out.push((arm, pipeline));
                    }
                }
            }
        }
    }
    out
}

/// Runs the given (arm, pipeline) pairs. Pairs whose corrupted datasets are
/// identical (same digest and seed) are trained once and shared.
pub fn execute_plan(config: &ExperimentConfig, runs: &[(Arm, Pipeline)]) -> Result<Vec<RunReport>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let arms: Vec<Arm> = runs.iter().map(|r| r.0).collect();
        let data: Vec<PreparedData> = arms.par_iter().map(|a| prepare_data(config, a)).collect::<Result<_>>()?;
        let mut unique: BTreeMap<(String, u64, Pipeline), usize> = BTreeMap::new();
        let mut slot = Vec::with_capacity(runs.len());
        for (i, (arm, pipeline)) in runs.iter().enumerate() {
            let next = unique.len();
            let key = (data[i].digest.clone(), arm.seed, *pipeline);
            slot.push(*unique.entry(key).or_insert(next));
        }
        let mut firsts = vec![usize::MAX; unique.len()];
        for (i, &s) in slot.iter().enumerate() {
            if firsts[s] == usize::MAX {
                firsts[s] = i;
            }
        }
        let trained: Vec<RunResult> = firsts
            .par_iter()
            .map(|&i| execute_run(config, runs[i].0.seed, &data[i], runs[i].1))
            .collect::<Result<_>>()?;
        Ok(runs
            .iter()
            .zip(&slot)
            .map(|((arm, _), &s)| RunReport {
                arm: *arm,
                run: trained[s].clone(),
            })
            .collect())
    })
}

pub fn run_experiment(kind: ExperimentKind, config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let runs = execute_plan(config, &plan(kind, config))?;
    Ok(ExperimentReport {
        experiment: kind,
        config: config.clone(),
        runs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    Summary::of(values).map_or((f64::NAN, f64::NAN), |s| (s.mean, s.std))
}

/// Groups runs by arm without the seed, preserving first-seen order.
fn by_condition<'a>(runs: impl Iterator<Item = &'a RunReport>) -> Vec<((CorruptionMode, f64, CorruptionKind), Vec<&'a RunReport>)> {
    let mut out: Vec<((CorruptionMode, f64, CorruptionKind), Vec<&RunReport>)> = Vec::new();
    for r in runs {
        let key = (r.arm.mode, r.arm.proportion, r.arm.kind);
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => out.push((key, vec![r])),
        }
    }
    out
}

/// Detection quality per error type and detector at the first detection
/// epoch, as mean and standard deviation over seeds.
pub fn detection_table(report: &ExperimentReport) -> Result<String> {
    let epoch = report.config.schedule.first_event();
    let mut out = String::from(
        "mode,proportion,error_type,detector,epoch,n_seeds,accuracy_mean,accuracy_std,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std\n",
    );
    for ((mode, p, kind), runs) in by_condition(report.runs_for(Pipeline::Baseline)) {
        for detector in Detector::ALL {
            let summaries: Vec<&DetectionSummary> = runs
                .iter()
                .map(|r| {
                    r.run.detection(detector, epoch)
                        .map(|d| &d.header.summary)
                        .ok_or_else(|| Error::Data(format!("no {} detection at epoch {epoch}", detector.as_str())))
                })
                .collect::<Result<_>>()?;
            let stat = |f: fn(&DetectionSummary) -> f64| mean_std(&summaries.iter().map(|s| f(s)).collect::<Vec<_>>());
            let (am, asd) = stat(|s| s.accuracy);
            let (sm, ssd) = stat(|s| s.sensitivity);
            let (pm, psd) = stat(|s| s.specificity);
            let _ = writeln!(
                out,
                "{},{p},{},{},{epoch},{},{am:.6},{asd:.6},{sm:.6},{ssd:.6},{pm:.6},{psd:.6}",
                mode.as_str(),
                kind.as_str(),
                detector.as_str(),
                runs.len()
            );
        }
    }
    Ok(out)
}

/// Detection quality of every run at every detection epoch.
pub fn detection_epochs_table(report: &ExperimentReport) -> String {
    let mut out =
        String::from("mode,proportion,error_type,seed,pipeline,detector,epoch,flagged,accuracy,sensitivity,specificity\n");
    for r in &report.runs {
        for d in &r.run.detections {
            let h = &d.header;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                r.arm.mode.as_str(),
                r.arm.proportion,
                r.arm.kind.as_str(),
                r.arm.seed,
                r.run.pipeline.as_str(),
                h.detector.as_str(),
                h.epoch,
                h.flagged,
                h.summary.accuracy,
                h.summary.sensitivity,
                h.summary.specificity
            );
        }
    }
    out
}

/// Aggregated label quality of one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefurbishmentRow {
    pub mode: CorruptionMode,
    pub proportion: f64,
    pub kind: CorruptionKind,
    pub n_seeds: usize,
    /// Corrupted training samples pooled over seeds.
    pub n_samples: usize,
    pub before: (f64, f64),
    pub after: (f64, f64),
    pub n_refurbished: usize,
    pub refurbished_before: f64,
    pub refurbished_after: f64,
}

pub fn refurbishment_rows(report: &ExperimentReport) -> Vec<RefurbishmentRow> {
    by_condition(report.runs_for(Pipeline::Refurbished))
        .into_iter()
        .map(|((mode, proportion, kind), runs)| {
            let all: Vec<&LabelQuality> = runs.iter().flat_map(|r| &r.run.label_quality).collect();
            let refurbished: Vec<&&LabelQuality> = all.iter().filter(|q| q.refurbished).collect();
            let col = |v: &[&LabelQuality], f: fn(&LabelQuality) -> f64| v.iter().map(|q| f(q)).collect::<Vec<_>>();
            let refs: Vec<&LabelQuality> = refurbished.iter().map(|q| **q).collect();
            RefurbishmentRow {
                mode,
                proportion,
                kind,
                n_seeds: runs.len(),
                n_samples: all.len(),
                before: mean_std(&col(&all, |q| q.before)),
                after: mean_std(&col(&all, |q| q.after)),
                n_refurbished: refs.len(),
                refurbished_before: mean_std(&col(&refs, |q| q.before)).0,
                refurbished_after: mean_std(&col(&refs, |q| q.after)).0,
            }
        })
        .collect()
}

/// Dice of corrupted training labels against the clean masks before training
/// and after the last refurbishment event.
pub fn refurbishment_table(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "mode,proportion,error_type,n_seeds,n_samples,before_mean,before_std,after_mean,after_std,n_refurbished,refurbished_before_mean,refurbished_after_mean\n",
    );
    for r in refurbishment_rows(report) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
            r.mode.as_str(),
            r.proportion,
            r.kind.as_str(),
            r.n_seeds,
            r.n_samples,
            r.before.0,
            r.before.1,
            r.after.0,
            r.after.1,
            r.n_refurbished,
            r.refurbished_before,
            r.refurbished_after
        );
    }
    out
}

/// Per-sample test Dice of every run, one row per sample.
pub fn boxplot_table(report: &ExperimentReport) -> String {
    let mut out = String::from("mode,proportion,error_type,seed,pipeline,id,lv,lvm,la,mean\n");
    for r in &report.runs {
        for s in &r.run.test.samples {
            let [a, b, c, m] = s.dice.columns();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{a:.6},{b:.6},{c:.6},{m:.6}",
                r.arm.mode.as_str(),
                r.arm.proportion,
                r.arm.kind.as_str(),
                r.arm.seed,
                r.run.pipeline.as_str(),
                s.id
            );
        }
    }
    out
}

pub const STRUCTURES: [&str; 4] = ["lv", "lvm", "la", "mean"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mode: CorruptionMode,
    pub proportion: f64,
    pub kind: CorruptionKind,
    pub structure: String,
    pub n_pairs: usize,
    pub baseline_mean: f64,
    pub refurbished_mean: f64,
    pub test: PairedTestResult,
    /// Significant at 0.05 in favour of refurbishment.
    pub star: bool,
}

/// Wilcoxon signed-rank comparison of refurbished against baseline test Dice,
/// pairing the same test sample of the same seed.
pub fn paired_comparisons(report: &ExperimentReport) -> Result<Vec<PairedComparison>> {
    let mut out = Vec::new();
    for ((mode, proportion, kind), baselines) in by_condition(report.runs_for(Pipeline::Baseline)) {
        let mut pairs: Vec<([f64; 4], [f64; 4])> = Vec::new();
        for b in baselines {
            let r = report
                .runs_for(Pipeline::Refurbished)
                .find(|r| r.arm == b.arm)
                .ok_or_else(|| Error::Data(format!("no refurbished run pairs seed {}", b.arm.seed)))?;
            if r.run.dataset_digest != b.run.dataset_digest {
                return Err(Error::Data("paired runs were trained on different datasets".into()));
            }
            for (sb, sr) in b.run.test.samples.iter().zip(&r.run.test.samples) {
                if sb.id != sr.id {
                    return Err(Error::Data("paired runs evaluated different test samples".into()));
                }
                pairs.push((sb.dice.columns(), sr.dice.columns()));
            }
        }
        for (i, structure) in STRUCTURES.into_iter().enumerate() {
            let base: Vec<f64> = pairs.iter().map(|p| p.0[i]).collect();
            let refurb: Vec<f64> = pairs.iter().map(|p| p.1[i]).collect();
            let diffs: Vec<f64> = refurb.iter().zip(&base).map(|(r, b)| r - b).collect();
            let test = wilcoxon_signed_rank(&diffs);
            let (baseline_mean, refurbished_mean) = (mean_std(&base).0, mean_std(&refurb).0);
            out.push(PairedComparison {
                mode,
                proportion,
                kind,
                structure: structure.to_string(),
                n_pairs: pairs.len(),
                baseline_mean,
                refurbished_mean,
                star: test.p_value < ALPHA && refurbished_mean > baseline_mean,
                test,
            });
        }
    }
    Ok(out)
}

pub fn comparison_table(report: &ExperimentReport) -> Result<String> {
    let mut out = String::from(
        "mode,proportion,error_type,structure,n_pairs,baseline_mean,refurbished_mean,statistic,n_effective,p_value,method,star\n",
    );
    for c in paired_comparisons(report)? {
        let method = serde_json::to_value(c.test.method)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{},{:.6},{},{}",
            c.mode.as_str(),
            c.proportion,
            c.kind.as_str(),
            c.structure,
            c.n_pairs,
            c.baseline_mean,
            c.refurbished_mean,
            c.test.statistic,
            c.test.n_effective,
            c.test.p_value,
            method.as_str().unwrap_or_default(),
            if c.star { "*" } else { "" }
        );
    }
    Ok(out)
}

/// File name and contents of every table an experiment report renders to.
pub fn render_tables(report: &ExperimentReport) -> Result<Vec<(&'static str, String)>> {
    let mut files = vec![("test_dice.csv", boxplot_table(report))];
    match report.experiment {
        ExperimentKind::Exp1 => {
            files.push(("table1.csv", detection_table(report)?));
            files.push(("detection_epochs.csv", detection_epochs_table(report)));
        }
        ExperimentKind::Exp2 => {
            files.push(("table2.csv", refurbishment_table(report)));
            let events: Vec<RefurbishmentEvent> = report.runs.iter().flat_map(|r| r.run.events.clone()).collect();
            files.push(("events.jsonl", crate::refurbish::events_to_jsonl(&events)?));
        }
        ExperimentKind::Exp3 => {
            files.push(("wilcoxon.csv", comparison_table(report)?));
            files.push(("detection_epochs.csv", detection_epochs_table(report)));
        }
    }
    Ok(files)
}
