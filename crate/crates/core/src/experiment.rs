//! Experiment configuration, output-directory bookkeeping, result records
//! and the end-to-end pipelines behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, AdaptConfig, EvalReport, SweepCell, SweepRow};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::kernels::{Mode, BN_MOMENTUM};
use crate::meta_trainer::{EpochLog, MetaLearnerState, MetaTrainer, NoHooks, TrainingConfig};
use crate::network::{self, ArchConfig, GradScope};
use crate::synth::{self, write_atomic, SubjectDataset, SynthConfig};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Target-trial budgets, strictly ascending.
    pub budgets: Vec<usize>,
    /// Adaptation seeds run at every budget.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![8, 16, 30, 60],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Everything one experiment needs; loaded from a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// When set, overrides the `seed` of every section.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    /// Held-out subject; defaults to the highest subject id.
    pub target_subject: Option<u32>,
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    pub training: TrainingConfig,
    pub adaptation: AdaptConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            target_subject: None,
            synth: SynthConfig::default(),
            arch: ArchConfig::default(),
            training: TrainingConfig::default(),
            adaptation: AdaptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the global seed to every section and checks consistency.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.training.seed = seed;
            self.adaptation.seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.arch.validate()?;
        self.training.validate()?;
        self.adaptation.validate(self.arch.n_classes)?;
        let pairs = [
            ("channels", self.synth.channels, self.arch.channels),
            ("samples", self.synth.samples, self.arch.samples),
            ("n_classes", self.synth.n_classes, self.arch.n_classes),
        ];
        for (what, data, net) in pairs {
            if data != net {
                return Err(Error::Config(format!("synth.{what} = {data} but arch.{what} = {net}")));
            }
        }
        if self.synth.n_subjects < 2 {
            return Err(Error::Config(
                "need at least one source subject besides the target".into(),
            ));
        }
        if let Some(t) = self.target_subject {
            if t as usize >= self.synth.n_subjects {
                return Err(Error::Config(format!(
                    "target_subject {t} is outside 0..{}",
                    self.synth.n_subjects
                )));
            }
        }
        if self.sweep.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "sweep.budgets {:?} must be strictly ascending",
                self.sweep.budgets
            )));
        }
        Ok(())
    }

    pub fn target_id(&self) -> u32 {
        self.target_subject.unwrap_or(self.synth.n_subjects as u32 - 1)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// Name plus a checksum of everything that determines the trained
    /// model. The epoch count is left out so that a finished run can be
    /// extended with `--resume`.
    pub fn experiment_id(&self) -> String {
        let training = TrainingConfig {
            meta_epochs: 0,
            ..self.training.clone()
        };
        let fingerprint = serde_json::to_vec(&(&self.synth, &self.arch, &training, self.target_id()))
            .expect("configuration serializes");
        format!("{}-{:08x}", self.name, crc32fast::hash(&fingerprint))
    }
}

pub const EXPERIMENT_FILE: &str = "experiment.json";

#[derive(Serialize, Deserialize)]
struct ExperimentStamp {
    id: String,
    config: ExperimentConfig,
}

/// Creates the output directory and stamps it with the experiment id.
/// A directory stamped by a different experiment is refused unless
/// `force` is set.
pub fn prepare_output(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stamp_path = dir.join(EXPERIMENT_FILE);
    let id = cfg.experiment_id();
    if stamp_path.exists() {
        let text = fs::read(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?;
        let existing = serde_json::from_slice::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("id").and_then(|i| i.as_str().map(str::to_owned)));
        match existing {
            Some(old) if old == id => return Ok(()),
            Some(old) if !force => {
                return Err(Error::Config(format!(
                    "{} holds experiment {old}, not {id}; choose another --out or pass --force",
                    dir.display()
                )))
            }
            None if !force => {
                return Err(Error::Config(format!(
                    "{} is unreadable; pass --force to overwrite",
                    stamp_path.display()
                )))
            }
            _ => warn!("overwriting experiment stamp in {}", dir.display()),
        }
    }
    let stamp = ExperimentStamp {
        id,
        config: cfg.clone(),
    };
    let json = serde_json::to_vec_pretty(&stamp).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&stamp_path, &json)
}

// ---------------------------------------------------------------------------
// Result records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub phase: String,
    pub metric: String,
    pub seed: u64,
    pub budget: Option<usize>,
    pub value: f64,
    /// Seconds since the Unix epoch. Kept out of the CSV so that reruns
    /// produce identical tables.
    pub timestamp: u64,
}

pub const CSV_HEADER: [&str; 6] = ["experiment", "phase", "metric", "seed", "budget", "value"];

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Collects records for one experiment, stamping each with the time of
/// creation.
pub struct RecordSink {
    experiment: String,
    records: Vec<ResultRecord>,
}

impl RecordSink {
    pub fn new(experiment: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, phase: &str, metric: impl Into<String>, seed: u64, budget: Option<usize>, value: Real) {
        self.records.push(ResultRecord {
            experiment: self.experiment.clone(),
            phase: phase.into(),
            metric: metric.into(),
            seed,
            budget,
            value: value as f64,
            timestamp: now(),
        });
    }

    pub fn push_report(&mut self, phase: &str, seed: u64, budget: Option<usize>, report: &EvalReport) {
        self.push(phase, "target_acc", seed, budget, report.target.accuracy);
        self.push(phase, "target_auc", seed, budget, report.target.auc);
        self.push(phase, "avg_acc", seed, budget, report.retention.avg_acc);
        self.push(phase, "avg_ra", seed, budget, report.retention.avg_ra);
        for s in &report.retention.per_source {
            self.push(phase, format!("source_{:02}_acc", s.subject), seed, budget, s.accuracy);
            self.push(phase, format!("source_{:02}_auc", s.subject), seed, budget, s.auc);
        }
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ResultRecord> {
        self.records
    }
}

fn check_records(records: &[ResultRecord]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::Metric(format!(
                "{}/{} is not finite ({})",
                r.phase, r.metric, r.value
            )));
        }
        if !seen.insert((&r.phase, &r.metric, r.seed, r.budget)) {
            return Err(Error::Metric(format!(
                "duplicate record {}/{} seed {} budget {:?}",
                r.phase, r.metric, r.seed, r.budget
            )));
        }
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn emit_results(records: &[ResultRecord], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    check_records(records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| csv_error(&csv_path, e))?;
    for r in records {
        let budget = r.budget.map(|b| b.to_string()).unwrap_or_default();
        w.write_record([
            r.experiment.as_str(),
            &r.phase,
            &r.metric,
            &r.seed.to_string(),
            &budget,
            &r.value.to_string(),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&csv_path, &bytes)?;

    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_vec_pretty(records).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&json_path, &json)?;
    Ok((csv_path, json_path))
}

/// Per-budget mean ± std table for plotting accuracy against budget.
pub fn write_sweep_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "budget",
        "runs",
        "target_acc_mean",
        "target_acc_std",
        "target_auc_mean",
        "target_auc_std",
        "avg_acc_mean",
        "avg_acc_std",
        "avg_ra_mean",
        "avg_ra_std",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut fields = vec![r.budget.to_string(), r.runs.to_string()];
        for s in [r.target_acc, r.target_auc, r.avg_acc, r.avg_ra] {
            fields.push(s.mean.to_string());
            fields.push(s.std.to_string());
        }
        w.write_record(&fields).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

pub const SYNTH_FILE: &str = "synth.json";
pub const PRETRAINED_CKPT: &str = "checkpoints/pretrained.ckpt";
pub const LATEST_CKPT: &str = "checkpoints/meta_latest.ckpt";
pub const META_CKPT: &str = "checkpoints/meta.ckpt";
pub const ADAPTED_CKPT: &str = "checkpoints/adapted.ckpt";
pub const RESULTS_DIR: &str = "results";

/// Source subjects and the held-out target.
pub struct Split {
    pub sources: Vec<SubjectDataset>,
    pub target: SubjectDataset,
    pub trial_seconds: f64,
}

/// Generates the synthetic cohort into the data directory.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let subjects = synth::gen_subjects(&cfg.synth)?;
    synth::write_dataset(&dir, &subjects, cfg.synth.trial_seconds(), Some(cfg.target_id()))?;
    let json = serde_json::to_vec_pretty(&cfg.synth).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(SYNTH_FILE), &json)?;
    info!("wrote {} subjects to {}", subjects.len(), dir.display());
    Ok(dir)
}

/// Reads the dataset, generating it first if the directory is empty.
pub fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    let dir = cfg.data_dir();
    if !dir.join(synth::MANIFEST_FILE).exists() {
        info!("no dataset in {}, generating it", dir.display());
        gen_data(cfg)?;
    }
    let synth_path = dir.join(SYNTH_FILE);
    if synth_path.exists() {
        let text = fs::read(&synth_path).map_err(|e| Error::io(&synth_path, e))?;
        let stored: SynthConfig =
            serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", synth_path.display())))?;
        if stored != cfg.synth {
            return Err(Error::Config(format!(
                "{} was generated with a different synth configuration; rerun gen-data",
                dir.display()
            )));
        }
    }
    let (manifest, subjects) = synth::read_dataset(&dir)?;
    let target_id = cfg.target_id();
    let (targets, sources): (Vec<_>, Vec<_>) = subjects.into_iter().partition(|s| s.id == target_id);
    let target = targets
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data(format!("target subject {target_id} is not in {}", dir.display())))?;
    for ds in sources.iter().chain(std::iter::once(&target)) {
        if ds.channels() != cfg.arch.channels || ds.samples() != cfg.arch.samples {
            return Err(Error::Data(format!(
                "subject {} has {}x{} trials, the network expects {}x{}",
                ds.id,
                ds.channels(),
                ds.samples(),
                cfg.arch.channels,
                cfg.arch.samples
            )));
        }
    }
    Ok(Split {
        sources,
        target,
        trial_seconds: manifest.trial_seconds,
    })
}

fn results_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(RESULTS_DIR)
}

fn checkpoint_path(cfg: &ExperimentConfig, rel: &str) -> Result<PathBuf> {
    let path = cfg.out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(path)
}

fn load_checked_state(cfg: &ExperimentConfig, path: &Path) -> Result<MetaLearnerState> {
    let (arch, state) = checkpoint::load_state(path)?;
    if arch != cfg.arch {
        return Err(Error::Config(format!(
            "{} was trained with a different architecture",
            path.display()
        )));
    }
    Ok(state)
}

pub struct PretrainSummary {
    pub epoch_losses: Vec<Real>,
    pub checkpoint: PathBuf,
}

/// Pretrains φ and saves the initial meta-learner state.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let split = load_split(cfg)?;
    let trainer = MetaTrainer::new(&split.sources, &cfg.arch, &cfg.training)?;
    let (state, losses) = trainer.initial_state()?;
    let path = checkpoint_path(cfg, PRETRAINED_CKPT)?;
    checkpoint::save_state(&cfg.arch, &state, &path)?;
    let mut sink = RecordSink::new(cfg.experiment_id());
    for (i, &loss) in losses.iter().enumerate() {
        sink.push(
            "pretrain",
            format!("loss_epoch_{:02}", i + 1),
            cfg.training.seed,
            None,
            loss,
        );
    }
    emit_results(sink.records(), &results_dir(cfg), "pretrain")?;
    Ok(PretrainSummary {
        epoch_losses: losses,
        checkpoint: path,
    })
}

pub struct MetaTrainSummary {
    pub epochs: Vec<EpochLog>,
    pub resumed_from: Option<u32>,
    pub checkpoint: PathBuf,
}

/// Runs the episodic loop to completion, checkpointing after every epoch.
/// Starts from the pretrained checkpoint when present (pretraining
/// otherwise), or from the latest epoch checkpoint when `resume` is set.
pub fn run_meta_train(cfg: &ExperimentConfig, resume: bool) -> Result<MetaTrainSummary> {
    let split = load_split(cfg)?;
    let trainer = MetaTrainer::new(&split.sources, &cfg.arch, &cfg.training)?;
    let latest = checkpoint_path(cfg, LATEST_CKPT)?;
    let pretrained = cfg.out_dir.join(PRETRAINED_CKPT);
    let mut resumed_from = None;
    let mut state = if resume && latest.exists() {
        let state = load_checked_state(cfg, &latest)?;
        info!("resuming after epoch {}", state.epoch);
        resumed_from = Some(state.epoch);
        state
    } else {
        if resume {
            warn!("--resume given but {} does not exist; starting fresh", latest.display());
        }
        if pretrained.exists() {
            load_checked_state(cfg, &pretrained)?
        } else {
            let (state, losses) = trainer.initial_state()?;
            let mut sink = RecordSink::new(cfg.experiment_id());
            for (i, &loss) in losses.iter().enumerate() {
                sink.push(
                    "pretrain",
                    format!("loss_epoch_{:02}", i + 1),
                    cfg.training.seed,
                    None,
                    loss,
                );
            }
            emit_results(sink.records(), &results_dir(cfg), "pretrain")?;
            checkpoint::save_state(&cfg.arch, &state, &checkpoint_path(cfg, PRETRAINED_CKPT)?)?;
            state
        }
    };
    let epochs = trainer.train_to_completion(&mut state, &mut NoHooks, |s, _| {
        checkpoint::save_state(&cfg.arch, s, &latest)
    })?;
    let final_path = checkpoint_path(cfg, META_CKPT)?;
    checkpoint::save_state(&cfg.arch, &state, &final_path)?;

    let mut sink = RecordSink::new(cfg.experiment_id());
    for log in &epochs {
        let e = log.epoch + 1;
        sink.push(
            "meta_train",
            format!("meta_loss_epoch_{e:02}"),
            cfg.training.seed,
            None,
            log.mean_meta_loss,
        );
        sink.push(
            "meta_train",
            format!("base_loss_first_epoch_{e:02}"),
            cfg.training.seed,
            None,
            log.mean_base_loss_first,
        );
        sink.push(
            "meta_train",
            format!("base_loss_last_epoch_{e:02}"),
            cfg.training.seed,
            None,
            log.mean_base_loss_last,
        );
    }
    emit_results(sink.records(), &results_dir(cfg), "meta_train")?;
    Ok(MetaTrainSummary {
        epochs,
        resumed_from,
        checkpoint: final_path,
    })
}

fn load_meta(cfg: &ExperimentConfig) -> Result<MetaLearnerState> {
    let path = cfg.out_dir.join(META_CKPT);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run meta-train first",
            path.display()
        )));
    }
    load_checked_state(cfg, &path)
}

/// Adapts the meta-trained model to the target and evaluates it.
pub fn run_adapt(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let split = load_split(cfg)?;
    let meta = load_meta(cfg)?;
    let adapted = eval::adapt(&cfg.arch, &meta.params, &split.target, &cfg.adaptation)?;
    checkpoint::save_params(&cfg.arch, &adapted, &checkpoint_path(cfg, ADAPTED_CKPT)?)?;
    let report = eval::evaluate(&cfg.arch, &adapted, &split.target, &split.sources)?;
    let mut sink = RecordSink::new(cfg.experiment_id());
    sink.push_report("adapted", cfg.adaptation.seed, Some(cfg.adaptation.budget), &report);
    emit_results(sink.records(), &results_dir(cfg), "adapt")?;
    Ok(report)
}

/// Scores of the unadapted, adapted and from-scratch models.
pub struct Comparison {
    pub meta: EvalReport,
    pub adapted: EvalReport,
    pub scratch: EvalReport,
}

/// Compares the meta model before and after adaptation with a network
/// trained from scratch on the same target budget.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<Comparison> {
    let split = load_split(cfg)?;
    let meta = load_meta(cfg)?;
    let a = &cfg.adaptation;
    let adapted = eval::adapt(&cfg.arch, &meta.params, &split.target, a)?;
    let scratch = eval::from_scratch(&cfg.arch, &split.target, a)?;
    let cmp = Comparison {
        meta: eval::evaluate(&cfg.arch, &meta.params, &split.target, &split.sources)?,
        adapted: eval::evaluate(&cfg.arch, &adapted, &split.target, &split.sources)?,
        scratch: eval::evaluate(&cfg.arch, &scratch, &split.target, &split.sources)?,
    };
    let mut sink = RecordSink::new(cfg.experiment_id());
    sink.push_report("meta", a.seed, None, &cmp.meta);
    sink.push_report("adapted", a.seed, Some(a.budget), &cmp.adapted);
    sink.push_report("scratch", a.seed, Some(a.budget), &cmp.scratch);
    emit_results(sink.records(), &results_dir(cfg), "evaluate")?;
    Ok(cmp)
}

pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
    pub summary: PathBuf,
}

/// Adapts at every configured budget and seed, writing per-run records and
/// a per-budget summary.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let split = load_split(cfg)?;
    let meta = load_meta(cfg)?;
    let cells = eval::budget_sweep(
        &cfg.arch,
        &meta.params,
        &split.target,
        &split.sources,
        &cfg.sweep.budgets,
        &cfg.sweep.seeds,
        &cfg.adaptation,
    )?;
    let mut sink = RecordSink::new(cfg.experiment_id());
    for cell in &cells {
        sink.push_report("sweep", cell.seed, Some(cell.budget), &cell.report);
    }
    let dir = results_dir(cfg);
    emit_results(sink.records(), &dir, "sweep")?;
    let rows = eval::summarize_sweep(&cells);
    let summary = dir.join("sweep_summary.csv");
    write_sweep_summary(&rows, &summary)?;
    Ok(SweepOutcome { cells, rows, summary })
}

/// Gradient check of the configured network on a few synthetic trials,
/// with batch-norm statistics recorded from one training pass.
pub fn run_grad_check(cfg: &ExperimentConfig, gc: &GradCheckConfig, batch: usize) -> Result<GradCheckReport> {
    let synth_cfg = SynthConfig {
        n_subjects: 1,
        trials_per_subject: batch.div_ceil(cfg.synth.n_classes).max(1) * cfg.synth.n_classes,
        ..cfg.synth.clone()
    };
    let subject = synth::gen_subject(&synth_cfg, 0)?;
    let picked: Vec<usize> = (0..batch.min(subject.n_trials())).collect();
    let (x, labels) = subject.select(&picked)?;
    let mut params = network::init_parameters(&cfg.arch, cfg.training.seed)?;
    let mut dropout = <network::TrainRng as rand::SeedableRng>::seed_from_u64(cfg.training.seed);
    let warm = network::loss_and_grad(
        &cfg.arch,
        &params,
        &x,
        &labels,
        Mode::Train,
        GradScope::None,
        Some(&mut dropout),
    )?;
    params.absorb_batch_stats(&warm.bn_updates, BN_MOMENTUM)?;
    gradcheck::network_grad_check(&cfg.arch, &params, &x, &labels, gc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let toml = format!(
            r#"
name = "tiny"
seed = 3
out_dir = "{}"

[synth]
n_subjects = 4
channels = 3
samples = 32
trials_per_subject = 40

[arch]
channels = 3
samples = 32
f1 = 2
depth = 2
f2 = 3
temporal_kernel = 5
separable_kernel = 4
hidden = 6

[training]
pretrain_epochs = 2
base_steps = 2
tasks_per_batch = 2
n_tasks = 4
task_size = 8
base_size = 4
meta_size = 4
meta_epochs = 2

[adaptation]
budget = 8
epochs = 2
batch = 4

[sweep]
budgets = [4, 8]
seeds = [0, 1]
"#,
            dir.display()
        );
        ExperimentConfig::from_toml(&toml).unwrap().resolved().unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[training]\nalpha = 0.1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let cfg = ExperimentConfig {
            seed: Some(42),
            ..ExperimentConfig::default()
        }
        .resolved()
        .unwrap();
        assert_eq!((cfg.synth.seed, cfg.training.seed, cfg.adaptation.seed), (42, 42, 42));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.arch.channels = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_results_have_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = emit_results(&[], dir.path(), "empty").unwrap();
        assert_eq!(
            fs::read_to_string(csv).unwrap(),
            "experiment,phase,metric,seed,budget,value\n"
        );
        assert_eq!(fs::read_to_string(json).unwrap().trim(), "[]");
    }

    #[test]
    fn records_are_validated_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = RecordSink::new("x");
        sink.push("adapted", "target_acc", 0, Some(30), 0.5);
        sink.push("adapted", "target_acc", 1, Some(30), 0.75);
        sink.push("pretrain", "loss_epoch_01", 0, None, 1.25);
        let (csv, _) = emit_results(sink.records(), dir.path(), "r").unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("x,pretrain,loss_epoch_01,0,,1.25"));

        sink.push("adapted", "target_acc", 1, Some(30), 0.7);
        assert!(matches!(
            emit_results(sink.records(), dir.path(), "r"),
            Err(Error::Metric(_))
        ));
        let mut bad = RecordSink::new("x");
        bad.push("p", "m", 0, None, Real::NAN);
        assert!(matches!(
            emit_results(bad.records(), dir.path(), "r"),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn output_guard_refuses_foreign_experiments() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        prepare_output(&cfg, false).unwrap();
        prepare_output(&cfg, false).unwrap();
        let other = ExperimentConfig {
            seed: Some(4),
            ..cfg.clone()
        }
        .resolved()
        .unwrap();
        assert_ne!(other.experiment_id(), cfg.experiment_id());
        assert!(matches!(prepare_output(&other, false), Err(Error::Config(_))));
        prepare_output(&other, true).unwrap();
    }

    #[test]
    fn pipeline_end_to_end_is_reproducible() {
        let run = |dir: &Path| {
            let cfg = tiny(dir);
            prepare_output(&cfg, false).unwrap();
            gen_data(&cfg).unwrap();
            run_pretrain(&cfg).unwrap();
            run_meta_train(&cfg, false).unwrap();
            run_adapt(&cfg).unwrap();
            let cmp = run_evaluate(&cfg).unwrap();
            let sweep = run_sweep(&cfg).unwrap();
            assert_eq!(sweep.rows.len(), 2);
            assert_eq!(sweep.cells.len(), 4);
            assert_eq!(fs::read_to_string(&sweep.summary).unwrap().lines().count(), 3);
            cmp.adapted
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(run(a.path()), run(b.path()));
        for file in [
            "evaluate.csv",
            "adapt.csv",
            "sweep.csv",
            "meta_train.csv",
            "pretrain.csv",
        ] {
            let fa = fs::read(a.path().join(RESULTS_DIR).join(file)).unwrap();
            let fb = fs::read(b.path().join(RESULTS_DIR).join(file)).unwrap();
            assert_eq!(fa, fb, "{file}");
        }
        let ca = fs::read(a.path().join(META_CKPT)).unwrap();
        assert_eq!(ca, fs::read(b.path().join(META_CKPT)).unwrap());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_meta_train(&cfg, false).unwrap();
        let full = fs::read(dir.path().join(META_CKPT)).unwrap();

        let short = ExperimentConfig {
            training: TrainingConfig {
                meta_epochs: 1,
                ..cfg.training.clone()
            },
            ..cfg.clone()
        };
        let dir2 = tempfile::tempdir().unwrap();
        let short = ExperimentConfig {
            out_dir: dir2.path().to_path_buf(),
            ..short
        };
        run_meta_train(&short, false).unwrap();
        let resumed_cfg = ExperimentConfig {
            out_dir: dir2.path().to_path_buf(),
            ..cfg.clone()
        };
        let summary = run_meta_train(&resumed_cfg, true).unwrap();
        assert_eq!(summary.resumed_from, Some(1));
        assert_eq!(summary.epochs.len(), 1);
        assert_eq!(fs::read(dir2.path().join(META_CKPT)).unwrap(), full);
    }

    #[test]
    fn adapt_without_meta_checkpoint_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        assert!(matches!(run_adapt(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn stale_dataset_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        gen_data(&cfg).unwrap();
        let mut changed = cfg.clone();
        changed.synth.noise = 0.1;
        assert!(matches!(load_split(&changed), Err(Error::Config(_))));
    }

    #[cfg_attr(feature = "f32", ignore = "tolerance assumes 64-bit precision")]
    #[test]
    fn grad_check_pipeline_passes_at_small_scale() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = run_grad_check(&cfg, &GradCheckConfig::default(), 4).unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
