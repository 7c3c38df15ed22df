//! Pretraining of the representation network and the episodic dual-learner
//! meta-training loop.
//!
//! Per episode the base learner `{θ, φ}` is copied from the meta learner
//! `{θ*, φ*}`, takes `base_steps` Adam steps on θ alone using `T_b`, and
//! then the gradient of the `T_m` loss with respect to all of its
//! parameters, taken at the updated base learner, is applied to `{θ*, φ*}`
//! by the persistent meta optimizer.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::GradientMap;
use crate::episodes::{self, EnsembleConfig, MetaTask};
use crate::error::{Error, Result};
use crate::kernels::{Mode, BN_MOMENTUM};
use crate::network::{self, ArchConfig, GradScope, ParameterSet, RepParams, TrainRng};
use crate::optim::{self, AdamConfig, AdamState, LrSchedule};
use crate::rng::{self, Domain};
use crate::synth::SubjectDataset;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pretrain_lr: Real,
    pub pretrain_epochs: u32,
    pub pretrain_batch: usize,
    /// Base-learner Adam learning rate α.
    pub base_lr: Real,
    /// Meta-learner Adam learning rate β.
    pub meta_lr: Real,
    /// Base-learner updates per episode.
    pub base_steps: usize,
    /// Tasks per sampled batch `K`.
    pub tasks_per_batch: usize,
    /// Ensemble size `M`.
    pub n_tasks: usize,
    /// Samples per task `m`.
    pub task_size: usize,
    /// `p`.
    pub base_size: usize,
    /// `q`.
    pub meta_size: usize,
    /// `l`; defaults to `min(3, L - 1)`.
    pub subjects_per_task: Option<usize>,
    pub meta_epochs: u32,
    pub lr_decay: Real,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: u32,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_lr: 0.01,
            pretrain_epochs: 10,
            pretrain_batch: 16,
            base_lr: 0.001,
            meta_lr: 0.001,
            base_steps: 10,
            tasks_per_batch: 12,
            n_tasks: 100,
            task_size: 20,
            base_size: 10,
            meta_size: 10,
            subjects_per_task: None,
            meta_epochs: 20,
            lr_decay: 0.2,
            lr_decay_every: 5,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_size + self.meta_size != self.task_size {
            return Err(Error::Config(format!(
                "base_size + meta_size = {} must equal task_size = {}",
                self.base_size + self.meta_size,
                self.task_size
            )));
        }
        let counts = [
            ("pretrain_batch", self.pretrain_batch),
            ("base_steps", self.base_steps),
            ("tasks_per_batch", self.tasks_per_batch),
            ("n_tasks", self.n_tasks),
            ("base_size", self.base_size),
            ("meta_size", self.meta_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("training.{name} must be positive")));
        }
        if self.tasks_per_batch > self.n_tasks {
            return Err(Error::Config(format!(
                "tasks_per_batch = {} exceeds n_tasks = {}",
                self.tasks_per_batch, self.n_tasks
            )));
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("base_lr", self.base_lr),
            ("meta_lr", self.meta_lr),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("training.{name} must be positive")));
            }
        }
        self.schedule(self.meta_lr)?;
        Ok(())
    }

    pub fn schedule(&self, base_lr: Real) -> Result<LrSchedule> {
        LrSchedule::new(base_lr, self.lr_decay, self.lr_decay_every)
    }

    pub fn ensemble(&self, n_sources: usize) -> EnsembleConfig {
        EnsembleConfig {
            n_tasks: self.n_tasks,
            task_size: self.task_size,
            subjects_per_task: self
                .subjects_per_task
                .unwrap_or_else(|| episodes::default_subjects_per_task(n_sources)),
        }
    }
}

/// Meta parameters `{φ*, θ*}` with everything needed to continue training
/// bit-for-bit.
#[derive(Clone, Debug)]
pub struct MetaLearnerState {
    pub params: ParameterSet,
    pub adam: AdamState,
    /// Completed meta epochs.
    pub epoch: u32,
    pub episodes: u64,
    /// Dropout stream of the episodic loop.
    pub rng: TrainRng,
}

impl MetaLearnerState {
    /// `φ* = rep`, `θ*` freshly initialized, zero meta moments.
    pub fn new(arch: &ArchConfig, rep: RepParams, seed: u64) -> Result<Self> {
        arch.validate()?;
        let pred = network::init_pred(arch, &mut rng::stream(seed, Domain::HeadInit, 0));
        let params = ParameterSet::new(rep, pred)?;
        let adam = AdamState::new(params.trainable());
        Ok(Self {
            params,
            adam,
            epoch: 0,
            episodes: 0,
            rng: rng::stream(seed, Domain::MetaDropout, 0),
        })
    }

    pub fn bitwise_eq(&self, other: &MetaLearnerState) -> bool {
        self.params.bitwise_eq(&other.params)
            && self.adam.bitwise_eq(&other.adam)
            && self.epoch == other.epoch
            && self.episodes == other.episodes
            && self.rng == other.rng
    }
}

/// Observation points inside an episode, used by tests and diagnostics.
pub trait EpisodeHooks {
    fn on_inherit(&mut self, _base: &ParameterSet, _meta: &ParameterSet, _base_adam: &AdamState) {}
    fn after_base_loop(&mut self, _base: &ParameterSet, _meta: &ParameterSet) {}
    fn after_meta_step(&mut self, _before: &ParameterSet, _after: &ParameterSet, _grads: &GradientMap) {}
}

pub struct NoHooks;

impl EpisodeHooks for NoHooks {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub base_loss_first: Real,
    pub base_loss_last: Real,
    pub meta_loss: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based epoch index.
    pub epoch: u32,
    pub base_lr: Real,
    pub meta_lr: Real,
    pub episodes: usize,
    pub mean_base_loss_first: Real,
    pub mean_base_loss_last: Real,
    pub mean_meta_loss: Real,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub rep: RepParams,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<Real>,
}

fn tag_episode(err: Error, episode: u64) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("episode {episode}: {msg}")),
        other => other,
    }
}

fn pooled_train(sources: &[SubjectDataset]) -> Vec<(usize, usize)> {
    sources
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.train.iter().map(move |&t| (s, t)))
        .collect()
}

/// Trains φ with a temporary prediction head on the pooled train splits of
/// all sources using SGD with step decay, then discards the head.
pub fn pretrain(sources: &[SubjectDataset], arch: &ArchConfig, cfg: &TrainingConfig) -> Result<PretrainOutcome> {
    if sources.is_empty() {
        return Err(Error::Data("pretraining needs at least one source subject".into()));
    }
    arch.validate()?;
    let schedule = cfg.schedule(cfg.pretrain_lr)?;
    let mut init_rng = rng::stream(cfg.seed, Domain::PretrainInit, 0);
    let rep = network::init_rep(arch, &mut init_rng);
    let head = network::init_pred(arch, &mut init_rng);
    let mut params = ParameterSet::new(rep, head)?;
    let mut dropout = rng::stream(cfg.seed, Domain::PretrainDropout, 0);

    let mut pool = pooled_train(sources);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs as usize);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = schedule.lr(epoch);
        pool.sort_unstable();
        pool.shuffle(&mut rng::stream(cfg.seed, Domain::PretrainShuffle, epoch as u64));
        let (mut total, mut count) = (0.0, 0usize);
        for batch in pool.chunks(cfg.pretrain_batch) {
            let refs: Vec<_> = batch
                .iter()
                .map(|&(s, t)| episodes::SampleRef {
                    subject: s,
                    trial: t,
                    label: sources[s].labels[t],
                })
                .collect();
            let (x, y) = episodes::gather(sources, &refs)?;
            let out = network::loss_and_grad(arch, &params, &x, &y, Mode::Train, GradScope::All, Some(&mut dropout))?;
            optim::sgd_step(&mut params, &out.grads, lr)?;
            params.absorb_batch_stats(&out.bn_updates, BN_MOMENTUM)?;
            total += out.loss * batch.len() as Real;
            count += batch.len();
        }
        let mean = total / count as Real;
        info!("pretrain epoch {} lr {lr:.2e} loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        rep: params.rep,
        epoch_losses,
    })
}

/// One base/meta episode on `task`, updating `state` in place.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    arch: &ArchConfig,
    cfg: &TrainingConfig,
    sources: &[SubjectDataset],
    state: &mut MetaLearnerState,
    task: &MetaTask,
    split_seed: u64,
    base_lr: Real,
    meta_lr: Real,
    hooks: &mut dyn EpisodeHooks,
) -> Result<EpisodeStats> {
    let episode = state.episodes;
    let mut base = state.params.clone();
    let mut base_adam = AdamState::new(base.pred.iter());
    hooks.on_inherit(&base, &state.params, &base_adam);

    let split = episodes::split_task(task, cfg.base_size, cfg.meta_size, split_seed)?;
    let (xb, yb) = episodes::gather(sources, &split.base)?;
    let (xm, ym) = episodes::gather(sources, &split.meta)?;

    let (mut first, mut last) = (0.0, 0.0);
    for step in 0..cfg.base_steps {
        let out = network::loss_and_grad(
            arch,
            &base,
            &xb,
            &yb,
            Mode::Train,
            GradScope::PredOnly,
            Some(&mut state.rng),
        )
        .map_err(|e| tag_episode(e, episode))?;
        optim::adam_step(&mut base, &out.grads, &mut base_adam, base_lr, &cfg.adam)?;
        base.absorb_batch_stats(&out.bn_updates, BN_MOMENTUM)?;
        if step == 0 {
            first = out.loss;
        }
        last = out.loss;
    }
    hooks.after_base_loop(&base, &state.params);

    let out = network::loss_and_grad(arch, &base, &xm, &ym, Mode::Train, GradScope::All, Some(&mut state.rng))
        .map_err(|e| tag_episode(e, episode))?;
    let before = state.params.clone();
    optim::adam_step(&mut state.params, &out.grads, &mut state.adam, meta_lr, &cfg.adam)?;
    state.params.absorb_batch_stats(&out.bn_updates, BN_MOMENTUM)?;
    for (name, t) in state.params.trainable() {
        t.ensure_finite(&format!("episode {episode}: meta parameter {name}"))?;
    }
    hooks.after_meta_step(&before, &state.params, &out.grads);
    state.episodes += 1;
    Ok(EpisodeStats {
        base_loss_first: first,
        base_loss_last: last,
        meta_loss: out.loss,
    })
}

/// Episodic trainer over a fixed task ensemble.
pub struct MetaTrainer<'a> {
    arch: &'a ArchConfig,
    cfg: &'a TrainingConfig,
    sources: &'a [SubjectDataset],
    ensemble: Vec<MetaTask>,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(sources: &'a [SubjectDataset], arch: &'a ArchConfig, cfg: &'a TrainingConfig) -> Result<Self> {
        arch.validate()?;
        cfg.validate()?;
        let ensemble = episodes::build_meta_ensemble(sources, &cfg.ensemble(sources.len()), cfg.seed)?;
        Ok(Self {
            arch,
            cfg,
            sources,
            ensemble,
        })
    }

    pub fn ensemble(&self) -> &[MetaTask] {
        &self.ensemble
    }

    /// Pretrains φ and sets up `{φ*, θ*}`.
    pub fn initial_state(&self) -> Result<(MetaLearnerState, Vec<Real>)> {
        let pre = pretrain(self.sources, self.arch, self.cfg)?;
        let state = MetaLearnerState::new(self.arch, pre.rep, self.cfg.seed)?;
        Ok((state, pre.epoch_losses))
    }

    /// One pass over the ensemble in batches of `K` tasks, episodes run
    /// sequentially.
    pub fn run_epoch(&self, state: &mut MetaLearnerState, hooks: &mut dyn EpisodeHooks) -> Result<EpochLog> {
        let epoch = state.epoch;
        let base_lr = self.cfg.schedule(self.cfg.base_lr)?.lr(epoch);
        let meta_lr = self.cfg.schedule(self.cfg.meta_lr)?.lr(epoch);
        let order_seed = self.cfg.seed ^ ((epoch as u64 + 1) << 32);
        let n = self.ensemble.len();
        let (mut first, mut last, mut meta) = (0.0, 0.0, 0.0);
        let mut count = 0usize;
        let mut cursor = 0;
        while cursor < n {
            let (batch, next) = episodes::sample_task_batch(n, self.cfg.tasks_per_batch, order_seed, cursor)?;
            for (offset, &task_idx) in batch.iter().enumerate() {
                let position = (cursor + offset) as u64;
                let split_seed = self.cfg.seed ^ ((epoch as u64) << 40) ^ (position << 16) ^ task_idx as u64;
                let stats = run_episode(
                    self.arch,
                    self.cfg,
                    self.sources,
                    state,
                    &self.ensemble[task_idx],
                    split_seed,
                    base_lr,
                    meta_lr,
                    hooks,
                )?;
                first += stats.base_loss_first;
                last += stats.base_loss_last;
                meta += stats.meta_loss;
                count += 1;
            }
            cursor = next;
        }
        state.epoch += 1;
        let c = count as Real;
        let log = EpochLog {
            epoch,
            base_lr,
            meta_lr,
            episodes: count,
            mean_base_loss_first: first / c,
            mean_base_loss_last: last / c,
            mean_meta_loss: meta / c,
        };
        debug!("{log:?}");
        info!(
            "meta epoch {} meta loss {:.4} base loss {:.4} -> {:.4}",
            epoch + 1,
            log.mean_meta_loss,
            log.mean_base_loss_first,
            log.mean_base_loss_last
        );
        Ok(log)
    }

    /// Runs epochs until `cfg.meta_epochs` are complete, calling `on_epoch`
    /// after each one (e.g. to checkpoint).
    pub fn train_to_completion(
        &self,
        state: &mut MetaLearnerState,
        hooks: &mut dyn EpisodeHooks,
        mut on_epoch: impl FnMut(&MetaLearnerState, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while state.epoch < self.cfg.meta_epochs {
            let log = self.run_epoch(state, hooks)?;
            on_epoch(state, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub state: MetaLearnerState,
    pub pretrain_losses: Vec<Real>,
    pub epochs: Vec<EpochLog>,
}

/// Pretraining followed by the full episodic schedule.
pub fn meta_train(sources: &[SubjectDataset], arch: &ArchConfig, cfg: &TrainingConfig) -> Result<MetaTrainOutcome> {
    let trainer = MetaTrainer::new(sources, arch, cfg)?;
    let (mut state, pretrain_losses) = trainer.initial_state()?;
    let epochs = trainer.train_to_completion(&mut state, &mut NoHooks, |_, _| Ok(()))?;
    Ok(MetaTrainOutcome {
        state,
        pretrain_losses,
        epochs,
    })
}
