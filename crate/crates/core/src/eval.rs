//! Target-subject adaptation, classification metrics, knowledge-retention
//! evaluation and the target-data budget sweep.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Mode, BN_MOMENTUM};
use crate::network::{self, ArchConfig, GradScope, ParameterSet};
use crate::optim::{self, AdamConfig, AdamState};
use crate::rng::{self, Domain};
use crate::synth::SubjectDataset;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Number of target train trials drawn, stratified by class.
    pub budget: usize,
    pub epochs: u32,
    pub lr: Real,
    pub batch: usize,
    /// Tune only the prediction head, keeping the representation fixed.
    pub freeze_rep: bool,
    /// Fold target batch statistics into the normalization running
    /// averages. Off by default: the running averages then keep describing
    /// the source population the representation was trained on.
    pub update_bn_stats: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            budget: 30,
            epochs: 20,
            lr: 0.001,
            batch: 10,
            freeze_rep: false,
            update_bn_stats: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.budget < n_classes {
            return Err(Error::Config(format!(
                "adaptation budget {} is below the number of classes {n_classes}",
                self.budget
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("adaptation batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("adaptation lr must be positive".into()));
        }
        Ok(())
    }
}

/// Converts seconds of recording into a whole number of trials.
pub fn trials_for_seconds(seconds: f64, trial_seconds: f64) -> Result<usize> {
    if !(trial_seconds > 0.0) || !(seconds >= 0.0) || !seconds.is_finite() {
        return Err(Error::Config(format!(
            "cannot convert {seconds} s into trials of {trial_seconds} s"
        )));
    }
    Ok((seconds / trial_seconds - 1e-9).ceil().max(0.0) as usize)
}

/// Class-stratified draw of `budget` train trials. Classes get
/// `budget / n_classes` trials each and the remainder goes one apiece to
/// the lowest classes. Draws for a fixed seed are nested across budgets.
pub fn stratified_budget(target: &SubjectDataset, budget: usize, seed: u64) -> Result<Vec<usize>> {
    let k = target.n_classes;
    if budget < k {
        return Err(Error::Config(format!("budget {budget} cannot cover {k} classes")));
    }
    if budget > target.train.len() {
        return Err(Error::Data(format!(
            "budget {budget} exceeds the {} train trials of subject {}",
            target.train.len(),
            target.id
        )));
    }
    let mut rng = rng::stream(seed, Domain::AdaptSample, target.id as u64);
    let mut picked = Vec::with_capacity(budget);
    for (class, mut pool) in target.train_by_class().into_iter().enumerate() {
        let want = budget / k + usize::from(class < budget % k);
        if pool.len() < want {
            return Err(Error::Data(format!(
                "subject {} has {} train trials of class {class}, budget needs {want}",
                target.id,
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        picked.extend_from_slice(&pool[..want]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Fine-tunes a copy of `meta` on a stratified budget of target train data.
pub fn adapt(
    arch: &ArchConfig,
    meta: &ParameterSet,
    target: &SubjectDataset,
    cfg: &AdaptConfig,
) -> Result<ParameterSet> {
    cfg.validate(target.n_classes)?;
    let picked = stratified_budget(target, cfg.budget, cfg.seed)?;
    fine_tune(arch, meta.clone(), target, &picked, cfg)
}

/// Trains a randomly initialized network on the same budget and schedule
/// as [`adapt`], with no source knowledge.
pub fn from_scratch(arch: &ArchConfig, target: &SubjectDataset, cfg: &AdaptConfig) -> Result<ParameterSet> {
    cfg.validate(target.n_classes)?;
    let picked = stratified_budget(target, cfg.budget, cfg.seed)?;
    let mut init = rng::stream(cfg.seed, Domain::ScratchInit, 0);
    let rep = network::init_rep(arch, &mut init);
    let pred = network::init_pred(arch, &mut init);
    let scratch = AdaptConfig {
        freeze_rep: false,
        update_bn_stats: true,
        ..cfg.clone()
    };
    fine_tune(arch, ParameterSet::new(rep, pred)?, target, &picked, &scratch)
}

fn fine_tune(
    arch: &ArchConfig,
    mut params: ParameterSet,
    target: &SubjectDataset,
    picked: &[usize],
    cfg: &AdaptConfig,
) -> Result<ParameterSet> {
    let scope = if cfg.freeze_rep {
        GradScope::PredOnly
    } else {
        GradScope::All
    };
    let mut adam = if cfg.freeze_rep {
        AdamState::new(params.pred.iter())
    } else {
        AdamState::new(params.trainable())
    };
    let mut dropout = rng::stream(cfg.seed, Domain::AdaptDropout, target.id as u64);
    let mut order = picked.to_vec();
    for epoch in 0..cfg.epochs {
        order.copy_from_slice(picked);
        order.shuffle(&mut rng::stream(cfg.seed, Domain::AdaptShuffle, epoch as u64));
        for batch in order.chunks(cfg.batch) {
            let (x, y) = target.select(batch)?;
            let out = network::loss_and_grad(arch, &params, &x, &y, Mode::Train, scope, Some(&mut dropout))?;
            optim::adam_step(&mut params, &out.grads, &mut adam, cfg.lr, &cfg.adam)?;
            if cfg.update_bn_stats && !cfg.freeze_rep {
                params.absorb_batch_stats(&out.bn_updates, BN_MOMENTUM)?;
            }
        }
    }
    Ok(params)
}

/// Fraction of positions where `predicted` matches `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<Real> {
    if predicted.is_empty() {
        return Err(Error::Input("accuracy of an empty prediction set".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as Real / predicted.len() as Real)
}

/// Area under the ROC curve for one positive class, from the Mann–Whitney
/// rank statistic with midranks for ties.
pub fn binary_auc(scores: &[Real], positive: &[bool]) -> Result<Real> {
    if scores.len() != positive.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled midranks over positives keeps everything integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_midrank = (start + 1 + end) as u64;
        let tied_pos = order[start..end].iter().filter(|&&i| positive[i]).count() as u64;
        doubled_rank_sum += doubled_midrank * tied_pos;
        start = end;
    }
    let n_pos = n_pos as u64;
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as Real / (2 * n_pos * n_neg as u64) as Real)
}

/// Macro-averaged one-vs-rest AUC over the columns of `scores`.
pub fn roc_auc_macro(scores: &Tensor, labels: &[usize]) -> Result<Real> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Input(format!(
            "scores {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::Input("AUC of an empty sample".into()));
    }
    let mut total = 0.0;
    for class in 0..k {
        if !labels.contains(&class) {
            return Err(Error::Metric(format!("class {class} is absent from the labels")));
        }
        let column: Vec<Real> = (0..n).map(|i| scores.data()[i * k + class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += binary_auc(&column, &positive)?;
    }
    Ok(total / k as Real)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: u32,
    pub accuracy: Real,
    pub auc: Real,
}

/// Accuracy and AUC of `params` on the eval split of `ds`.
pub fn score_subject(arch: &ArchConfig, params: &ParameterSet, ds: &SubjectDataset) -> Result<SubjectScore> {
    if ds.eval.is_empty() {
        return Err(Error::Data(format!("subject {} has an empty eval split", ds.id)));
    }
    let (x, y) = ds.select(&ds.eval)?;
    let logits = network::predict_logits(arch, params, &x)?;
    let probs = network::softmax(&logits)?;
    Ok(SubjectScore {
        subject: ds.id,
        accuracy: accuracy(&network::argmax_rows(&logits), &y)?,
        auc: roc_auc_macro(&probs, &y)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub per_source: Vec<SubjectScore>,
    pub avg_acc: Real,
    pub avg_ra: Real,
}

/// Eval-split scores on every source subject and their means.
pub fn retention_eval(arch: &ArchConfig, params: &ParameterSet, sources: &[SubjectDataset]) -> Result<RetentionReport> {
    if sources.is_empty() {
        return Err(Error::Data("retention evaluation needs source subjects".into()));
    }
    let per_source = sources
        .iter()
        .map(|ds| score_subject(arch, params, ds))
        .collect::<Result<Vec<_>>>()?;
    let n = per_source.len() as Real;
    let avg_acc = per_source.iter().map(|s| s.accuracy).sum::<Real>() / n;
    let avg_ra = per_source.iter().map(|s| s.auc).sum::<Real>() / n;
    Ok(RetentionReport {
        per_source,
        avg_acc,
        avg_ra,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: SubjectScore,
    pub retention: RetentionReport,
}

pub fn evaluate(
    arch: &ArchConfig,
    params: &ParameterSet,
    target: &SubjectDataset,
    sources: &[SubjectDataset],
) -> Result<EvalReport> {
    Ok(EvalReport {
        target: score_subject(arch, params, target)?,
        retention: retention_eval(arch, params, sources)?,
    })
}

/// One adapted model of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub budget: usize,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Real,
    pub std: Real,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[Real]) -> Self {
        let n = values.len() as Real;
        let mean = values.iter().sum::<Real>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub runs: usize,
    pub target_acc: MeanStd,
    pub target_auc: MeanStd,
    pub avg_acc: MeanStd,
    pub avg_ra: MeanStd,
}

/// Adapts and evaluates once per `(budget, seed)`; budgets must be
/// strictly ascending.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    arch: &ArchConfig,
    meta: &ParameterSet,
    target: &SubjectDataset,
    sources: &[SubjectDataset],
    budgets: &[usize],
    seeds: &[u64],
    base: &AdaptConfig,
) -> Result<Vec<SweepCell>> {
    if budgets.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one budget and one seed".into()));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!(
            "sweep budgets {budgets:?} are not strictly ascending"
        )));
    }
    let mut cells = Vec::with_capacity(budgets.len() * seeds.len());
    for &budget in budgets {
        for &seed in seeds {
            let cfg = AdaptConfig {
                budget,
                seed,
                ..base.clone()
            };
            let adapted = adapt(arch, meta, target, &cfg)?;
            cells.push(SweepCell {
                budget,
                seed,
                report: evaluate(arch, &adapted, target, sources)?,
            });
        }
    }
    Ok(cells)
}

/// Groups cells by budget (ascending) and summarizes each group.
pub fn summarize_sweep(cells: &[SweepCell]) -> Vec<SweepRow> {
    let mut budgets: Vec<usize> = cells.iter().map(|c| c.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    budgets
        .into_iter()
        .map(|budget| {
            let group: Vec<&EvalReport> = cells.iter().filter(|c| c.budget == budget).map(|c| &c.report).collect();
            let stat = |f: fn(&EvalReport) -> Real| MeanStd::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                budget,
                runs: group.len(),
                target_acc: stat(|r| r.target.accuracy),
                target_auc: stat(|r| r.target.auc),
                avg_acc: stat(|r| r.retention.avg_acc),
                avg_ra: stat(|r| r.retention.avg_ra),
            }
        })
        .collect()
}

/// Spearman rank correlation with midranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[Real], y: &[Real]) -> Option<Real> {
    fn ranks(v: &[Real]) -> Vec<Real> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        while start < order.len() {
            let mut end = start + 1;
            while end < order.len() && v[order[end]] == v[order[start]] {
                end += 1;
            }
            let mid = (start + end + 1) as Real / 2.0;
            for &i in &order[start..end] {
                r[i] = mid;
            }
            start = end;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as Real;
    let (mx, my) = (rx.iter().sum::<Real>() / n, ry.iter().sum::<Real>() / n);
    let cov: Real = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: Real = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: Real = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
