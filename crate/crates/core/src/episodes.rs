//! Meta-task ensemble construction and per-episode base/meta splits.
//!
//! Tasks hold references into the source datasets (subject position and
//! trial index), never copies of the trials.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::synth::SubjectDataset;
use crate::tensor::Tensor;

/// One trial of one source subject. `subject` indexes the sources slice the
/// ensemble was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub subject: usize,
    pub trial: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub samples: Vec<SampleRef>,
}

impl MetaTask {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.subject).collect()
    }
}

/// Disjoint base (`T_b`) and meta (`T_m`) parts of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSplit {
    pub base: Vec<SampleRef>,
    pub meta: Vec<SampleRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of tasks `M`.
    pub n_tasks: usize,
    /// Samples per task `m`.
    pub task_size: usize,
    /// Subjects per task `l`; must be smaller than the number of sources.
    pub subjects_per_task: usize,
}

/// `min(3, L - 1)`.
pub fn default_subjects_per_task(n_sources: usize) -> usize {
    3.min(n_sources.saturating_sub(1))
}

/// Builds `M` tasks. Each picks `l` distinct subjects uniformly, spreads the
/// `m` slots over them as evenly as possible, balances classes to within one
/// sample, and draws trials without replacement from the train splits.
pub fn build_meta_ensemble(sources: &[SubjectDataset], cfg: &EnsembleConfig, seed: u64) -> Result<Vec<MetaTask>> {
    let n_sources = sources.len();
    let l = cfg.subjects_per_task;
    let m = cfg.task_size;
    if l == 0 || l >= n_sources {
        return Err(Error::Config(format!(
            "subjects per task must satisfy 0 < l < L, got l={l} with L={n_sources}"
        )));
    }
    if cfg.n_tasks == 0 {
        return Err(Error::Config("the ensemble needs at least one task".into()));
    }
    let n_classes = sources[0].n_classes;
    if sources.iter().any(|s| s.n_classes != n_classes) {
        return Err(Error::Data("source subjects disagree on the number of classes".into()));
    }
    if m < l || m < n_classes {
        return Err(Error::Config(format!(
            "task size {m} cannot cover {l} subjects and {n_classes} classes"
        )));
    }
    let per_subject = m.div_ceil(l);
    if let Some(s) = sources.iter().find(|s| s.train.len() < per_subject) {
        return Err(Error::Data(format!(
            "subject {} has {} train samples, tasks need {per_subject}",
            s.id,
            s.train.len()
        )));
    }
    let pools: Vec<Vec<Vec<usize>>> = sources.iter().map(SubjectDataset::train_by_class).collect();

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let mut rng = rng::stream(seed, Domain::Ensemble, t as u64);
        let chosen = index::sample(&mut rng, n_sources, l).into_vec();

        let mut class_order: Vec<usize> = (0..n_classes).collect();
        class_order.shuffle(&mut rng);
        let slot_class: Vec<usize> = (0..m).map(|i| class_order[i % n_classes]).collect();
        let mut slot_subject: Vec<usize> = (0..m).map(|i| chosen[i % l]).collect();
        slot_subject.shuffle(&mut rng);

        let mut counts = vec![vec![0usize; n_classes]; n_sources];
        for (&s, &c) in slot_subject.iter().zip(&slot_class) {
            counts[s][c] += 1;
        }
        let mut samples = Vec::with_capacity(m);
        for &s in &chosen {
            for c in 0..n_classes {
                let need = counts[s][c];
                if need == 0 {
                    continue;
                }
                let pool = &pools[s][c];
                if pool.len() < need {
                    return Err(Error::Data(format!(
                        "subject {} has {} train samples of class {c}, task needs {need}",
                        sources[s].id,
                        pool.len()
                    )));
                }
                for i in index::sample(&mut rng, pool.len(), need) {
                    samples.push(SampleRef {
                        subject: s,
                        trial: pool[i],
                        label: c,
                    });
                }
            }
        }
        samples.shuffle(&mut rng);
        tasks.push(MetaTask { samples });
    }
    Ok(tasks)
}

/// Seeded shuffle of the task, then the first `p` samples form `T_b` and the
/// remaining `q` form `T_m`.
pub fn split_task(task: &MetaTask, p: usize, q: usize, seed: u64) -> Result<EpisodeSplit> {
    if p == 0 || q == 0 || p + q != task.len() {
        return Err(Error::Config(format!(
            "split sizes p={p}, q={q} must be positive and sum to the task size {}",
            task.len()
        )));
    }
    let mut rng = rng::stream(seed, Domain::Split, 0);
    let mut samples = task.samples.clone();
    samples.shuffle(&mut rng);
    let meta = samples.split_off(p);
    Ok(EpisodeSplit { base: samples, meta })
}

/// Next batch of at most `k` task indices from the epoch's seeded
/// permutation, starting at `cursor`. Returns the indices and the advanced
/// cursor; a cursor equal to the ensemble size marks the end of the epoch.
pub fn sample_task_batch(n_tasks: usize, k: usize, seed: u64, cursor: usize) -> Result<(Vec<usize>, usize)> {
    if n_tasks == 0 {
        return Err(Error::State("cannot sample from an empty ensemble".into()));
    }
    if k == 0 || k > n_tasks {
        return Err(Error::Config(format!("batch size {k} must lie in 1..={n_tasks}")));
    }
    let mut order: Vec<usize> = (0..n_tasks).collect();
    order.shuffle(&mut rng::stream(seed, Domain::TaskOrder, 0));
    let start = cursor.min(n_tasks);
    let end = (start + k).min(n_tasks);
    Ok((order[start..end].to_vec(), end))
}

/// Stacks referenced trials into `[n, 1, C, T]` with their labels.
pub fn gather(sources: &[SubjectDataset], refs: &[SampleRef]) -> Result<(Tensor, Vec<usize>)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Data("no source subjects".into()))?;
    let inner = first.channels() * first.samples();
    let mut data = Vec::with_capacity(refs.len() * inner);
    let mut labels = Vec::with_capacity(refs.len());
    for r in refs {
        let ds = sources
            .get(r.subject)
            .ok_or_else(|| Error::Data(format!("task references missing subject #{}", r.subject)))?;
        let row = ds
            .trials
            .data()
            .get(r.trial * inner..(r.trial + 1) * inner)
            .ok_or_else(|| Error::Data(format!("trial {} out of range for subject {}", r.trial, ds.id)))?;
        data.extend_from_slice(row);
        labels.push(r.label);
    }
    let x = Tensor::new(&[refs.len(), 1, first.channels(), first.samples()], data)?;
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_subjects, SynthConfig};
    use proptest::prelude::*;

    fn sources(n: usize) -> Vec<SubjectDataset> {
        gen_subjects(&SynthConfig {
            n_subjects: n,
            trials_per_subject: 40,
            samples: 32,
            channels: 2,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn ensemble_cfg() -> EnsembleConfig {
        EnsembleConfig {
            n_tasks: 30,
            task_size: 20,
            subjects_per_task: 3,
        }
    }

    #[test]
    fn tasks_have_m_samples_from_l_subjects() {
        let src = sources(6);
        let tasks = build_meta_ensemble(&src, &ensemble_cfg(), 1).unwrap();
        assert_eq!(tasks.len(), 30);
        for t in &tasks {
            assert_eq!(t.len(), 20);
            assert_eq!(t.subjects().len(), 3);
            let distinct: BTreeSet<_> = t.samples.iter().map(|s| (s.subject, s.trial)).collect();
            assert_eq!(distinct.len(), 20);
        }
    }

    #[test]
    fn tasks_are_stratified_and_train_only() {
        let src = sources(6);
        for t in build_meta_ensemble(&src, &ensemble_cfg(), 2).unwrap() {
            let mut hist = [0usize; 4];
            for s in &t.samples {
                hist[s.label] += 1;
                let ds = &src[s.subject];
                assert!(ds.train.contains(&s.trial));
                assert!(!ds.eval.contains(&s.trial));
                assert_eq!(ds.labels[s.trial], s.label);
            }
            assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn subject_count_bounds() {
        let one = sources(1);
        let cfg = EnsembleConfig {
            subjects_per_task: 1,
            ..ensemble_cfg()
        };
        assert!(matches!(build_meta_ensemble(&one, &cfg, 0), Err(Error::Config(_))));
        assert_eq!(default_subjects_per_task(7), 3);
        assert_eq!(default_subjects_per_task(3), 2);
    }

    #[test]
    fn insufficient_samples_name_the_subject() {
        let src = sources(3);
        let cfg = EnsembleConfig {
            n_tasks: 2,
            task_size: 80,
            subjects_per_task: 2,
        };
        let err = build_meta_ensemble(&src, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("subject 0")), "{err}");
    }

    #[test]
    fn ensemble_is_reproducible() {
        let src = sources(4);
        let a = build_meta_ensemble(&src, &ensemble_cfg(), 9).unwrap();
        assert_eq!(a, build_meta_ensemble(&src, &ensemble_cfg(), 9).unwrap());
        assert_ne!(a, build_meta_ensemble(&src, &ensemble_cfg(), 10).unwrap());
    }

    #[test]
    fn split_examples() {
        let src = sources(4);
        let task = &build_meta_ensemble(&src, &ensemble_cfg(), 0).unwrap()[0];
        let split = split_task(task, 10, 10, 5).unwrap();
        assert_eq!((split.base.len(), split.meta.len()), (10, 10));
        let base: BTreeSet<_> = split.base.iter().collect();
        assert!(split.meta.iter().all(|s| !base.contains(s)));
        assert_eq!(split, split_task(task, 10, 10, 5).unwrap());
        assert!(matches!(split_task(task, 10, 9, 5), Err(Error::Config(_))));
        assert!(split_task(task, 0, 20, 5).is_err());
    }

    #[test]
    fn batches_cover_every_task_once() {
        let (m, k) = (100, 12);
        let mut cursor = 0;
        let mut seen = Vec::new();
        let mut batches = 0;
        while cursor < m {
            let (batch, next) = sample_task_batch(m, k, 4, cursor).unwrap();
            assert!(batch.len() <= k);
            seen.extend(batch);
            cursor = next;
            batches += 1;
        }
        assert_eq!(batches, m.div_ceil(k));
        seen.sort_unstable();
        assert_eq!(seen, (0..m).collect::<Vec<_>>());

        let order = |seed| {
            let mut all = Vec::new();
            let mut c = 0;
            while c < m {
                let (b, n) = sample_task_batch(m, k, seed, c).unwrap();
                all.extend(b);
                c = n;
            }
            all
        };
        assert_ne!(order(1), order(2));
        assert!(matches!(sample_task_batch(0, 1, 0, 0), Err(Error::State(_))));
    }

    #[test]
    fn gather_stacks_referenced_trials() {
        let src = sources(2);
        let refs = [
            SampleRef {
                subject: 1,
                trial: 3,
                label: src[1].labels[3],
            },
            SampleRef {
                subject: 0,
                trial: 0,
                label: src[0].labels[0],
            },
        ];
        let (x, y) = gather(&src, &refs).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 32]);
        assert_eq!(&x.data()[..64], &src[1].trials.data()[3 * 64..4 * 64]);
        assert_eq!(y, vec![src[1].labels[3], src[0].labels[0]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stratification_holds_for_any_seed(seed in any::<u64>(), m in 4usize..24, l in 1usize..4) {
            let src = sources(4);
            let cfg = EnsembleConfig { n_tasks: 3, task_size: m, subjects_per_task: l };
            let tasks = build_meta_ensemble(&src, &cfg, seed).unwrap();
            for t in tasks {
                prop_assert_eq!(t.len(), m);
                prop_assert_eq!(t.subjects().len(), l);
                let mut hist = [0usize; 4];
                for s in &t.samples { hist[s.label] += 1; }
                prop_assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
            }
        }
    }
}
