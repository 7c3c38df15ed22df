//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mups_core::eval::{self, AdaptConfig};
use mups_core::meta_trainer::{self, EpisodeHooks, MetaTrainer, TrainingConfig};
use mups_core::network::named_bitwise_eq;
use mups_core::optim::{adam_step, AdamConfig, AdamState};
use mups_core::synth::{gen_subjects, SynthConfig};
use mups_core::{ArchConfig, GradientMap, ParameterSet, Real, Tensor};

const MAIN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP_BUDGETS: [usize; 4] = [8, 16, 30, 60];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mups() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mups"))
}

fn mean(v: &[Real]) -> Real {
    v.iter().sum::<Real>() / v.len() as Real
}

// ---------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = mups()
        .args(["grad-check", "--quiet", "--out"])
        .arg(dir.path())
        .output()
        .expect("run mups grad-check");
    let secs = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err = stdout
        .split_whitespace()
        .skip_while(|w| *w != "error")
        .nth(1)
        .and_then(|w| w.parse::<f64>().ok());
    let precise = std::mem::size_of::<Real>() == 8;
    match err {
        Some(e) => outcome(
            precise && out.status.success() && e <= 1e-4 && secs < 60.0,
            format!("max relative error {e:.3e}, {secs:.1} s, 64-bit: {precise}"),
        ),
        None => outcome(false, format!("could not parse grad-check output: {stdout}")),
    }
}

#[derive(Default)]
struct ScopeAudit {
    episodes: usize,
    inherit_violations: usize,
    base_loop_violations: usize,
    meta_steps_nonzero: usize,
    meta_violations: usize,
}

fn grads_nonzero(grads: &GradientMap, prefix: &str) -> bool {
    grads
        .iter()
        .any(|(k, g)| k.starts_with(prefix) && g.data().iter().any(|&v| v != 0.0))
}

impl EpisodeHooks for ScopeAudit {
    fn on_inherit(&mut self, base: &ParameterSet, meta: &ParameterSet, adam: &AdamState) {
        self.episodes += 1;
        if !base.bitwise_eq(meta) || adam.t != 0 {
            self.inherit_violations += 1;
        }
    }

    fn after_base_loop(&mut self, base: &ParameterSet, meta: &ParameterSet) {
        if !named_bitwise_eq(&base.rep.tensors, &meta.rep.tensors) {
            self.base_loop_violations += 1;
        }
    }

    fn after_meta_step(&mut self, before: &ParameterSet, after: &ParameterSet, grads: &GradientMap) {
        if grads_nonzero(grads, "rep.") && grads_nonzero(grads, "pred.") {
            self.meta_steps_nonzero += 1;
            let rep_changed = !named_bitwise_eq(&before.rep.tensors, &after.rep.tensors);
            let pred_changed = !named_bitwise_eq(&before.pred, &after.pred);
            if !(rep_changed && pred_changed) {
                self.meta_violations += 1;
            }
        }
    }
}

/// Episodes at the default architecture over several randomly drawn
/// ensembles and seeds.
fn audit_episodes() -> ScopeAudit {
    let arch = ArchConfig::default();
    let mut audit = ScopeAudit::default();
    for seed in 0..3u64 {
        let subjects = gen_subjects(&SynthConfig {
            seed: 100 + seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainingConfig {
            pretrain_epochs: 1,
            n_tasks: 12,
            meta_epochs: 1,
            seed: 100 + seed,
            ..TrainingConfig::default()
        };
        let trainer = MetaTrainer::new(&subjects[..6], &arch, &cfg).unwrap();
        let (mut state, _) = trainer.initial_state().unwrap();
        trainer.run_epoch(&mut state, &mut audit).unwrap();
    }
    audit
}

fn adam_oracle() -> Outcome {
    let cfg = AdamConfig::default();
    let (b1, b2, eps) = (cfg.beta1 as f64, cfg.beta2 as f64, cfg.eps as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let lr = [1e-3, 1e-2, 0.1][case % 3];
        let mut x: f64 = rng.gen_range(-2.0..2.0);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let name = "w".to_string();
        let mut params = std::collections::BTreeMap::from([(name.clone(), Tensor::scalar(x as Real))]);
        let mut state = AdamState::new(params.iter());
        for t in 1..=8 {
            let g: f64 = rng.gen_range(-3.0..3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            let mut grads = GradientMap::new();
            grads.insert(name.clone(), Tensor::scalar(g as Real));
            adam_step(&mut params, &grads, &mut state, lr as Real, &cfg).unwrap();
            worst = worst.max((params[&name].item().unwrap() as f64 - x).abs());
        }
    }
    let mut params = std::collections::BTreeMap::from([("w".to_string(), Tensor::scalar(0.0))]);
    let mut state = AdamState::new(params.iter());
    let mut grads = GradientMap::new();
    grads.insert("w", Tensor::scalar(1.0));
    adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
    let first = params["w"].item().unwrap() as f64;
    let first_ok = (first + 1e-3).abs() <= 1e-9;
    outcome(
        worst <= 1e-9 && first_ok,
        format!("max deviation {worst:.2e} over 50 sequences; first step for g=1: {first:.12}"),
    )
}

fn brute_force_auc(scores: &Tensor, labels: &[usize]) -> Real {
    let k = scores.shape()[1];
    let mut total = 0.0;
    for c in 0..k {
        let col: Vec<Real> = (0..labels.len()).map(|i| scores.data()[i * k + c]).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in col.iter().enumerate() {
            for (j, &sj) in col.iter().enumerate() {
                if labels[i] == c && labels[j] != c {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total += wins / pairs;
    }
    total / k as Real
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for _ in 0..200 {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(k..=30);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        labels.rotate_left(rng.gen_range(0..n));
        // A coarse grid makes ties common.
        let levels = rng.gen_range(2..12);
        let raw: Vec<Real> = (0..n * k).map(|_| rng.gen_range(0..levels) as Real + 1.0).collect();
        let mut data = Vec::with_capacity(n * k);
        for row in raw.chunks(k) {
            let s: Real = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        let scores = Tensor::new(&[n, k], data).unwrap();
        let fast = eval::roc_auc_macro(&scores, &labels).unwrap();
        let slow = brute_force_auc(&scores, &labels);
        if fast != slow {
            mismatches += 1;
        }
        let col0: Vec<Real> = (0..n).map(|i| scores.data()[i * k]).collect();
        if (1..n).any(|i| col0[..i].contains(&col0[i])) {
            with_ties += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in 200 instances ({with_ties} with tied scores)"),
    )
}

// ---------------------------------------------------------------------------

struct SeedRun {
    pretrain_losses: Vec<Real>,
    adapted_target: Real,
    scratch_target: Real,
    pre_avg_acc: Real,
    post_avg_acc: Real,
    scratch_avg_acc: Real,
    sweep_target: Vec<Real>,
}

fn desk_scale_run(seed: u64) -> SeedRun {
    let subjects = gen_subjects(&SynthConfig {
        n_subjects: 7,
        trials_per_subject: 200,
        channels: 8,
        samples: 256,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let (sources, target) = (&subjects[..6], &subjects[6]);
    let arch = ArchConfig::default();
    let training = TrainingConfig {
        seed,
        ..TrainingConfig::default()
    };
    let trained = meta_trainer::meta_train(sources, &arch, &training).unwrap();
    let meta = &trained.state.params;
    let adapt_cfg = AdaptConfig {
        budget: 30,
        seed,
        ..AdaptConfig::default()
    };
    let adapted = eval::adapt(&arch, meta, target, &adapt_cfg).unwrap();
    let scratch = eval::from_scratch(&arch, target, &adapt_cfg).unwrap();
    let before = eval::evaluate(&arch, meta, target, sources).unwrap();
    let after = eval::evaluate(&arch, &adapted, target, sources).unwrap();
    let baseline = eval::evaluate(&arch, &scratch, target, sources).unwrap();
    let cells = eval::budget_sweep(&arch, meta, target, sources, &SWEEP_BUDGETS, &[seed], &adapt_cfg).unwrap();
    let sweep_target = eval::summarize_sweep(&cells)
        .iter()
        .map(|r| r.target_acc.mean)
        .collect();
    SeedRun {
        pretrain_losses: trained.pretrain_losses,
        adapted_target: after.target.accuracy,
        scratch_target: baseline.target.accuracy,
        pre_avg_acc: before.retention.avg_acc,
        post_avg_acc: after.retention.avg_acc,
        scratch_avg_acc: baseline.retention.avg_acc,
        sweep_target,
    }
}

fn transfer(runs: &[SeedRun], secs: f64) -> Outcome {
    let adapted = mean(&runs.iter().map(|r| r.adapted_target).collect::<Vec<_>>());
    let scratch = mean(&runs.iter().map(|r| r.scratch_target).collect::<Vec<_>>());
    let gain = (adapted - scratch) * 100.0;
    outcome(
        gain >= 10.0 && secs < 15.0 * 60.0,
        format!(
            "adapted {adapted:.3} vs scratch {scratch:.3} (+{gain:.1} pp) over {} seeds; {secs:.0} s",
            runs.len()
        ),
    )
}

fn retention(runs: &[SeedRun]) -> Outcome {
    let pre = mean(&runs.iter().map(|r| r.pre_avg_acc).collect::<Vec<_>>());
    let post = mean(&runs.iter().map(|r| r.post_avg_acc).collect::<Vec<_>>());
    let scratch = mean(&runs.iter().map(|r| r.scratch_avg_acc).collect::<Vec<_>>());
    let drop = (pre - post).abs() * 100.0;
    let margin = (post - scratch) * 100.0;
    outcome(
        drop <= 15.0 && margin >= 15.0,
        format!(
            "Avg. Acc before {pre:.3}, after {post:.3} ({drop:.1} pp apart), scratch {scratch:.3} (+{margin:.1} pp)"
        ),
    )
}

fn budget_trend(runs: &[SeedRun]) -> Outcome {
    let means: Vec<Real> = (0..SWEEP_BUDGETS.len())
        .map(|i| mean(&runs.iter().map(|r| r.sweep_target[i]).collect::<Vec<_>>()))
        .collect();
    let budgets: Vec<Real> = SWEEP_BUDGETS.iter().map(|&b| b as Real).collect();
    // Constant means have no rank order; that is no negative trend either.
    let rho = eval::spearman(&budgets, &means).unwrap_or(0.0);
    let ends = means[means.len() - 1] >= means[0];
    let table: Vec<String> = SWEEP_BUDGETS
        .iter()
        .zip(&means)
        .map(|(b, m)| format!("{b}:{m:.3}"))
        .collect();
    outcome(
        rho >= 0.0 && ends,
        format!("mean target acc by budget [{}], Spearman {rho:.2}", table.join(" ")),
    )
}

fn pretrain_sanity(runs: &[SeedRun]) -> Outcome {
    let decreasing = runs
        .iter()
        .all(|r| r.pretrain_losses.len() == 10 && r.pretrain_losses[9] < r.pretrain_losses[0]);
    let spans: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.4}->{:.4}",
                r.pretrain_losses[0],
                r.pretrain_losses[r.pretrain_losses.len() - 1]
            )
        })
        .collect();
    outcome(decreasing, format!("epoch 1 -> 10 loss per seed: {}", spans.join(", ")))
}

// ---------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"
name = "acceptance-determinism"
seed = 7

[training]
pretrain_epochs = 2
n_tasks = 24
meta_epochs = 3

[adaptation]
budget = 30
"#;

fn run_ok(args: &[&str], config: &Path, out: &Path) -> Result<(), String> {
    let status = mups()
        .args(args)
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!(
            "mups {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&status.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let run = || -> Result<(bool, bool, String), String> {
        let work = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = work.path().join("config.toml");
        fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
        let (a, b, c) = (work.path().join("a"), work.path().join("b"), work.path().join("c"));
        for dir in [&a, &b] {
            run_ok(&["meta-train"], &config, dir)?;
            run_ok(&["adapt"], &config, dir)?;
            run_ok(&["evaluate"], &config, dir)?;
        }
        let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
        let mut same_csv = true;
        for file in ["meta_train.csv", "adapt.csv", "evaluate.csv"] {
            same_csv &= read(&a.join("results").join(file))? == read(&b.join("results").join(file))?;
        }
        // Interrupt after one epoch, then resume to the configured three.
        let short = work.path().join("short.toml");
        fs::write(&short, DETERMINISM_CONFIG.replace("meta_epochs = 3", "meta_epochs = 1"))
            .map_err(|e| e.to_string())?;
        run_ok(&["meta-train"], &short, &c)?;
        run_ok(&["meta-train", "--resume"], &config, &c)?;
        let meta = "checkpoints/meta.ckpt";
        let same_resume = read(&a.join(meta))? == read(&c.join(meta))?;
        Ok((same_csv, same_resume, String::new()))
    };
    match run() {
        Ok((csv, resume, _)) => outcome(
            csv && resume,
            format!("result CSVs identical: {csv}; resumed checkpoint identical: {resume}"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    // Accept and ignore libtest arguments such as `--nocapture`.
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    results.push((1, "gradient correctness", gradient_check()));

    let audit = audit_episodes();
    results.push((
        2,
        "base loop leaves the representation untouched",
        outcome(
            audit.episodes >= 20 && audit.base_loop_violations == 0,
            format!(
                "{} episodes, {} with φ changed in the base loop",
                audit.episodes, audit.base_loop_violations
            ),
        ),
    ));
    results.push((
        3,
        "meta step scope and inheritance",
        outcome(
            audit.inherit_violations == 0 && audit.meta_steps_nonzero > 0 && audit.meta_violations == 0,
            format!(
                "{} inheritance mismatches; {} nonzero meta steps, {} missing a φ* or θ* change",
                audit.inherit_violations, audit.meta_steps_nonzero, audit.meta_violations
            ),
        ),
    ));
    results.push((4, "Adam recurrence oracle", adam_oracle()));
    results.push((5, "ROC-AUC pairwise oracle", auc_oracle()));

    let desk_started = Instant::now();
    let runs: Vec<SeedRun> = MAIN_SEEDS.iter().map(|&s| desk_scale_run(s)).collect();
    let desk_secs = desk_started.elapsed().as_secs_f64();
    results.push((6, "transfer benefit over from-scratch", transfer(&runs, desk_secs)));
    results.push((7, "knowledge retention on sources", retention(&runs)));
    results.push((8, "target budget sweep trend", budget_trend(&runs)));
    results.push((9, "determinism and resume", determinism()));
    results.push((10, "pretraining loss decreases", pretrain_sanity(&runs)));

    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {id:>2} [{tag}] {name}: {}", o.detail);
    }
    println!(
        "{} of {} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
