use criterion::{criterion_group, criterion_main, Criterion};

use mups_core::eval::{adapt, AdaptConfig};
use mups_core::meta_trainer::{run_episode, MetaTrainer, NoHooks, TrainingConfig};

fn episode(c: &mut Criterion) {
    let arch = mups_bench::arch();
    let subjects = mups_bench::cohort(0);
    let sources = &subjects[..6];
    let cfg = TrainingConfig {
        pretrain_epochs: 1,
        ..TrainingConfig::default()
    };
    let trainer = MetaTrainer::new(sources, &arch, &cfg).unwrap();
    let (state, _) = trainer.initial_state().unwrap();
    let task = trainer.ensemble()[0].clone();

    c.bench_function("one episode (10 base steps + meta step)", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| run_episode(&arch, &cfg, sources, &mut s, &task, 0, 1e-3, 1e-3, &mut NoHooks).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });

    let adapt_cfg = AdaptConfig::default();
    let mut group = c.benchmark_group("adaptation");
    group.sample_size(10);
    group.bench_function("30 trials x 20 epochs", |b| {
        b.iter(|| adapt(&arch, &state.params, &subjects[6], &adapt_cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, episode);
criterion_main!(benches);
