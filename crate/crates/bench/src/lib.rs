//! Shared fixtures for the benchmarks.

use mups_core::synth::{gen_subjects, SubjectDataset, SynthConfig};
use mups_core::{ArchConfig, Tensor};

/// Default-sized cohort: 7 subjects of 200 trials, 8 channels, 256 samples.
pub fn cohort(seed: u64) -> Vec<SubjectDataset> {
    gen_subjects(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .expect("default synth config is valid")
}

/// First `n` trials of a subject with their labels.
pub fn batch(ds: &SubjectDataset, n: usize) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..n).collect();
    ds.select(&idx).expect("subject has enough trials")
}

pub fn arch() -> ArchConfig {
    ArchConfig::default()
}
