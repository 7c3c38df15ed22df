//! Seeded synthetic multi-subject EEG-like data and the on-disk subject format.
//!
//! Each subject mixes `n_classes` oscillatory sources into `channels`
//! electrodes through its own Gaussian mixing matrix, and shifts every class
//! frequency by a subject-specific offset. A trial of class `c` activates the
//! sinusoid of source `c` (random phase); all sources and all electrodes carry
//! white noise of standard deviation `noise`. Class identity therefore lives in
//! the frequency content, while the spatial pattern differs between subjects.
//!
//! Samples are rounded to `f32` at generation time so a dataset written to
//! disk and read back is bitwise identical to the in-memory one.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"EEGB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Labeled trials of one subject with a disjoint train/eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub id: u32,
    /// `[n_trials, 1, channels, samples]`.
    pub trials: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SubjectDataset {
    /// Builds a dataset with the default class-balanced split.
    pub fn new(id: u32, trials: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let (train, eval) = default_split(&labels, n_classes);
        let ds = Self {
            id,
            trials,
            labels,
            n_classes,
            train,
            eval,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_trials(&self) -> usize {
        self.labels.len()
    }

    pub fn channels(&self) -> usize {
        self.trials.shape()[2]
    }

    pub fn samples(&self) -> usize {
        self.trials.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Data(format!("subject {} has no trials", self.id)));
        }
        let shape = self.trials.shape();
        if shape.len() != 4 || shape[0] != n || shape[1] != 1 {
            return Err(Error::Data(format!(
                "subject {}: trials {shape:?} inconsistent with {n} labels",
                self.id
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::Data(format!(
                "subject {}: label {bad} out of range for {} classes",
                self.id, self.n_classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= n || seen[i] {
                return Err(Error::Data(format!(
                    "subject {}: split index {i} out of range or repeated",
                    self.id
                )));
            }
            seen[i] = true;
        }
        let mut present = vec![false; self.n_classes];
        for &i in &self.train {
            present[self.labels[i]] = true;
        }
        if let Some(c) = present.iter().position(|p| !p) {
            return Err(Error::Data(format!(
                "subject {}: class {c} missing from the train split",
                self.id
            )));
        }
        Ok(())
    }

    /// Train-split trial indices grouped by class.
    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for &i in &self.train {
            by_class[self.labels[i]].push(i);
        }
        by_class
    }

    pub fn select(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.trials.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Per class, the first 80% of that class's trials (in trial order) go to
/// train and the rest to eval.
pub fn default_split(labels: &[usize], n_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes.max(1)];
    for (i, &l) in labels.iter().enumerate() {
        if l < by_class.len() {
            by_class[l].push(i);
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for idx in by_class {
        let n_train = (idx.len() as f64 * TRAIN_FRACTION).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        eval.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub samples: usize,
    /// Hz.
    pub sample_rate: f64,
    pub trials_per_subject: usize,
    /// Standard deviation of the white noise on sources and electrodes.
    pub noise: f64,
    /// Base oscillation frequency of each class, Hz.
    pub class_freqs: Vec<f64>,
    /// Subject frequency offsets are uniform in `[-freq_jitter, freq_jitter]` Hz.
    pub freq_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 7,
            n_classes: 4,
            channels: 8,
            samples: 256,
            sample_rate: 128.0,
            trials_per_subject: 200,
            noise: 1.0,
            class_freqs: vec![6.0, 11.0, 16.0, 21.0],
            freq_jitter: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn trial_seconds(&self) -> f64 {
        self.samples as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects == 0 || self.channels == 0 || self.samples == 0 || self.n_classes < 2 {
            return bad("synth: n_subjects, channels, samples must be positive and n_classes >= 2".into());
        }
        if self.class_freqs.len() != self.n_classes {
            return bad(format!(
                "synth: {} class frequencies for {} classes",
                self.class_freqs.len(),
                self.n_classes
            ));
        }
        if !(self.sample_rate > 0.0) || !(self.noise >= 0.0) || !(self.freq_jitter >= 0.0) {
            return bad("synth: sample_rate must be positive, noise and freq_jitter non-negative".into());
        }
        let nyquist = self.sample_rate / 2.0;
        for &f in &self.class_freqs {
            if !(f - self.freq_jitter > 0.0 && f + self.freq_jitter < nyquist) {
                return bad(format!(
                    "synth: class frequency {f} Hz with jitter {} leaves (0, {nyquist}) Hz",
                    self.freq_jitter
                ));
            }
        }
        for (i, a) in self.class_freqs.iter().enumerate() {
            for b in &self.class_freqs[i + 1..] {
                if (a - b).abs() <= 2.0 * self.freq_jitter {
                    return bad(format!(
                        "synth: class frequencies {a} and {b} Hz closer than twice the jitter {}",
                        self.freq_jitter
                    ));
                }
            }
        }
        if self.trials_per_subject == 0 || self.trials_per_subject % self.n_classes != 0 {
            return bad(format!(
                "synth: trials_per_subject = {} must be a positive multiple of n_classes",
                self.trials_per_subject
            ));
        }
        Ok(())
    }
}

/// Subject-specific generative parameters.
#[derive(Clone, Debug)]
pub struct SubjectModel {
    /// `[channels, n_classes]`, row-major.
    pub mixing: Vec<f64>,
    pub freq_offset: f64,
}

fn subject_draws(cfg: &SynthConfig, subject: u32) -> (SubjectModel, rand_chacha::ChaCha8Rng) {
    let mut rng = rng::stream(cfg.seed, Domain::Subject, subject as u64);
    let mixing = (0..cfg.channels * cfg.n_classes)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let freq_offset = if cfg.freq_jitter > 0.0 {
        rng.gen_range(-cfg.freq_jitter..=cfg.freq_jitter)
    } else {
        0.0
    };
    (SubjectModel { mixing, freq_offset }, rng)
}

pub fn subject_model(cfg: &SynthConfig, subject: u32) -> SubjectModel {
    subject_draws(cfg, subject).0
}

pub fn gen_subject(cfg: &SynthConfig, subject: u32) -> Result<SubjectDataset> {
    cfg.validate()?;
    let (model, mut rng) = subject_draws(cfg, subject);
    let (c, t, k) = (cfg.channels, cfg.samples, cfg.n_classes);
    let n = cfg.trials_per_subject;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * c * t);
    let mut sources = vec![0.0f64; k * t];
    for &label in &labels {
        let freq = cfg.class_freqs[label] + model.freq_offset;
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (j, src) in sources.chunks_exact_mut(t).enumerate() {
            for (s, v) in src.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = cfg.noise * noise;
                if j == label {
                    *v += (2.0 * PI * freq * s as f64 / cfg.sample_rate + phase).sin();
                }
            }
        }
        for ch in 0..c {
            let weights = &model.mixing[ch * k..(ch + 1) * k];
            for s in 0..t {
                let mut v = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    v += w * sources[j * t + s];
                }
                let noise: f64 = rng.sample(StandardNormal);
                v += cfg.noise * noise;
                data.push(v as f32 as Real);
            }
        }
    }
    let trials = Tensor::new(&[n, 1, c, t], data)?;
    SubjectDataset::new(subject, trials, labels, k)
}

/// Generates subjects `0..n_subjects`, each from its own RNG stream.
pub fn gen_subjects(cfg: &SynthConfig) -> Result<Vec<SubjectDataset>> {
    cfg.validate()?;
    (0..cfg.n_subjects as u32).map(|s| gen_subject(cfg, s)).collect()
}

// ---------------------------------------------------------------------------
// Subject file
// ---------------------------------------------------------------------------

pub fn encode_subject(ds: &SubjectDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (n, c, t) = (ds.n_trials(), ds.channels(), ds.samples());
    let mut buf = Vec::with_capacity(HEADER_BYTES + 2 * n + 4 * n * c * t);
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, n as u32, c as u32, t as u32, ds.n_classes as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        let l = u16::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in u16")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for &v in ds.trials.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Parses a subject file. The split follows the default rule; callers with a
/// manifest replace it.
pub fn decode_subject(bytes: &[u8], id: u32) -> Result<SubjectDataset> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "subject file of {} bytes is shorter than its header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported subject format version {version}")));
    }
    let (n, c, t, k) = (word(1), word(2), word(3), word(4));
    if n == 0 {
        return Err(Error::Data("subject file holds no trials".into()));
    }
    if c == 0 || t == 0 || k == 0 {
        return Err(Error::Format(format!(
            "degenerate header: channels={c}, samples={t}, classes={k}"
        )));
    }
    let expected = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_BYTES + 2 * n))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "subject file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let label_bytes = &bytes[HEADER_BYTES..HEADER_BYTES + 2 * n];
    let labels: Vec<usize> = label_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let data: Vec<Real> = bytes[HEADER_BYTES + 2 * n..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("subject file contains non-finite samples".into()));
    }
    let trials = Tensor::new(&[n, 1, c, t], data)?;
    SubjectDataset::new(id, trials, labels, k)
}

/// Writes atomically: the bytes go to a temporary file in the same directory
/// which is then renamed over `path`.
pub fn write_subject(ds: &SubjectDataset, path: &Path) -> Result<()> {
    let bytes = encode_subject(ds)?;
    write_atomic(path, &bytes)
}

pub fn read_subject(path: &Path) -> Result<SubjectDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_subject(&bytes, 0)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    /// Relative to the manifest's directory.
    pub path: String,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub trial_seconds: f64,
    /// Subject held out of meta-training, if designated.
    #[serde(default)]
    pub target: Option<u32>,
    pub subjects: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn subject_file_name(id: u32) -> String {
    format!("subject_{id:02}.eegb")
}

/// Writes one file per subject plus `manifest.json` into `dir`.
pub fn write_dataset(
    dir: &Path,
    subjects: &[SubjectDataset],
    trial_seconds: f64,
    target: Option<u32>,
) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(subjects.len());
    for ds in subjects {
        let name = subject_file_name(ds.id);
        write_subject(ds, &dir.join(&name))?;
        entries.push(ManifestEntry {
            id: ds.id,
            path: name,
            train: ds.train.clone(),
            eval: ds.eval.clone(),
        });
    }
    let manifest = Manifest {
        trial_seconds,
        target,
        subjects: entries,
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Loads every subject listed in `dir/manifest.json`, restoring ids and splits.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SubjectDataset>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut ids = BTreeMap::new();
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        if ids.insert(entry.id, ()).is_some() {
            return Err(Error::Format(format!("manifest lists subject {} twice", entry.id)));
        }
        let mut ds = read_subject(&dir.join(&entry.path))?;
        ds.id = entry.id;
        ds.train = entry.train.clone();
        ds.eval = entry.eval.clone();
        ds.validate()?;
        subjects.push(ds);
    }
    if let Some(t) = manifest.target {
        if !ids.contains_key(&t) {
            return Err(Error::Format(format!("manifest target {t} is not a listed subject")));
        }
    }
    Ok((manifest, subjects))
}
