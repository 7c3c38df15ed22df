//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `MUPSCKPT`, `u32` version, then three
//! sections — `u64` scalars, UTF-8 texts, and tensors (stored as `f64`
//! regardless of the working precision) — each a `u32` count followed by
//! name-prefixed entries, and finally a CRC-32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kernels::RunningStats;
use crate::meta_trainer::MetaLearnerState;
use crate::network::{self, ArchConfig, ParameterSet, RepParams, TrainRng};
use crate::optim::AdamState;
use crate::synth::write_atomic;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MUPSCKPT";
pub const VERSION: u32 = 1;

/// Generic container of named scalars, texts and tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub scalars: BTreeMap<String, u64>,
    pub texts: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        self.string(len)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_name(&mut out, name)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.texts.len() as u32).to_le_bytes());
        for (name, text) in &self.texts {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name)?;
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format(
                "checkpoint checksum mismatch (corrupt or truncated)".into(),
            ));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let v = r.u64()?;
            ck.scalars.insert(name, v);
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("text length overflow".into()))?;
            let text = r.string(len)?;
            ck.texts.insert(name, text);
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::Format(format!("tensor {name} has an implausible shape {shape:?}")))?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            ck.tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint sections",
                body.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint lacks scalar {name}")))
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }
}

const PARAM: &str = "param/";
const BN: &str = "bn/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

const KIND_STATE: &str = "meta-learner";
const KIND_PARAMS: &str = "parameters";

fn put_params(ck: &mut Checkpoint, arch: &ArchConfig, params: &ParameterSet, kind: &str) -> Result<()> {
    let arch_json = serde_json::to_string(arch).map_err(|e| Error::Format(e.to_string()))?;
    ck.texts.insert("arch".into(), arch_json);
    ck.texts.insert("kind".into(), kind.into());
    for (name, t) in params.trainable() {
        ck.tensors.insert(format!("{PARAM}{name}"), t.clone());
    }
    for (name, stats) in &params.rep.bn {
        let c = stats.mean.len();
        ck.tensors
            .insert(format!("{BN}{name}.mean"), Tensor::new(&[c], stats.mean.clone())?);
        ck.tensors
            .insert(format!("{BN}{name}.var"), Tensor::new(&[c], stats.var.clone())?);
        ck.scalars.insert(format!("{BN}{name}.batches"), stats.batches);
    }
    Ok(())
}

/// Reads the architecture and parameters, checking every tensor against
/// the shapes the architecture implies.
fn take_params(ck: &Checkpoint, kind: &str, tensors_per_param: usize) -> Result<(ArchConfig, ParameterSet)> {
    match ck.texts.get("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Format(format!(
                "checkpoint holds {}, expected {kind}",
                other.map_or("an unknown kind", |k| k.as_str())
            )))
        }
    }
    let arch_json = ck
        .texts
        .get("arch")
        .ok_or_else(|| Error::Format("checkpoint lacks the architecture".into()))?;
    let arch: ArchConfig = serde_json::from_str(arch_json).map_err(|e| Error::Format(format!("architecture: {e}")))?;
    arch.validate()?;
    let template = network::init_parameters(&arch, 0)?;
    let mut rep = RepParams {
        tensors: BTreeMap::new(),
        bn: BTreeMap::new(),
    };
    let mut pred = BTreeMap::new();
    for (name, expected) in template.trainable() {
        let value = shaped(ck, PARAM, name, expected)?;
        if name.starts_with("rep.") {
            rep.tensors.insert(name.clone(), value);
        } else {
            pred.insert(name.clone(), value);
        }
    }
    for (name, stats) in &template.rep.bn {
        let c = stats.mean.len();
        let mean = ck.tensor(&format!("{BN}{name}.mean"))?;
        let var = ck.tensor(&format!("{BN}{name}.var"))?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::Format(format!(
                "running statistics of {name} do not have {c} channels"
            )));
        }
        rep.bn.insert(
            name.clone(),
            RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
                batches: ck.scalar(&format!("{BN}{name}.batches"))?,
            },
        );
    }
    let expected = template.trainable().count() * tensors_per_param + template.rep.bn.len() * 2;
    if ck.tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, architecture expects {expected}",
            ck.tensors.len()
        )));
    }
    Ok((arch, ParameterSet::new(rep, pred)?))
}

fn shaped(ck: &Checkpoint, prefix: &str, name: &str, expected: &Tensor) -> Result<Tensor> {
    let t = ck.tensor(&format!("{prefix}{name}"))?;
    if t.shape() != expected.shape() {
        return Err(Error::Format(format!(
            "{prefix}{name} has shape {:?}, architecture expects {:?}",
            t.shape(),
            expected.shape()
        )));
    }
    Ok(t.clone())
}

/// Packs a meta-learner state together with the architecture it belongs to.
pub fn state_to_checkpoint(arch: &ArchConfig, state: &MetaLearnerState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    put_params(&mut ck, arch, &state.params, KIND_STATE)?;
    for (name, t) in &state.adam.m {
        ck.tensors.insert(format!("{ADAM_M}{name}"), t.clone());
    }
    for (name, t) in &state.adam.v {
        ck.tensors.insert(format!("{ADAM_V}{name}"), t.clone());
    }
    ck.scalars.insert("adam.t".into(), state.adam.t);
    ck.scalars.insert("epoch".into(), state.epoch as u64);
    ck.scalars.insert("episodes".into(), state.episodes);
    for (i, chunk) in state.rng.get_seed().chunks_exact(8).enumerate() {
        ck.scalars
            .insert(format!("rng.seed{i}"), u64::from_le_bytes(chunk.try_into().unwrap()));
    }
    ck.scalars.insert("rng.stream".into(), state.rng.get_stream());
    let pos = state.rng.get_word_pos();
    ck.scalars.insert("rng.word_pos.lo".into(), pos as u64);
    ck.scalars.insert("rng.word_pos.hi".into(), (pos >> 64) as u64);
    Ok(ck)
}

pub fn state_from_checkpoint(ck: &Checkpoint) -> Result<(ArchConfig, MetaLearnerState)> {
    let (arch, params) = take_params(ck, KIND_STATE, 3)?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, expected) in params.trainable() {
        m.insert(name.clone(), shaped(ck, ADAM_M, name, expected)?);
        v.insert(name.clone(), shaped(ck, ADAM_V, name, expected)?);
    }
    let mut seed = [0u8; 32];
    for i in 0..4 {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&ck.scalar(&format!("rng.seed{i}"))?.to_le_bytes());
    }
    let mut rng = TrainRng::from_seed(seed);
    rng.set_stream(ck.scalar("rng.stream")?);
    rng.set_word_pos(ck.scalar("rng.word_pos.lo")? as u128 | (ck.scalar("rng.word_pos.hi")? as u128) << 64);
    let epoch = u32::try_from(ck.scalar("epoch")?).map_err(|_| Error::Format("epoch out of range".into()))?;
    let state = MetaLearnerState {
        params,
        adam: AdamState {
            m,
            v,
            t: ck.scalar("adam.t")?,
        },
        epoch,
        episodes: ck.scalar("episodes")?,
        rng,
    };
    Ok((arch, state))
}

/// Saves a bare parameter set, e.g. an adapted model.
pub fn save_params(arch: &ArchConfig, params: &ParameterSet, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::default();
    put_params(&mut ck, arch, params, KIND_PARAMS)?;
    ck.save(path)
}

pub fn load_params(path: &Path) -> Result<(ArchConfig, ParameterSet)> {
    take_params(&Checkpoint::load(path)?, KIND_PARAMS, 1)
}

pub fn save_state(arch: &ArchConfig, state: &MetaLearnerState, path: &Path) -> Result<()> {
    state_to_checkpoint(arch, state)?.save(path)
}

pub fn load_state(path: &Path) -> Result<(ArchConfig, MetaLearnerState)> {
    state_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_trainer::{MetaTrainer, NoHooks, TrainingConfig};
    use crate::synth::{gen_subjects, SynthConfig};
    use rand::RngCore;

    fn arch() -> ArchConfig {
        ArchConfig {
            channels: 3,
            samples: 32,
            n_classes: 4,
            f1: 2,
            depth: 2,
            f2: 3,
            temporal_kernel: 5,
            separable_kernel: 4,
            hidden: 6,
            dropout: 0.25,
        }
    }

    fn trained_state() -> MetaLearnerState {
        let arch = arch();
        let src = gen_subjects(&SynthConfig {
            n_subjects: 4,
            channels: 3,
            samples: 32,
            trials_per_subject: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainingConfig {
            pretrain_epochs: 1,
            base_steps: 2,
            tasks_per_batch: 2,
            n_tasks: 3,
            task_size: 8,
            base_size: 4,
            meta_size: 4,
            meta_epochs: 1,
            ..TrainingConfig::default()
        };
        let trainer = MetaTrainer::new(&src, &arch, &cfg).unwrap();
        let (mut state, _) = trainer.initial_state().unwrap();
        trainer.run_epoch(&mut state, &mut NoHooks).unwrap();
        state
    }

    #[test]
    fn container_round_trip() {
        let mut ck = Checkpoint::default();
        ck.scalars.insert("a".into(), u64::MAX);
        ck.texts.insert("note".into(), "héllo".into());
        ck.tensors
            .insert("w".into(), Tensor::new(&[2, 2], vec![1.5, -0.0, 3.25, 1e-300]).unwrap());
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.scalars, ck.scalars);
        assert_eq!(back.texts, ck.texts);
        assert!(back.tensors["w"].bitwise_eq(&ck.tensors["w"]));
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn state_round_trip_is_bitwise_and_idempotent() {
        let arch = arch();
        let mut state = trained_state();
        state.rng.next_u32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.ckpt");
        save_state(&arch, &state, &path).unwrap();
        let (arch_back, loaded) = load_state(&path).unwrap();
        assert_eq!(arch_back, arch);
        assert!(loaded.bitwise_eq(&state));
        let first = std::fs::read(&path).unwrap();
        save_state(&arch, &loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let mut a = state.rng.clone();
        let mut b = loaded.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = state_to_checkpoint(&arch(), &trained_state())
            .unwrap()
            .encode()
            .unwrap();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Format(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 99;
        match Checkpoint::decode(&versioned) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_sets_round_trip_and_kinds_are_checked() {
        let arch = arch();
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapted.ckpt");
        save_params(&arch, &state.params, &path).unwrap();
        let (_, params) = load_params(&path).unwrap();
        assert!(params.bitwise_eq(&state.params));
        assert!(matches!(load_state(&path), Err(Error::Format(_))));
        save_state(&arch, &state, &path).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format(_))));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut ck = state_to_checkpoint(&arch(), &trained_state()).unwrap();
        let other = ArchConfig { hidden: 7, ..arch() };
        ck.texts.insert("arch".into(), serde_json::to_string(&other).unwrap());
        assert!(matches!(state_from_checkpoint(&ck), Err(Error::Format(_))));
    }
}
