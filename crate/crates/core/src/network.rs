//! Representation network (parameters φ) and prediction network (parameters θ).
//!
//! The representation network is a compact three-block convolutional
//! feature extractor over `[batch, 1, channels, samples]` trials:
//!
//! 1. temporal convolution (`F1` filters of width `k_t`) + batch norm
//! 2. depthwise spatial convolution across all channels (`D` filters per
//!    temporal filter) + batch norm + ELU + mean pool 4 + dropout
//! 3. separable convolution (depthwise width `k_s`, then pointwise to `F2`)
//!    + batch norm + ELU + mean pool 8 + dropout, flattened
//!
//! The prediction network is `linear(h) -> ELU -> linear(n_classes)` and
//! returns logits.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradientMap, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, Mode, Padding, RunningStats};
use crate::tensor::{Real, Tensor};

pub type NamedTensors = BTreeMap<String, Tensor>;
pub type TrainRng = ChaCha8Rng;

const POOL_1: usize = 4;
const POOL_2: usize = 8;

pub const TEMPORAL: &str = "rep.temporal.weight";
pub const SPATIAL: &str = "rep.spatial.weight";
pub const SEP_DEPTHWISE: &str = "rep.separable.depthwise";
pub const SEP_POINTWISE: &str = "rep.separable.pointwise";
pub const BN_LAYERS: [&str; 3] = ["rep.bn1", "rep.bn2", "rep.bn3"];
pub const FC1_W: &str = "pred.fc1.weight";
pub const FC1_B: &str = "pred.fc1.bias";
pub const FC2_W: &str = "pred.fc2.weight";
pub const FC2_B: &str = "pred.fc2.bias";

fn gamma_name(layer: &str) -> String {
    format!("{layer}.gamma")
}

fn beta_name(layer: &str) -> String {
    format!("{layer}.beta")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub channels: usize,
    pub samples: usize,
    pub n_classes: usize,
    /// Temporal filters.
    pub f1: usize,
    /// Spatial filters per temporal filter.
    pub depth: usize,
    /// Separable (pointwise) filters.
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub hidden: usize,
    pub dropout: Real,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            samples: 256,
            n_classes: 4,
            f1: 8,
            depth: 2,
            f2: 16,
            temporal_kernel: 32,
            separable_kernel: 16,
            hidden: 64,
            dropout: 0.25,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("n_classes", self.n_classes),
            ("f1", self.f1),
            ("depth", self.depth),
            ("f2", self.f2),
            ("temporal_kernel", self.temporal_kernel),
            ("separable_kernel", self.separable_kernel),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("arch.{name} must be positive")));
        }
        if self.samples % (POOL_1 * POOL_2) != 0 {
            return Err(Error::Config(format!(
                "arch.samples = {} must be divisible by {}",
                self.samples,
                POOL_1 * POOL_2
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("arch.n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "arch.dropout = {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn spatial_filters(&self) -> usize {
        self.f1 * self.depth
    }

    pub fn feature_dim(&self) -> usize {
        self.f2 * self.samples / (POOL_1 * POOL_2)
    }
}

/// Representation parameters φ: conv weights, batch-norm affine tensors and
/// the batch-norm running statistics that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct RepParams {
    pub tensors: NamedTensors,
    pub bn: BTreeMap<String, RunningStats>,
}

/// The full parameter collection, partitioned into φ (`rep`) and θ (`pred`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub rep: RepParams,
    pub pred: NamedTensors,
}

/// Which parameters a forward pass should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    None,
    /// θ only; φ enters the graph as constants and no gradient flows into it.
    PredOnly,
    All,
}

/// Mutable lookup by parameter name, implemented by every parameter container
/// the optimizers update.
pub trait ParamStore {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for NamedTensors {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

impl ParamStore for ParameterSet {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with("rep.") {
            self.rep.tensors.get_mut(name)
        } else {
            self.pred.get_mut(name)
        }
    }
}

fn uniform_tensor(rng: &mut TrainRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as Real).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn init_rep(arch: &ArchConfig, rng: &mut TrainRng) -> RepParams {
    let s = arch.spatial_filters();
    let mut tensors = NamedTensors::new();
    tensors.insert(
        TEMPORAL.into(),
        uniform_tensor(rng, &[arch.f1, 1, 1, arch.temporal_kernel], arch.temporal_kernel),
    );
    tensors.insert(
        SPATIAL.into(),
        uniform_tensor(rng, &[s, 1, arch.channels, 1], arch.channels),
    );
    tensors.insert(
        SEP_DEPTHWISE.into(),
        uniform_tensor(rng, &[s, 1, 1, arch.separable_kernel], arch.separable_kernel),
    );
    tensors.insert(SEP_POINTWISE.into(), uniform_tensor(rng, &[arch.f2, s, 1, 1], s));
    let mut bn = BTreeMap::new();
    for (layer, width) in BN_LAYERS.iter().zip([arch.f1, s, arch.f2]) {
        tensors.insert(gamma_name(layer), Tensor::ones(&[width]));
        tensors.insert(beta_name(layer), Tensor::zeros(&[width]));
        bn.insert(layer.to_string(), RunningStats::new(width));
    }
    RepParams { tensors, bn }
}

pub fn init_pred(arch: &ArchConfig, rng: &mut TrainRng) -> NamedTensors {
    let feat = arch.feature_dim();
    let mut pred = NamedTensors::new();
    pred.insert(FC1_W.into(), uniform_tensor(rng, &[arch.hidden, feat], feat));
    pred.insert(FC1_B.into(), Tensor::zeros(&[arch.hidden]));
    pred.insert(
        FC2_W.into(),
        uniform_tensor(rng, &[arch.n_classes, arch.hidden], arch.hidden),
    );
    pred.insert(FC2_B.into(), Tensor::zeros(&[arch.n_classes]));
    pred
}

/// Fresh φ and θ, deterministic per seed.
pub fn init_parameters(arch: &ArchConfig, seed: u64) -> Result<ParameterSet> {
    arch.validate()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let rep = init_rep(arch, &mut rng);
    let pred = init_pred(arch, &mut rng);
    Ok(ParameterSet { rep, pred })
}

impl ParameterSet {
    pub fn new(rep: RepParams, pred: NamedTensors) -> Result<Self> {
        if let Some(name) = rep.tensors.keys().find(|k| !k.starts_with("rep.")) {
            return Err(Error::State(format!(
                "representation tensor {name} lacks the rep. prefix"
            )));
        }
        if let Some(name) = pred.keys().find(|k| !k.starts_with("pred.")) {
            return Err(Error::State(format!("prediction tensor {name} lacks the pred. prefix")));
        }
        Ok(Self { rep, pred })
    }

    /// Trainable tensors of φ ∪ θ in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.rep.tensors.iter().chain(self.pred.iter())
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.rep.tensors.get(name).or_else(|| self.pred.get(name))
    }

    /// Folds training-batch statistics into the running statistics.
    pub fn absorb_batch_stats(&mut self, stats: &[(String, BatchStats)], momentum: Real) -> Result<()> {
        for (layer, batch) in stats {
            let rs = self
                .rep
                .bn
                .get_mut(layer)
                .ok_or_else(|| Error::State(format!("no running statistics for {layer}")))?;
            rs.update(batch, momentum);
        }
        Ok(())
    }

    /// Bitwise equality of every tensor and running statistic.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        rep_bitwise_eq(&self.rep, &other.rep) && named_bitwise_eq(&self.pred, &other.pred)
    }
}

pub fn named_bitwise_eq(a: &NamedTensors, b: &NamedTensors) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((ka, ta), (kb, tb))| ka == kb && ta.bitwise_eq(tb))
}

fn bits(v: &[Real]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits() as u64).collect()
}

pub fn rep_bitwise_eq(a: &RepParams, b: &RepParams) -> bool {
    named_bitwise_eq(&a.tensors, &b.tensors)
        && a.bn.len() == b.bn.len()
        && a.bn.iter().zip(&b.bn).all(|((ka, ra), (kb, rb))| {
            ka == kb && ra.batches == rb.batches && bits(&ra.mean) == bits(&rb.mean) && bits(&ra.var) == bits(&rb.var)
        })
}

/// Adds every tensor of φ and θ as graph leaves. Trainable-ness follows `scope`.
pub fn bind(g: &mut Graph, params: &ParameterSet, scope: GradScope) -> BTreeMap<String, Var> {
    let mut vars = BTreeMap::new();
    for (name, t) in &params.rep.tensors {
        let v = match scope {
            GradScope::All => g.param(name.clone(), t.clone()),
            _ => g.constant(t.clone()),
        };
        vars.insert(name.clone(), v);
    }
    for (name, t) in &params.pred {
        let v = match scope {
            GradScope::None => g.constant(t.clone()),
            _ => g.param(name.clone(), t.clone()),
        };
        vars.insert(name.clone(), v);
    }
    vars
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
}

fn dropout_mask(rng: &mut TrainRng, n: usize, rate: Real) -> Vec<Real> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<Real>() < rate { 0.0 } else { keep })
        .collect()
}

/// Recorded batch statistics from a train-mode pass, keyed by layer.
pub type BnUpdates = Vec<(String, BatchStats)>;

/// Representation forward pass. `rng` drives dropout and is required in
/// train mode when the dropout rate is positive.
pub fn rep_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    vars: &BTreeMap<String, Var>,
    bn: &BTreeMap<String, RunningStats>,
    x: Var,
    mode: Mode,
    mut rng: Option<&mut TrainRng>,
) -> Result<(Var, BnUpdates)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != arch.channels || shape[3] != arch.samples {
        return Err(Error::Dimension(format!(
            "input batch {shape:?} does not match [batch, 1, {}, {}]",
            arch.channels, arch.samples
        )));
    }
    let batch = shape[0];
    let mut updates = BnUpdates::new();
    let mut norm = |g: &mut Graph, h: Var, layer: &str| -> Result<Var> {
        let running = bn
            .get(layer)
            .ok_or_else(|| Error::State(format!("no running statistics for {layer}")))?;
        let (y, stats) = g.batch_norm(
            h,
            lookup(vars, &gamma_name(layer))?,
            lookup(vars, &beta_name(layer))?,
            running,
            mode,
        )?;
        if let Some(stats) = stats {
            updates.push((layer.to_string(), stats));
        }
        Ok(y)
    };
    let mut drop = |g: &mut Graph, h: Var| -> Result<Var> {
        if mode == Mode::Eval || arch.dropout == 0.0 {
            return Ok(h);
        }
        let rng = rng
            .as_deref_mut()
            .ok_or_else(|| Error::Usage("train-mode forward with dropout needs an RNG".into()))?;
        let mask = dropout_mask(rng, g.value(h).numel(), arch.dropout);
        g.dropout(h, mask)
    };

    // block 1
    let h = g.conv2d(x, lookup(vars, TEMPORAL)?, 1, Padding::SameWidth)?;
    let h = norm(g, h, BN_LAYERS[0])?;
    // block 2
    let h = g.conv2d(h, lookup(vars, SPATIAL)?, arch.f1, Padding::Valid)?;
    let h = norm(g, h, BN_LAYERS[1])?;
    let h = g.elu(h)?;
    let h = g.avg_pool(h, POOL_1)?;
    let h = drop(g, h)?;
    // block 3
    let s = arch.spatial_filters();
    let h = g.conv2d(h, lookup(vars, SEP_DEPTHWISE)?, s, Padding::SameWidth)?;
    let h = g.conv2d(h, lookup(vars, SEP_POINTWISE)?, 1, Padding::Valid)?;
    let h = norm(g, h, BN_LAYERS[2])?;
    let h = g.elu(h)?;
    let h = g.avg_pool(h, POOL_2)?;
    let h = drop(g, h)?;
    let features = g.reshape(h, &[batch, arch.feature_dim()])?;
    Ok((features, updates))
}

pub fn pred_forward(g: &mut Graph, vars: &BTreeMap<String, Var>, features: Var) -> Result<Var> {
    let h = g.linear(features, lookup(vars, FC1_W)?, lookup(vars, FC1_B)?)?;
    let h = g.elu(h)?;
    g.linear(h, lookup(vars, FC2_W)?, lookup(vars, FC2_B)?)
}

/// Outcome of one differentiated forward pass.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: Real,
    pub grads: GradientMap,
    pub bn_updates: BnUpdates,
}

/// Cross-entropy loss of the full network on one batch, with gradients for
/// the parameters selected by `scope`.
pub fn loss_and_grad(
    arch: &ArchConfig,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    scope: GradScope,
    rng: Option<&mut TrainRng>,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let vars = bind(&mut g, params, scope);
    let input = g.constant(x.clone());
    let (features, bn_updates) = rep_forward(&mut g, arch, &vars, &params.rep.bn, input, mode, rng)?;
    let logits = pred_forward(&mut g, &vars, features)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = g.value(loss).item()?;
    let grads = if scope == GradScope::None {
        GradientMap::new()
    } else {
        g.backward(loss)?
    };
    Ok(LossEval {
        loss: value,
        grads,
        bn_updates,
    })
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode logits for every trial in `x`, computed in chunks.
pub fn predict_logits(arch: &ArchConfig, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n * arch.n_classes);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let chunk = x.slice_outer(start, len)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, params, GradScope::None);
        let input = g.constant(chunk);
        let (features, _) = rep_forward(&mut g, arch, &vars, &params.rep.bn, input, Mode::Eval, None)?;
        let logits = pred_forward(&mut g, &vars, features)?;
        out.extend_from_slice(g.value(logits).data());
        start += len;
    }
    Tensor::new(&[n, arch.n_classes], out)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, Real::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    kernels::softmax(logits)
}
