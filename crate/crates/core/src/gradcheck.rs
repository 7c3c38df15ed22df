//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::network::{self, ArchConfig, ParameterSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: Real,
    /// Above this many coordinates a seeded sample of this size is checked.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator. Central differences
    /// carry roughly `machine_eps * |loss| / epsilon` of rounding noise, so
    /// coordinates with gradients near that level are compared absolutely.
    pub abs_floor: Real,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: 4096,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: Real,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `loss_fn` at `params` against central
/// differences. The closure builds the forward pass from the bound variables
/// and must be deterministic, which is why `mode` has to be [`Mode::Eval`].
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor>,
    mode: Mode,
    cfg: &GradCheckConfig,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>, Mode) -> Result<Var>,
{
    if mode != Mode::Eval {
        return Err(Error::Usage(
            "gradient check requires deterministic mode (eval batch norm, no dropout)".into(),
        ));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::Usage(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }

    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name.clone(), t.clone())))
        .collect();
    let loss = loss_fn(&mut g, &vars, mode)?;
    let analytic = g.backward(loss)?;

    let eval = |perturbed: &BTreeMap<String, Tensor>| -> Result<Real> {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = perturbed
            .iter()
            .map(|(name, t)| (name.clone(), g.constant(t.clone())))
            .collect();
        let loss = loss_fn(&mut g, &vars, mode)?;
        g.value(loss).item()
    };

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let selected: Vec<usize> = if coords.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..coords.len()).collect()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for &c in &selected {
        let (name, i) = &coords[c];
        let original = params[name].data()[*i];
        work.get_mut(name).unwrap().data_mut()[*i] = original + cfg.epsilon;
        let plus = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = original - cfg.epsilon;
        let minus = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = original;

        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let a = analytic.get(name).map_or(0.0, |t| t.data()[*i]);
        let err = relative_error(a, numeric, cfg.abs_floor);
        report.coords_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

/// Checks the full representation + prediction network on one batch with
/// eval-mode batch norm. The running statistics in `params` must have been
/// recorded (e.g. by a training pass) beforehand.
pub fn network_grad_check(
    arch: &ArchConfig,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let named: BTreeMap<String, Tensor> = params.trainable().map(|(k, v)| (k.clone(), v.clone())).collect();
    grad_check(&named, Mode::Eval, cfg, |g, vars, mode| {
        let input = g.constant(x.clone());
        let (features, _) = network::rep_forward(g, arch, vars, &params.rep.bn, input, mode, None)?;
        let logits = network::pred_forward(g, vars, features)?;
        g.softmax_cross_entropy(logits, labels)
    })
}
