//! First-order optimizers and the step-decay learning-rate schedule.
//!
//! Gradients are only read. Parameters without a gradient entry are left
//! untouched, which is how the base learner restricts its updates to θ.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::GradientMap;
use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::{Real, Tensor};

fn check_lr(lr: Real) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Usage(format!("learning rate must be positive, got {lr}")))
    }
}

/// `p <- p - lr * g` for every parameter with a gradient.
pub fn sgd_step(params: &mut impl ParamStore, grads: &GradientMap, lr: Real) -> Result<()> {
    check_lr(lr)?;
    for (name, g) in grads.iter() {
        let p = params
            .param_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        if !p.same_shape(g) {
            return Err(Error::Dimension(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one optimized parameter sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments for the given parameters, `t = 0`.
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Self {
        let mut m = BTreeMap::new();
        for (name, p) in params {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn covers(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }

    pub fn bitwise_eq(&self, other: &AdamState) -> bool {
        self.t == other.t
            && crate::network::named_bitwise_eq(&self.m, &other.m)
            && crate::network::named_bitwise_eq(&self.v, &other.v)
    }
}

/// One bias-corrected Adam step. `state.t` advances once per call.
pub fn adam_step(
    params: &mut impl ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    lr: Real,
    cfg: &AdamConfig,
) -> Result<()> {
    check_lr(lr)?;
    for (name, g) in grads.iter() {
        let (Some(m), Some(v)) = (state.m.get(name), state.v.get(name)) else {
            return Err(Error::State(format!("optimizer state has no moments for {name}")));
        };
        if !m.same_shape(g) || !v.same_shape(g) {
            return Err(Error::State(format!(
                "{name}: moment shape {:?} does not match gradient {:?}",
                m.shape(),
                g.shape()
            )));
        }
        let p = params
            .param_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        if !p.same_shape(g) {
            return Err(Error::State(format!(
                "{name}: parameter {:?} does not match optimizer state {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        let p = params.param_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr = base_lr * factor ^ floor(epoch / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: Real,
    pub factor: Real,
    pub interval: u32,
}

impl LrSchedule {
    pub fn new(base_lr: Real, factor: Real, interval: u32) -> Result<Self> {
        if !(base_lr > 0.0) || !(factor > 0.0 && factor <= 1.0) || interval == 0 {
            return Err(Error::Config(format!(
                "invalid schedule: base_lr={base_lr}, factor={factor}, interval={interval}"
            )));
        }
        Ok(Self {
            base_lr,
            factor,
            interval,
        })
    }

    pub fn lr(&self, epoch: u32) -> Real {
        self.base_lr * self.factor.powi((epoch / self.interval) as i32)
    }
}

pub fn schedule_lr(sched: &LrSchedule, epoch: u32) -> Real {
    sched.lr(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_params(v: Real) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    fn scalar_grad(g: Real) -> GradientMap {
        let mut grads = GradientMap::new();
        grads.insert("p", Tensor::scalar(g));
        grads
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_params(1.0);
        sgd_step(&mut p, &scalar_grad(0.5), 0.01).unwrap();
        assert_eq!(p["p"].data()[0], 0.995);

        let mut p = scalar_params(1.0);
        sgd_step(&mut p, &scalar_grad(0.0), 0.01).unwrap();
        assert_eq!(p["p"].data()[0], 1.0);

        let mut p = scalar_params(0.0);
        sgd_step(&mut p, &scalar_grad(1.0), 0.1).unwrap();
        sgd_step(&mut p, &scalar_grad(1.0), 0.1).unwrap();
        assert!((p["p"].data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_leaves_unkeyed_params_and_checks_shapes() {
        let mut p = scalar_params(1.0);
        p.insert("q".into(), Tensor::from_vec(vec![3.0, 4.0]));
        sgd_step(&mut p, &scalar_grad(1.0), 0.5).unwrap();
        assert_eq!(p["q"].data(), &[3.0, 4.0]);
        let mut bad = GradientMap::new();
        bad.insert("q", Tensor::from_vec(vec![1.0]));
        assert!(matches!(sgd_step(&mut p, &bad, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_grad(0.0), &mut st, 0.001, &AdamConfig::default()).unwrap();
        assert_eq!(p["p"].data()[0], 0.7);
        assert_eq!(st.t, 1);
    }

    /// Hand-unrolled recurrence for a scalar with constant gradient.
    fn adam_oracle(steps: usize, g: Real, lr: Real) -> Real {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        for t in 1..=steps as i32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - Real::powi(b1, t))) / ((v / (1.0 - Real::powi(b2, t))).sqrt() + eps);
        }
        p
    }

    #[cfg_attr(feature = "f32", ignore = "tolerance assumes 64-bit precision")]
    #[test]
    fn adam_matches_recurrence() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &scalar_grad(1.0), &mut st, 0.001, &cfg).unwrap();
        assert!((p["p"].data()[0] - (-0.001 / (1.0 + 1e-8))).abs() < 1e-9);
        assert!((p["p"].data()[0] - adam_oracle(1, 1.0, 0.001)).abs() < 1e-15);
        adam_step(&mut p, &scalar_grad(1.0), &mut st, 0.001, &cfg).unwrap();
        assert!((p["p"].data()[0] - (-0.002)).abs() < 1e-9);
        assert!((p["p"].data()[0] - adam_oracle(2, 1.0, 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adam_state_mismatch() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&BTreeMap::<String, Tensor>::new());
        assert!(matches!(
            adam_step(&mut p, &scalar_grad(1.0), &mut st, 0.001, &AdamConfig::default()),
            Err(Error::State(_))
        ));
        let mut st = AdamState::new(&BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]));
        assert!(matches!(
            adam_step(&mut p, &scalar_grad(1.0), &mut st, 0.001, &AdamConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[cfg_attr(feature = "f32", ignore = "tolerance assumes 64-bit precision")]
    #[test]
    fn schedule_examples() {
        let s = LrSchedule::new(0.001, 0.2, 5).unwrap();
        assert_eq!(schedule_lr(&s, 0), 0.001);
        assert_eq!(schedule_lr(&s, 4), 0.001);
        assert!((schedule_lr(&s, 5) - 0.0002).abs() < 1e-18);
        assert!((schedule_lr(&s, 10) - 4e-5).abs() < 1e-18);
        assert!(LrSchedule::new(0.0, 0.2, 5).is_err());
        assert!(LrSchedule::new(0.1, 1.5, 5).is_err());
        assert!(LrSchedule::new(0.1, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(base in 1e-5f64..1.0, factor in 0.01f64..=1.0, interval in 1u32..10, epoch in 0u32..100) {
            let s = LrSchedule::new(base as Real, factor as Real, interval).unwrap();
            prop_assert!(s.lr(epoch + 1) <= s.lr(epoch));
        }

        #[cfg_attr(feature = "f32", ignore = "tolerance assumes 64-bit precision")]
        #[test]
        fn adam_first_step_is_about_lr(g in prop_oneof![-100.0f64..-0.05, 0.05f64..100.0], lr in 1e-5f64..1e-1) {
            let mut p = scalar_params(0.0);
            let mut st = AdamState::new(&p);
            let grads = scalar_grad(g as Real);
            let before = grads.clone();
            adam_step(&mut p, &grads, &mut st, lr as Real, &AdamConfig::default()).unwrap();
            let step = p["p"].data()[0].abs();
            let exact = lr as Real * g.abs() as Real / (g.abs() as Real + 1e-8);
            prop_assert!((step - exact).abs() <= 1e-12 * exact);
            prop_assert!((step - lr as Real).abs() <= 1e-6);
            prop_assert_eq!(grads, before);
        }

        #[test]
        fn adam_is_deterministic(gs in proptest::collection::vec(-5.0f64..5.0, 1..6)) {
            let run = || {
                let mut p = scalar_params(0.3);
                let mut st = AdamState::new(&p);
                for &g in &gs {
                    adam_step(&mut p, &scalar_grad(g as Real), &mut st, 0.01, &AdamConfig::default()).unwrap();
                }
                (p, st)
            };
            let (pa, sa) = run();
            let (pb, sb) = run();
            prop_assert!(pa["p"].bitwise_eq(&pb["p"]));
            prop_assert!(sa.bitwise_eq(&sb));
        }
    }
}
