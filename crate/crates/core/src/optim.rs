//! SGD, Adam and sharpness-aware minimization with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

/// Gradient norm below which SAM skips the ascent step.
pub const SAM_MIN_GRAD_NORM: f64 = 1e-12;

/// Update rule that SAM can wrap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BaseRule {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl BaseRule {
    pub fn sgd() -> Self {
        BaseRule::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        BaseRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptKind {
    Base(BaseRule),
    /// Ascend to `θ + ρ·∇L/‖∇L‖`, then apply `base` with the gradient taken there.
    Sam { rho: f64, base: BaseRule },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptKind::Base(BaseRule::sgd()),
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptKind::Base(BaseRule::adam()),
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn sam(rho: f64, base: BaseRule, learning_rate: f64) -> Self {
        Self {
            kind: OptKind::Sam { rho, base },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        let base = match self.kind {
            OptKind::Base(b) => b,
            OptKind::Sam { rho, base } => {
                if !(rho > 0.0) {
                    return bad(format!("SAM rho {rho} must be > 0"));
                }
                base
            }
        };
        match base {
            BaseRule::Sgd { momentum } if !(momentum >= 0.0) => {
                bad(format!("momentum {momentum} must be >= 0"))
            }
            BaseRule::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("Adam betas must lie in [0,1) and eps > 0".into())
            }
            _ => Ok(()),
        }
    }

    fn base(&self) -> BaseRule {
        match self.kind {
            OptKind::Base(b) | OptKind::Sam { base: b, .. } => b,
        }
    }
}

/// Loss value and per-tensor gradients at one parameter point.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Moment buffers and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

/// `ρ·g/‖g‖₂` with a single global norm; zero when `‖g‖₂ < 1e-12`.
pub fn sam_perturbation(grads: &Tensor, rho: f64) -> Tensor {
    let norm = grads.l2_norm();
    if norm < SAM_MIN_GRAD_NORM {
        Tensor::zeros(grads.shape())
    } else {
        grads.scale(rho / norm)
    }
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.dot(t)).sum::<f64>().sqrt()
}

/// Stateful optimizer for one training run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptConfig,
    state: OptState,
    frozen: Vec<bool>,
}

impl Optimizer {
    pub fn new(cfg: OptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptState::default(),
            frozen: Vec::new(),
        })
    }

    /// Tensors flagged `true` receive no update, perturbation or decay.
    pub fn with_frozen(mut self, frozen: Vec<bool>) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn config(&self) -> &OptConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).copied().unwrap_or(false)
    }

    /// One update. `loss_fn` is called once, or twice for SAM.
    pub fn step<F>(&mut self, params: &ParamSet, mut loss_fn: F) -> Result<(ParamSet, f64)>
    where
        F: FnMut(&ParamSet) -> Result<LossEval>,
    {
        let first = self.checked(loss_fn(params))?;
        self.step_from(params, first, loss_fn)
    }

    /// Like [`Optimizer::step`] with the gradient at `params` already known;
    /// `loss_fn` is only used for the SAM ascent point.
    pub fn step_from<F>(
        &mut self,
        params: &ParamSet,
        first: LossEval,
        mut loss_fn: F,
    ) -> Result<(ParamSet, f64)>
    where
        F: FnMut(&ParamSet) -> Result<LossEval>,
    {
        let mut first = self.checked(Ok(first))?;
        self.mask_frozen(&mut first.grads);
        let loss = first.loss;
        let grads = match self.cfg.kind {
            OptKind::Base(_) => first.grads,
            OptKind::Sam { rho, .. } => {
                let norm = global_norm(&first.grads);
                if norm < SAM_MIN_GRAD_NORM {
                    first.grads
                } else {
                    let k = rho / norm;
                    let perturbed: Vec<Tensor> = params
                        .tensors()
                        .iter()
                        .zip(&first.grads)
                        .map(|((_, t), g)| {
                            let mut p = t.clone();
                            p.axpy(k, g);
                            p
                        })
                        .collect();
                    let perturbed = params.with_tensors(perturbed)?;
                    let mut second = self.checked(loss_fn(&perturbed))?;
                    self.mask_frozen(&mut second.grads);
                    second.grads
                }
            }
        };
        let updated = self.apply(params, &grads)?;
        Ok((updated, loss))
    }

    fn checked(&self, eval: Result<LossEval>) -> Result<LossEval> {
        let step = self.state.step + 1;
        match eval {
            Ok(e) if e.loss.is_finite() && e.grads.iter().all(Tensor::is_finite) => Ok(e),
            Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::NonFiniteStep { step }),
            Err(e) => Err(e),
        }
    }

    fn mask_frozen(&self, grads: &mut [Tensor]) {
        for (i, g) in grads.iter_mut().enumerate() {
            if self.is_frozen(i) {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn apply(&mut self, params: &ParamSet, grads: &[Tensor]) -> Result<ParamSet> {
        let n = params.tensors().len();
        if grads.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {n} tensors",
                grads.len()
            )));
        }
        if self.state.first.is_empty() {
            self.state.first = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            if matches!(self.cfg.base(), BaseRule::Adam { .. }) {
                self.state.second = self.state.first.clone();
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        let base = self.cfg.base();

        let mut out = Vec::with_capacity(n);
        for (i, ((_, theta), g)) in params.tensors().iter().zip(grads).enumerate() {
            let mut theta = theta.clone();
            if self.is_frozen(i) {
                out.push(theta);
                continue;
            }
            match base {
                BaseRule::Sgd { momentum } => {
                    let m = &mut self.state.first[i];
                    for ((th, mv), &gv) in theta.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *mv = momentum * *mv + gv;
                        *th -= lr * *mv;
                    }
                }
                BaseRule::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.state.first[i], &mut self.state.second[i]);
                    for (((th, mv), vv), &gv) in theta
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *th -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if wd > 0.0 {
                let k = 1.0 - lr * wd;
                theta.data_mut().iter_mut().for_each(|v| *v *= k);
            }
            out.push(theta);
        }
        params.with_tensors(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, ParamSet};

    /// Single-parameter "model": the bias of a 1-class-free head is enough.
    fn scalar_params(theta: f64) -> ParamSet {
        // mlp(1 -> no hidden -> 2 classes): head.weight [2,1], head.bias [2]
        let spec = ModelSpec::mlp(1, vec![], 2);
        ParamSet::unflatten(&spec, &[theta, 0.0, 0.0, 0.0]).unwrap()
    }

    /// L = ½ Σ θ²
    fn quadratic(p: &ParamSet) -> Result<LossEval> {
        let loss = p.tensors().iter().map(|(_, t)| 0.5 * t.dot(t)).sum();
        let grads = p.tensors().iter().map(|(_, t)| t.clone()).collect();
        Ok(LossEval { loss, grads })
    }

    fn first(p: &ParamSet) -> f64 {
        p.flatten().data()[0]
    }

    #[test]
    fn sgd_hand_example() {
        let mut opt = Optimizer::new(OptConfig::sgd(0.1)).unwrap();
        let (p, _) = opt.step(&scalar_params(1.0), quadratic).unwrap();
        assert!((first(&p) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sam_hand_example() {
        let mut opt = Optimizer::new(OptConfig::sam(0.1, BaseRule::sgd(), 0.1)).unwrap();
        let mut calls = 0;
        let (p, _) = opt
            .step(&scalar_params(1.0), |p| {
                calls += 1;
                quadratic(p)
            })
            .unwrap();
        assert_eq!(calls, 2);
        assert!((first(&p) - 0.89).abs() < 1e-15);
    }

    #[test]
    fn perturbation_examples() {
        let e = sam_perturbation(&Tensor::vector(vec![3.0, 4.0]), 0.05);
        assert!((e.data()[0] - 0.03).abs() < 1e-15 && (e.data()[1] - 0.04).abs() < 1e-15);
        let z = sam_perturbation(&Tensor::zeros(&[3]), 0.05);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut opt = Optimizer::new(OptConfig::adam(0.01)).unwrap();
        let p0 = scalar_params(0.7);
        let (p1, _) = opt.step(&p0, quadratic).unwrap();
        let expected = 0.7 - 0.01 * 0.7 / (0.7 + 1e-8);
        assert!((first(&p1) - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = OptConfig::sgd(0.1).with_weight_decay(0.5);
        let mut opt = Optimizer::new(cfg).unwrap();
        let (p, _) = opt.step(&scalar_params(1.0), quadratic).unwrap();
        assert!((first(&p) - 0.9 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let p0 = scalar_params(1.0);
        let cfg = OptConfig::sam(0.05, BaseRule::adam(), 0.1).with_weight_decay(0.1);
        let mut opt = Optimizer::new(cfg).unwrap().with_frozen(vec![true, false]);
        let (p1, _) = opt.step(&p0, quadratic).unwrap();
        assert_eq!(p1.tensors()[0], p0.tensors()[0]);
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut opt = Optimizer::new(OptConfig::sgd(0.1)).unwrap();
        let p = scalar_params(1.0);
        opt.step(&p, quadratic).unwrap();
        let err = opt
            .step(&p, |p| {
                let mut e = quadratic(p)?;
                e.loss = f64::NAN;
                Ok(e)
            })
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteStep { step: 2 }));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Optimizer::new(OptConfig::sam(0.0, BaseRule::sgd(), 0.1)).is_err());
        assert!(Optimizer::new(OptConfig::sgd(-1.0)).is_err());
    }
}
