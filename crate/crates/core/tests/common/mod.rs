#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use shiftlab::models::{self, ParamSet};
use shiftlab::optim::LossEval;
use shiftlab::{Graph, NodeId, Op, Tensor};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Relative error with a floor on the denominator so that entries near zero
/// are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Builds `sum(op(inputs) ⊙ weights)`; inputs flagged in `tracked` are leaves.
fn op_loss(op: Op, inputs: &[Tensor], tracked: &[bool], weights: &Tensor, seed: u64) -> (f64, Vec<Option<Tensor>>) {
    let mut g = Graph::new(seed);
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(tracked)
        .map(|(t, &tr)| if tr { g.input(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = g.forward_op(op, &ids).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).item();
    let mut grads = g.backward(loss).unwrap();
    let gs = ids
        .iter()
        .zip(tracked)
        .map(|(&id, &tr)| if tr { grads.take(id) } else { None })
        .collect();
    (value, gs)
}

/// Max relative error between backward and central differences for one op
/// instance, over every tracked input element.
pub fn check_op(op: Op, inputs: &[Tensor], tracked: &[bool], seed: u64) -> f64 {
    let out_shape = {
        let mut g = Graph::new(seed);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = g.forward_op(op, &ids).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = randn(&mut rng(seed ^ 0x5eed), &out_shape);
    let (_, analytic) = op_loss(op, inputs, tracked, &weights, seed);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        let numeric = numeric_grad(inputs[i].data(), FD_STEP, |x| {
            let mut ins = inputs.to_vec();
            ins[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            let mut g = Graph::new(seed);
            let ids: Vec<NodeId> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = g.forward_op(op, &ids).unwrap();
            g.value(out).dot(&weights)
        });
        worst = worst.max(max_rel_err(a.data(), &numeric));
    }
    worst
}

/// Cross-entropy of `params` on a batch with its parameter gradients.
pub fn ce_loss(params: &ParamSet, x: &Tensor, y: &Tensor, train: bool, seed: u64) -> LossEval {
    let mut g = Graph::new(seed);
    let fwd = models::forward(params, x, train, true, &mut g).unwrap();
    let yn = g.constant(y.clone());
    let loss = g.softmax_cross_entropy(fwd.logits, yn).unwrap();
    let value = g.value(loss).item();
    let mut grads = g.backward(loss).unwrap();
    LossEval {
        loss: value,
        grads: fwd.params.iter().map(|&id| grads.take(id).unwrap()).collect(),
    }
}

/// Max relative error of the full parameter gradient of `loss_fn`.
pub fn check_model_grad(params: &ParamSet, loss_fn: impl Fn(&ParamSet) -> LossEval) -> f64 {
    let analytic: Vec<f64> = loss_fn(params).grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat = params.flatten();
    let numeric = numeric_grad(flat.data(), FD_STEP, |v| {
        loss_fn(&ParamSet::unflatten(params.spec(), v).unwrap()).loss
    });
    max_rel_err(&analytic, &numeric)
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Tensor {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Tensor::one_hot(&labels, classes).unwrap()
}
