//! Gradient-diversity regularizer for a pair of models.
//!
//! For a linear head the per-sample gradient of cross-entropy with respect
//! to the penultimate features is `Wᵀ(p − y)`. The regularized loss of one
//! model is `CE + λ · mean_i cos(Wₐᵀ(pₐ,ᵢ − yᵢ), W_bᵀ(p_b,ᵢ − yᵢ))`, with the
//! partner's feature gradients held constant.

use crate::error::{Error, Result};
use crate::models::{self, ParamSet};
use crate::optim::LossEval;
use crate::tensor::{Graph, NodeId, Tensor};

/// Row-wise `Wᵀ(p − y)`: shape `[B, feature_dim]` for `probs`, `labels`
/// `[B, C]` and `head_w` `[C, feature_dim]`.
pub fn feature_gradient(head_w: &Tensor, probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_gradient",
            lhs: probs.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let residual = probs.zip_map(labels, |p, y| p - y);
    residual.matmul(head_w)
}

/// Differentiable `(p − y)·W` inside `graph`.
pub fn feature_gradient_node(
    graph: &mut Graph,
    head_w: NodeId,
    probs: NodeId,
    labels: NodeId,
) -> Result<NodeId> {
    let residual = graph.sub(probs, labels)?;
    graph.matmul(residual, head_w)
}

/// Summary of one paired evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairBatchLoss {
    pub loss_a: f64,
    pub loss_b: f64,
    /// Mean per-sample cosine similarity; degenerate samples count as 0.
    pub mean_cossim: f64,
    pub degenerate_fraction: f64,
}

/// One model's half of a paired evaluation, built up to the feature gradients.
pub struct SideGraph {
    graph: Graph,
    fwd: models::Forward,
    ce: NodeId,
    feature_grad: NodeId,
    batch: usize,
}

impl SideGraph {
    /// Forward pass plus cross-entropy and feature-gradient nodes.
    pub fn build(
        model: &ParamSet,
        x: &Tensor,
        labels: &Tensor,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Self> {
        let mut graph = Graph::new(dropout_seed);
        let fwd = models::forward(model, x, train, true, &mut graph)?;
        let y = graph.constant(labels.clone());
        let ce = graph.softmax_cross_entropy(fwd.logits, y)?;
        let probs = graph.softmax(fwd.logits)?;
        let w = fwd.params[fwd.params.len() - 2];
        let feature_grad = feature_gradient_node(&mut graph, w, probs, y)?;
        Ok(Self {
            graph,
            fwd,
            ce,
            feature_grad,
            batch: x.shape()[0],
        })
    }

    pub fn feature_grad(&self) -> &Tensor {
        self.graph.value(self.feature_grad)
    }

    pub fn cross_entropy(&self) -> f64 {
        self.graph.value(self.ce).item()
    }

    /// Adds the similarity term against a constant partner and backpropagates.
    ///
    /// Returns the loss/gradients, the mean similarity and the degenerate count.
    pub fn finish(mut self, partner_fg: &Tensor, diversity_coeff: f64) -> Result<(LossEval, f64, usize)> {
        let partner = self.graph.constant(partner_fg.clone());
        let cos = self.graph.cosine_similarity(self.feature_grad, partner)?;
        let degenerate = self.graph.degenerate_count(cos);
        let mean_cos = self.graph.mean(cos)?;
        let mean_value = self.graph.value(mean_cos).item();
        let root = if diversity_coeff == 0.0 {
            self.ce
        } else {
            let reg = self.graph.scale(mean_cos, diversity_coeff)?;
            self.graph.add(self.ce, reg)?
        };
        let loss = self.graph.value(root).item();
        let mut grads = self.graph.backward(root)?;
        let grads = self
            .fwd
            .params
            .iter()
            .zip(self.fwd.params.iter().map(|&id| self.graph.value(id).shape().to_vec()))
            .map(|(&id, shape)| grads.take(id).unwrap_or_else(|| Tensor::zeros(&shape)))
            .collect();
        Ok((LossEval { loss, grads }, mean_value, degenerate))
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Regularized loss and gradients of one model with the partner held fixed.
pub fn regularized_loss(
    model: &ParamSet,
    x: &Tensor,
    labels: &Tensor,
    partner_fg: &Tensor,
    diversity_coeff: f64,
    train: bool,
    dropout_seed: u64,
) -> Result<LossEval> {
    let side = SideGraph::build(model, x, labels, train, dropout_seed)?;
    side.finish(partner_fg, diversity_coeff).map(|(e, _, _)| e)
}

/// Output of [`pair_loss`]: summary values plus gradients for both models.
#[derive(Clone, Debug)]
pub struct PairEval {
    pub summary: PairBatchLoss,
    pub eval_a: LossEval,
    pub eval_b: LossEval,
    /// Feature gradients of each model at the evaluated point.
    pub feature_grad_a: Tensor,
    pub feature_grad_b: Tensor,
}

/// Paired regularized losses on one batch. `labels` is one-hot `[B, C]`.
pub fn pair_loss(
    model_a: &ParamSet,
    model_b: &ParamSet,
    x: &Tensor,
    labels: &Tensor,
    diversity_coeff: f64,
    train: bool,
    dropout_seeds: (u64, u64),
) -> Result<PairEval> {
    model_a.check_compatible(model_b)?;
    if x.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(diversity_coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diversity coefficient {diversity_coeff} must be >= 0"
        )));
    }
    let side_a = SideGraph::build(model_a, x, labels, train, dropout_seeds.0)?;
    let side_b = SideGraph::build(model_b, x, labels, train, dropout_seeds.1)?;
    let fg_a = side_a.feature_grad().clone();
    let fg_b = side_b.feature_grad().clone();
    let batch = side_a.batch();
    let (eval_a, mean_cossim, degenerate) = side_a.finish(&fg_b, diversity_coeff)?;
    let (eval_b, _, _) = side_b.finish(&fg_a, diversity_coeff)?;
    Ok(PairEval {
        summary: PairBatchLoss {
            loss_a: eval_a.loss,
            loss_b: eval_b.loss,
            mean_cossim,
            degenerate_fraction: degenerate as f64 / batch as f64,
        },
        eval_a,
        eval_b,
        feature_grad_a: fg_a,
        feature_grad_b: fg_b,
    })
}

/// Eval-mode mean feature-gradient similarity of two models on a dataset.
pub fn mean_cossim(model_a: &ParamSet, model_b: &ParamSet, x: &Tensor, labels: &Tensor) -> Result<f64> {
    model_a.check_compatible(model_b)?;
    let fg = |m: &ParamSet| -> Result<Tensor> {
        let logits = models::predict_logits(m, x)?;
        let mut g = Graph::new(0);
        let l = g.constant(logits);
        let p = g.softmax(l)?;
        feature_gradient(m.head_weight(), g.value(p), labels)
    };
    let (ga, gb) = (fg(model_a)?, fg(model_b)?);
    let cols = ga.shape()[1];
    let n = ga.shape()[0];
    let total: f64 = ga
        .data()
        .chunks(cols)
        .zip(gb.data().chunks(cols))
        .map(|(u, v)| crate::tensor::cosine(u, v).value)
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init, ModelSpec};

    #[test]
    fn perfect_prediction_gives_zero_row() {
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Tensor::one_hot(&[1], 2).unwrap();
        let g = feature_gradient(&w, &y, &y).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head_passes_residual_through() {
        let w = Tensor::identity(3);
        let p = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let y = Tensor::one_hot(&[2], 3).unwrap();
        let g = feature_gradient(&w, &p, &y).unwrap();
        assert_eq!(g.data(), &[0.2, 0.5, 0.3 - 1.0]);
    }

    fn toy_batch() -> (Tensor, Tensor) {
        let x = Tensor::matrix(
            4,
            2,
            vec![0.5, -1.0, 1.5, 0.3, -0.7, 0.9, 0.1, 0.1],
        )
        .unwrap();
        let y = Tensor::one_hot(&[0, 1, 1, 0], 2).unwrap();
        (x, y)
    }

    #[test]
    fn identical_models_have_unit_similarity() {
        let m = init(&ModelSpec::mlp(2, vec![8], 2), 4).unwrap();
        let (x, y) = toy_batch();
        let out = pair_loss(&m, &m, &x, &y, 1.0, false, (0, 0)).unwrap();
        assert!((out.summary.mean_cossim - 1.0).abs() < 1e-12);
        assert_eq!(out.summary.degenerate_fraction, 0.0);
    }

    #[test]
    fn zero_coefficient_is_plain_cross_entropy() {
        let a = init(&ModelSpec::mlp(2, vec![8], 2), 1).unwrap();
        let b = init(&ModelSpec::mlp(2, vec![8], 2), 2).unwrap();
        let (x, y) = toy_batch();
        let out = pair_loss(&a, &b, &x, &y, 0.0, false, (0, 0)).unwrap();
        let mut g = Graph::new(0);
        let f = models::forward(&a, &x, false, true, &mut g).unwrap();
        let yn = g.constant(y.clone());
        let ce = g.softmax_cross_entropy(f.logits, yn).unwrap();
        assert_eq!(out.summary.loss_a.to_bits(), g.value(ce).item().to_bits());
    }

    #[test]
    fn negated_head_gives_antiparallel_gradients() {
        let a = init(&ModelSpec::mlp(2, vec![8], 2), 7).unwrap();
        let negated: Vec<Tensor> = a
            .tensors()
            .iter()
            .map(|(n, t)| if n == models::HEAD_WEIGHT { t.scale(-1.0) } else { t.clone() })
            .collect();
        let b = a.with_tensors(negated).unwrap();
        // binary head with zero bias: logits flip sign, so p_b - y is a negative
        // multiple of p_a - y along (1, -1) and the feature gradients are antiparallel
        let (x, y) = toy_batch();
        let out = pair_loss(&a, &b, &x, &y, 1.0, false, (0, 0)).unwrap();
        assert!((out.summary.mean_cossim + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let a = init(&ModelSpec::mlp(2, vec![8], 2), 1).unwrap();
        let b = init(&ModelSpec::mlp(2, vec![4], 2), 1).unwrap();
        let (x, y) = toy_batch();
        assert!(matches!(
            pair_loss(&a, &b, &x, &y, 1.0, false, (0, 0)),
            Err(Error::SpecMismatch(_))
        ));
    }
}
