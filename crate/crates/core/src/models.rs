//! Model architectures, parameter sets and seeded initialization.
//!
//! Every model is `f = g ∘ h`: a feature extractor `h` followed by a single
//! linear head `g` (`head.weight`, `head.bias`). Dropout, when enabled, is
//! applied to the hidden activations entering each fully connected layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

const CONV_KERNEL: usize = 5;
const CONV_PADDING: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        dropout: f64,
    },
    /// conv5x5 → relu → maxpool, twice, then fully connected layers.
    SmallCnn {
        input_channels: usize,
        input_side: usize,
        conv_channels: [usize; 2],
        hidden: Vec<usize>,
        dropout: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp {
                input_dim,
                hidden,
                dropout: 0.0,
            },
            num_classes,
        }
    }

    /// Desk-scale CNN: conv channels (8, 12), fully connected (64, 64).
    pub fn small_cnn(input_channels: usize, input_side: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::SmallCnn {
                input_channels,
                input_side,
                conv_channels: [8, 12],
                hidden: vec![64, 64],
                dropout: 0.0,
            },
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("model spec: {msg}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        let dropout = self.dropout();
        if !(0.0..1.0).contains(&dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match &self.architecture {
            Architecture::Mlp {
                input_dim, hidden, ..
            } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return bad("layer sizes must be positive");
                }
            }
            Architecture::SmallCnn {
                input_channels,
                input_side,
                conv_channels,
                hidden,
                ..
            } => {
                if *input_channels == 0
                    || conv_channels.contains(&0)
                    || hidden.contains(&0)
                {
                    return bad("layer sizes must be positive");
                }
                if *input_side < 4 || input_side % 4 != 0 {
                    return bad("input_side must be a positive multiple of 4");
                }
            }
        }
        Ok(())
    }

    pub fn dropout(&self) -> f64 {
        match &self.architecture {
            Architecture::Mlp { dropout, .. } | Architecture::SmallCnn { dropout, .. } => *dropout,
        }
    }

    pub fn with_dropout(&self, p: f64) -> Self {
        let mut out = self.clone();
        match &mut out.architecture {
            Architecture::Mlp { dropout, .. } | Architecture::SmallCnn { dropout, .. } => {
                *dropout = p
            }
        }
        out
    }

    /// Equality ignoring dropout, which does not change the parameter layout.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.with_dropout(0.0) == other.with_dropout(0.0)
    }

    /// Number of input features per sample.
    pub fn input_len(&self) -> usize {
        match &self.architecture {
            Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::SmallCnn {
                input_channels,
                input_side,
                ..
            } => input_channels * input_side * input_side,
        }
    }

    /// Width of the penultimate activations fed to the head.
    pub fn feature_dim(&self) -> usize {
        let hidden = match &self.architecture {
            Architecture::Mlp { hidden, .. } | Architecture::SmallCnn { hidden, .. } => hidden,
        };
        match hidden.last() {
            Some(&h) => h,
            None => self.trunk_dim(),
        }
    }

    /// Width entering the first fully connected layer.
    fn trunk_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::SmallCnn {
                input_side,
                conv_channels,
                ..
            } => conv_channels[1] * (input_side / 4) * (input_side / 4),
        }
    }

    /// Canonical `(name, shape)` layout of the parameters.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let hidden = match &self.architecture {
            Architecture::Mlp { hidden, .. } => hidden,
            Architecture::SmallCnn {
                input_channels,
                conv_channels,
                hidden,
                ..
            } => {
                let k = CONV_KERNEL;
                let mut in_ch = *input_channels;
                for (i, &c) in conv_channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![c, in_ch, k, k]));
                    out.push((format!("conv{i}.bias"), vec![c]));
                    in_ch = c;
                }
                hidden
            }
        };
        let mut width = self.trunk_dim();
        for (i, &h) in hidden.iter().enumerate() {
            out.push((format!("fc{i}.weight"), vec![h, width]));
            out.push((format!("fc{i}.bias"), vec![h]));
            width = h;
        }
        out.push((HEAD_WEIGHT.to_string(), vec![self.num_classes, width]));
        out.push((HEAD_BIAS.to_string(), vec![self.num_classes]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Ordered, named weights of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    spec: ModelSpec,
    tensors: Vec<(String, Tensor)>,
}

impl ParamSet {
    /// Builds a parameter set, checking names and shapes against `ModelSpec::layout`.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::SpecMismatch(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn head_names() -> [&'static str; 2] {
        [HEAD_WEIGHT, HEAD_BIAS]
    }

    pub fn is_head(name: &str) -> bool {
        name == HEAD_WEIGHT || name == HEAD_BIAS
    }

    /// Per-tensor flag, true for tensors of the linear head.
    pub fn head_mask(&self) -> Vec<bool> {
        self.names().map(Self::is_head).collect()
    }

    pub fn head_weight(&self) -> &Tensor {
        self.get(HEAD_WEIGHT).expect("layout always has a head")
    }

    pub fn head_bias(&self) -> &Tensor {
        self.get(HEAD_BIAS).expect("layout always has a head")
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.spec = self.spec.with_dropout(p);
        self
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_params());
        for (_, t) in &self.tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::vector(data)
    }

    /// Inverse of [`ParamSet::flatten`] for the given spec.
    pub fn unflatten(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let layout = spec.layout();
        let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: vec![total],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            tensors.push((name, Tensor::new(shape, flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        Self::from_tensors(spec.clone(), tensors)
    }

    /// Same spec, new tensor values (in canonical order).
    pub fn with_tensors(&self, values: Vec<Tensor>) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .zip(values)
            .map(|((n, _), t)| (n.clone(), t))
            .collect();
        Self::from_tensors(self.spec.clone(), tensors)
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.spec.same_structure(&other.spec) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "{:?} vs {:?}",
                self.spec.architecture, other.spec.architecture
            )))
        }
    }
}

/// Scaled-uniform weights (bound `sqrt(6/(fan_in+fan_out))`), zero biases.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let receptive: usize = shape[2..].iter().product();
                let fan_in = shape[1] * receptive;
                let fan_out = shape[0] * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("layout shapes are valid")
            };
            (name, t)
        })
        .collect();
    ParamSet::from_tensors(spec.clone(), tensors)
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One node per parameter tensor, in canonical order.
    pub params: Vec<NodeId>,
    /// Penultimate activations `h(x)`, shape `[B, feature_dim]`.
    pub features: NodeId,
    /// `W·features + b`, shape `[B, num_classes]`.
    pub logits: NodeId,
}

/// Runs the model on `batch_x` (`[B, input_len]` or `[B, C, S, S]`).
///
/// Parameters are added as tracked leaves when `track_params` is set,
/// otherwise as constants.
pub fn forward(
    params: &ParamSet,
    batch_x: &Tensor,
    train: bool,
    track_params: bool,
    graph: &mut Graph,
) -> Result<Forward> {
    let spec = params.spec();
    let batch = batch_x.shape()[0];
    if batch_x.numel() != batch * spec.input_len() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: batch_x.shape().to_vec(),
            rhs: vec![batch, spec.input_len()],
        });
    }
    let nodes: Vec<NodeId> = params
        .tensors()
        .iter()
        .map(|(_, t)| {
            if track_params {
                graph.input(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect();
    let dropout = spec.dropout();
    let mut next = 0;
    let mut take = || {
        let pair = (nodes[next], nodes[next + 1]);
        next += 2;
        pair
    };

    let (mut act, hidden_len) = match &spec.architecture {
        Architecture::Mlp { hidden, .. } => {
            let x = graph.constant(batch_x.reshape(vec![batch, spec.input_len()])?);
            (x, hidden.len())
        }
        Architecture::SmallCnn {
            input_channels,
            input_side,
            hidden,
            ..
        } => {
            let s = *input_side;
            let mut x = graph.constant(batch_x.reshape(vec![batch, *input_channels, s, s])?);
            for _ in 0..2 {
                let (w, b) = take();
                x = graph.conv2d(x, w, Some(b), CONV_PADDING)?;
                x = graph.relu(x)?;
                x = graph.maxpool2d(x)?;
            }
            let x = graph.flatten(x)?;
            let x = graph.dropout(x, dropout, train)?;
            (x, hidden.len())
        }
    };
    for _ in 0..hidden_len {
        let (w, b) = take();
        act = linear(graph, act, w, b)?;
        act = graph.relu(act)?;
        act = graph.dropout(act, dropout, train)?;
    }
    let (w, b) = take();
    let logits = linear(graph, act, w, b)?;
    Ok(Forward {
        params: nodes,
        features: act,
        logits,
    })
}

/// `x·Wᵀ + b` for `W` of shape `[out, in]`.
fn linear(graph: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let wt = graph.transpose(w)?;
    let y = graph.matmul(x, wt)?;
    graph.add(y, b)
}

/// Applies only the linear head to precomputed features `[B, feature_dim]`.
pub fn head_logits(params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(0);
    let f = g.constant(features.clone());
    let w = g.constant(params.head_weight().clone());
    let b = g.constant(params.head_bias().clone());
    let out = linear(&mut g, f, w, b)?;
    Ok(g.value(out).clone())
}

/// Eval-mode logits for a batch, computed in chunks.
pub fn predict_logits(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let n = x.shape()[0];
    let c = params.spec().num_classes;
    let mut out = Vec::with_capacity(n * c);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xb = x.select_rows(&idx);
        let mut g = Graph::new(0);
        let fwd = forward(params, &xb, false, false, &mut g)?;
        out.extend_from_slice(g.value(fwd.logits).data());
        start = end;
    }
    Tensor::new(vec![n, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_example() -> ModelSpec {
        ModelSpec::mlp(2, vec![16], 2)
    }

    #[test]
    fn mlp_layout_matches_shapes() {
        let p = init(&mlp_example(), 1).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 2], vec![16], vec![2, 16], vec![2]]);
        assert_eq!(p.flatten().numel(), 82);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::small_cnn(1, 8, 10);
        assert_eq!(init(&spec, 5).unwrap(), init(&spec, 5).unwrap());
        assert_ne!(init(&spec, 5).unwrap(), init(&spec, 6).unwrap());
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_bound() {
        let p = init(&mlp_example(), 3).unwrap();
        assert!(p.get("fc0.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(p.get("fc0.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn flatten_round_trip_and_wrong_length() {
        let p = init(&ModelSpec::small_cnn(1, 8, 10), 2).unwrap();
        let flat = p.flatten();
        let back = ParamSet::unflatten(p.spec(), flat.data()).unwrap();
        assert_eq!(back, p);
        assert!(ParamSet::unflatten(p.spec(), &flat.data()[1..]).is_err());
    }

    #[test]
    fn forward_shapes_for_both_architectures() {
        for spec in [ModelSpec::mlp(64, vec![32, 16], 10), ModelSpec::small_cnn(1, 8, 10)] {
            let p = init(&spec, 0).unwrap();
            let x = Tensor::full(&[5, 64], 0.3);
            let mut g = Graph::new(0);
            let f = forward(&p, &x, false, true, &mut g).unwrap();
            assert_eq!(g.value(f.features).shape(), &[5, spec.feature_dim()]);
            assert_eq!(g.value(f.logits).shape(), &[5, 10]);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let p = init(&mlp_example(), 0).unwrap();
        let zeroed: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|(n, t)| if ParamSet::is_head(n) { Tensor::zeros(t.shape()) } else { t.clone() })
            .collect();
        let p = p.with_tensors(zeroed).unwrap();
        let logits = predict_logits(&p, &Tensor::full(&[3, 2], 1.7)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(ModelSpec::mlp(2, vec![4], 1).validate().is_err());
        assert!(ModelSpec::mlp(2, vec![0], 2).validate().is_err());
        assert!(ModelSpec::mlp(2, vec![4], 2).with_dropout(1.0).validate().is_err());
        assert!(ModelSpec::small_cnn(1, 6, 10).validate().is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let p = init(&mlp_example(), 0).unwrap();
        let mut g = Graph::new(0);
        assert!(forward(&p, &Tensor::zeros(&[4, 3]), false, true, &mut g).is_err());
    }
}
