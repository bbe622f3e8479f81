//! Trains one MLP on two moons with Adam and with SAM wrapped around Adam,
//! printing the loss trajectory of both.

use shiftlab::data::{generate_split, ShiftFamily};
use shiftlab::models::{self, init, ModelSpec};
use shiftlab::optim::{sam_perturbation, BaseRule, LossEval, OptConfig, Optimizer};
use shiftlab::{Graph, ParamSet, Tensor};

fn main() {
    let g = Tensor::vector(vec![3.0, 4.0]);
    let e = sam_perturbation(&g, 0.05);
    println!("perturbation of [3, 4] at rho 0.05: {:?} (norm {:.3})", e.data(), e.l2_norm());

    let (train, _) = generate_split(&ShiftFamily::TwoMoonsRotate, &"rot0".parse().unwrap(), 256, 10, 0.1, 1).unwrap();
    let y = train.one_hot();
    let loss = |p: &ParamSet| {
        let mut graph = Graph::new(0);
        let fwd = models::forward(p, &train.x, false, true, &mut graph)?;
        let t = graph.constant(y.clone());
        let l = graph.softmax_cross_entropy(fwd.logits, t)?;
        let value = graph.value(l).item();
        let mut grads = graph.backward(l)?;
        Ok(LossEval {
            loss: value,
            grads: fwd.params.iter().map(|&id| grads.take(id).unwrap()).collect(),
        })
    };
    let start = init(&ModelSpec::mlp(2, vec![16], 2), 0).unwrap();
    for (name, cfg) in [
        ("adam", OptConfig::adam(1e-2)),
        ("sam+adam", OptConfig::sam(0.05, BaseRule::adam(), 1e-2)),
    ] {
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = start.clone();
        let mut trace = Vec::new();
        for step in 0..200 {
            let (next, l) = opt.step(&p, loss).unwrap();
            p = next;
            if step % 40 == 0 {
                trace.push(format!("{l:.4}"));
            }
        }
        println!("{name:>9}: loss every 40 steps {}", trace.join(" "));
    }
}
