//! Sweeps a small population from a shared probed initialization and
//! compares the uniform average against its members out of distribution.

use shiftlab::averaging::{weight_average, ModelPopulation};
use shiftlab::data::{generate_split, ShiftFamily};
use shiftlab::models::{init, ModelSpec};
use shiftlab::pipelines::{evaluate, linear_probe, sweep_train, HyperParams, OptimizerKind, SweepOptions, SweepSpace};

fn main() -> shiftlab::Result<()> {
    let fam = ShiftFamily::TwoMoonsRotate;
    let (src, _) = generate_split(&fam, &"rot0".parse()?, 400, 400, 0.1, 1)?;
    let (_, ood) = generate_split(&fam, &"rot40".parse()?, 10, 400, 0.1, 2)?;
    let hp = HyperParams {
        learning_rate: 5e-3,
        epochs: 30,
        batch_size: 32,
        optimizer: OptimizerKind::Adam,
        ..Default::default()
    };
    let probe = linear_probe(&init(&ModelSpec::mlp(2, vec![32, 32], 2), 0)?, &src, &hp, 0)?;
    let space = SweepSpace {
        learning_rate: vec![1e-3, 3e-3, 5e-3],
        epochs: 20,
        batch_size: 32,
        ..Default::default()
    };
    let sweep = sweep_train(&probe, "probe", &src, 5, &space, 7, &SweepOptions::default())?;
    let pop: &ModelPopulation = &sweep.population;
    let accs: Vec<f64> = pop.members.iter().map(|m| evaluate(m, &ood).map(|e| e.accuracy)).collect::<Result<_, _>>()?;
    for (i, a) in accs.iter().enumerate() {
        println!("member {i}: {a:.3}");
    }
    let avg = weight_average(pop, None, false)?;
    println!(
        "mean member {:.3}, average of {} {:.3}",
        accs.iter().sum::<f64>() / accs.len() as f64,
        avg.members.len(),
        evaluate(&avg.params, &ood)?.accuracy
    );
    Ok(())
}
