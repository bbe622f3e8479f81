//! Measures, for every pair in a sweep, the angle between the two members'
//! displacements from the shared init and the accuracy gain of averaging them.

use shiftlab::averaging::{accuracy_gain, average_params, model_angle, spearman};
use shiftlab::data::{generate_split, ShiftFamily};
use shiftlab::models::{init, ModelSpec};
use shiftlab::pipelines::{linear_probe, sweep_train, HyperParams, OptimizerKind, SweepOptions, SweepSpace};

fn main() -> shiftlab::Result<()> {
    let fam = ShiftFamily::TwoMoonsRotate;
    let (src, _) = generate_split(&fam, &"rot0".parse()?, 400, 10, 0.1, 1)?;
    let (_, ood) = generate_split(&fam, &"rot60".parse()?, 10, 600, 0.1, 2)?;
    let hp = HyperParams {
        learning_rate: 5e-3,
        epochs: 30,
        batch_size: 32,
        optimizer: OptimizerKind::Adam,
        ..Default::default()
    };
    let probe = linear_probe(&init(&ModelSpec::mlp(2, vec![32, 32], 2), 0)?, &src, &hp, 0)?;
    let space = SweepSpace {
        learning_rate: vec![1e-3, 3e-3, 1e-2],
        dropout: vec![0.0, 0.1],
        epochs: 20,
        batch_size: 32,
        ..Default::default()
    };
    let members = sweep_train(&probe, "probe", &src, 4, &space, 9, &SweepOptions::default())?.population.members;
    let (mut angles, mut gains) = (Vec::new(), Vec::new());
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let angle = model_angle(&members[i], &members[j], &probe)?.degrees;
            let avg = average_params(&[&members[i], &members[j]])?;
            let gain = accuracy_gain(&members[i], &members[j], &avg, &ood)?;
            println!("pair ({i},{j}): angle {angle:6.2} deg, gain {:+.4}", gain);
            angles.push(angle);
            gains.push(gain);
        }
    }
    match spearman(&angles, &gains) {
        Some(r) => println!("Spearman(angle, gain) = {r:.3}"),
        None => println!("Spearman undefined: no rank variance"),
    }
    Ok(())
}
