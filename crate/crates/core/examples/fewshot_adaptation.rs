//! Adapts a small population to a shifted domain with k labeled samples per
//! class, averaging either after or before adaptation.

use shiftlab::data::{generate_split, ShiftFamily};
use shiftlab::models::{init, ModelSpec};
use shiftlab::pipelines::{
    adapt_after_wa, adapt_before_wa, evaluate, linear_probe, sweep_train, AdaptSpec, HyperParams, OptimizerKind,
    SweepOptions, SweepSpace,
};

fn main() -> shiftlab::Result<()> {
    let fam = ShiftFamily::TwoMoonsRotate;
    let (src, _) = generate_split(&fam, &"rot0".parse()?, 400, 10, 0.1, 1)?;
    let (tgt_train, tgt_test) = generate_split(&fam, &"rot80".parse()?, 200, 400, 0.1, 2)?;
    let hp = HyperParams {
        learning_rate: 5e-3,
        epochs: 30,
        batch_size: 32,
        optimizer: OptimizerKind::Adam,
        ..Default::default()
    };
    let probe = linear_probe(&init(&ModelSpec::mlp(2, vec![32, 32], 2), 0)?, &src, &hp, 0)?;
    let space = SweepSpace {
        learning_rate: vec![1e-3, 3e-3],
        epochs: 15,
        batch_size: 32,
        ..Default::default()
    };
    let pop = sweep_train(&probe, "probe", &src, 3, &space, 5, &SweepOptions::default())?.population;
    println!("probe on target before adaptation: {:.3}", evaluate(&probe, &tgt_test)?.accuracy);
    for k in [1, 5, 20] {
        let spec = AdaptSpec {
            target_train: &tgt_train,
            target_test: &tgt_test,
            k,
            hp: &HyperParams { epochs: 40, ..hp },
            seed: k as u64,
            head_only: false,
        };
        println!(
            "k={k:>2}: adapt after averaging {:.3}, before averaging {:.3}",
            adapt_after_wa(&pop, &spec)?,
            adapt_before_wa(&pop, &spec)?
        );
    }
    Ok(())
}
