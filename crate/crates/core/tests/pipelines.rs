use shiftlab::averaging::ModelPopulation;
use shiftlab::data::{generate_split, k_shot_sample, DomainDataset, ShiftFamily};
use shiftlab::models::{init, ModelSpec};
use shiftlab::pipelines::{
    adapt, adapt_after_wa, adapt_before_wa, evaluate, linear_probe, pretrain_shared_init, sweep_train, train_pair,
    train_single, AdaptSpec, HyperParams, OptimizerKind, PretrainOptions, SweepOptions, SweepSpace,
};
use shiftlab::{Error, ParamSet};

fn moons(domain: &str, seed: u64) -> (DomainDataset, DomainDataset) {
    generate_split(&ShiftFamily::TwoMoonsRotate, &domain.parse().unwrap(), 200, 200, 0.1, seed).unwrap()
}

fn spec() -> ModelSpec {
    ModelSpec::mlp(2, vec![16], 2)
}

fn fast_hp() -> HyperParams {
    HyperParams {
        learning_rate: 5e-3,
        epochs: 5,
        batch_size: 32,
        optimizer: OptimizerKind::Adam,
        ..Default::default()
    }
}

fn fast_space() -> SweepSpace {
    SweepSpace {
        learning_rate: vec![1e-3, 3e-3],
        epochs: 3,
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn pretraining_is_deterministic_and_reaches_threshold() {
    let (src, _) = moons("rot0", 1);
    let opts = PretrainOptions {
        hp: fast_hp(),
        epoch_cap: 200,
    };
    let a = pretrain_shared_init(&spec(), &src, 0.8, 9, &opts).unwrap();
    let b = pretrain_shared_init(&spec(), &src, 0.8, 9, &opts).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&a, &src).unwrap().accuracy >= 0.8);
}

#[test]
fn impossible_threshold_fails_immediately() {
    let (src, _) = moons("rot0", 1);
    for t in [1.01, 0.0] {
        let err = pretrain_shared_init(&spec(), &src, t, 9, &PretrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ThresholdUnreachable { .. }), "{err}");
    }
}

#[test]
fn linear_probe_only_moves_the_head() {
    let (src, _) = moons("rot0", 2);
    let start = init(&spec(), 3).unwrap();
    let probed = linear_probe(&start, &src, &fast_hp(), 4).unwrap();
    for ((name, a), (_, b)) in start.tensors().iter().zip(probed.tensors()) {
        assert_eq!(a == b, !ParamSet::is_head(name), "{name}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (src, _) = moons("rot0", 2);
    let start = init(&spec(), 3).unwrap();
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::SamSgd, OptimizerKind::SamAdam] {
        let hp = HyperParams {
            learning_rate: 0.0,
            optimizer,
            ..fast_hp()
        };
        let out = train_single(&start, &src, &hp, None, 5, |_, _| Ok(false)).unwrap();
        assert_eq!(out, start, "{optimizer:?}");
    }
}

#[test]
fn identical_member_seeds_without_regularizer_give_twins() {
    let (src, _) = moons("rot0", 3);
    let start = init(&spec(), 1).unwrap();
    let hp = HyperParams {
        diversity_coeff: 0.0,
        ..fast_hp()
    };
    let (a, b, traj) = train_pair(&start, &src, &hp, 11, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(traj.len(), hp.epochs);
    assert!(traj.iter().all(|c| (*c - 1.0).abs() < 1e-12));
}

#[test]
fn sweep_yields_two_members_per_run_deterministically() {
    let (src, _) = moons("rot0", 4);
    let start = init(&spec(), 1).unwrap();
    let run = |jobs| {
        let opts = SweepOptions {
            identical_pair_seeds: false,
            jobs: Some(jobs),
        };
        sweep_train(&start, "init", &src, 3, &fast_space(), 7, &opts).unwrap()
    };
    let a = run(1);
    let b = run(2);
    assert_eq!(a.population.len(), 6);
    assert_eq!(a.runs.len(), 3);
    assert_eq!(a.population.members, b.population.members);
    assert!(a.population.member_init_hashes.iter().all(|h| h == "init"));
}

#[test]
fn k_shot_selection_is_balanced_and_seeded() {
    let (train, _) = generate_split(&ShiftFamily::SynthDigits, &"noisy_bg".parse().unwrap(), 300, 50, 0.05, 5).unwrap();
    let s = k_shot_sample(&train, 10, 1).unwrap();
    assert_eq!(s.len(), 100);
    assert!(s.class_counts().iter().all(|&c| c == 10));
    assert_eq!(s.x, k_shot_sample(&train, 10, 1).unwrap().x);
    assert!(k_shot_sample(&train, 1000, 1).is_err());
}

#[test]
fn adaptation_with_zero_learning_rate_keeps_accuracy() {
    let (train, test) = moons("rot40", 5);
    let start = init(&spec(), 6).unwrap();
    let hp = HyperParams {
        learning_rate: 0.0,
        ..fast_hp()
    };
    let adapted = adapt(&start, &train, 5, &hp, 1, false).unwrap();
    assert_eq!(evaluate(&adapted, &test).unwrap().accuracy, evaluate(&start, &test).unwrap().accuracy);
}

#[test]
fn adaptation_orders_agree_when_averaging_is_trivial() {
    let (train, test) = moons("rot40", 5);
    let member = init(&spec(), 6).unwrap();
    let hp = fast_hp();
    let spec_ = AdaptSpec {
        target_train: &train,
        target_test: &test,
        k: 5,
        hp: &hp,
        seed: 3,
        head_only: false,
    };
    for pop in [
        ModelPopulation::new(vec![member.clone()], "i"),
        ModelPopulation::new(vec![member.clone(); 4], "i"),
    ] {
        assert_eq!(adapt_after_wa(&pop, &spec_).unwrap(), adapt_before_wa(&pop, &spec_).unwrap());
    }
}

#[test]
fn zero_head_predicts_class_zero_everywhere() {
    let (_, test) = generate_split(&ShiftFamily::SynthDigits, &"clean".parse().unwrap(), 50, 200, 0.05, 5).unwrap();
    let p = init(&ModelSpec::small_cnn(1, 8, 10), 1).unwrap();
    let zeros: Vec<_> = p
        .tensors()
        .iter()
        .map(|(n, t)| if ParamSet::is_head(n) { t.scale(0.0) } else { t.clone() })
        .collect();
    let p = p.with_tensors(zeros).unwrap();
    let e = evaluate(&p, &test).unwrap();
    assert!((e.accuracy - 0.1).abs() < 1e-12, "{}", e.accuracy);
}

#[test]
fn probing_improves_source_accuracy() {
    let mut wins = 0;
    for seed in 0..5 {
        let (src, test) = moons("rot0", 100 + seed);
        let start = init(&spec(), seed).unwrap();
        let probed = linear_probe(&start, &src, &fast_hp(), seed).unwrap();
        wins += usize::from(evaluate(&probed, &test).unwrap().accuracy > evaluate(&start, &test).unwrap().accuracy);
    }
    assert!(wins >= 4, "{wins}/5");
}
