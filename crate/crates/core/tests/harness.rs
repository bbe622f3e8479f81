use std::path::Path;

use shiftlab::harness::checkpoint::load_checkpoint;
use shiftlab::harness::config::ExperimentConfig;
use shiftlab::harness::experiment::{run_ablation, run_experiment, AblationAxis, RunOptions, METRICS_HEADER};
use shiftlab::harness::manifest::{read_json, ExperimentManifest, RunManifest};

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
        experiment_id = "small"
        master_seed = 5
        n_runs = 3
        data.family = "two_moons_rotate"
        data.source = "rot0"
        data.targets = ["rot40", "rot80"]
        data.n_train = 150
        data.n_test = 150
        model.arch = "mlp"
        model.hidden = [12]
        pretrain.target_acc = 0.75
        pretrain.hp.learning_rate = 5e-3
        probe.hp.epochs = 3
        sweep.learning_rate = [1e-3]
        sweep.epochs = 3
        average.m_values = [2, 4]
        adapt.enabled = true
        adapt.k = [3]
        adapt.hp.epochs = 5
        "#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn quiet() -> RunOptions {
    RunOptions {
        jobs: Some(1),
        quiet: true,
    }
}

#[test]
fn experiment_writes_checkpoints_manifests_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&small_config(tmp.path()), &quiet()).unwrap();
    assert_eq!(out.member_hashes.len(), 6);

    let ckpts: Vec<_> = std::fs::read_dir(out.dir.join("checkpoints")).unwrap().collect();
    // pretrain + probe + six members + full average
    assert_eq!(ckpts.len(), 9);
    let avg = load_checkpoint(&out.dir.join("checkpoints").join(format!("{}.ckpt", &out.averaged_hash[..16]))).unwrap();
    assert_eq!(avg.meta.init_hash.as_deref(), Some(out.probe_hash.as_str()));

    let manifest: ExperimentManifest = read_json(&out.dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.completed_phases, ["data", "pretrain", "probe", "sweep", "average", "adapt", "metrics"]);
    assert!(manifest.failed_phase.is_none());
    assert_eq!(manifest.runs.len(), 3);
    for id in &manifest.runs {
        let run: RunManifest = read_json(&out.dir.join("manifests").join(format!("{id}.json"))).unwrap();
        run.verify(&out.dir.join("checkpoints")).unwrap();
        assert_eq!(run.init_hash, out.probe_hash);
    }

    let mut reader = csv::Reader::from_path(out.dir.join("metrics.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), METRICS_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let phase_count = |p: &str| rows.iter().filter(|r| &r[1] == p).count();
    // three test sets: source plus two targets
    assert_eq!(phase_count("member"), 18);
    assert_eq!(phase_count("average"), 6);
    assert_eq!(phase_count("adapt_after"), 2);
    assert_eq!(phase_count("adapt_before"), 2);
    let config_back = ExperimentConfig::load(&out.dir.join("config.toml")).unwrap();
    assert_eq!(config_back, small_config(tmp.path()));
}

#[test]
fn failure_is_recorded_with_its_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.pretrain.target_acc = 0.999;
    cfg.pretrain.epoch_cap = 1;
    assert!(run_experiment(&cfg, &quiet()).is_err());
    let manifest: ExperimentManifest = read_json(&tmp.path().join("small").join("manifest.json")).unwrap();
    assert_eq!(manifest.failed_phase.as_deref(), Some("pretrain"));
    assert_eq!(manifest.completed_phases, ["data"]);
}

#[test]
fn models_ablation_covers_each_population_size() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.adapt.enabled = false;
    cfg.ablation.models = vec![2, 6];
    let outs = run_ablation(&cfg, AblationAxis::Models, &quiet()).unwrap();
    assert_eq!(outs.len(), 1);
    let mut reader = csv::Reader::from_path(tmp.path().join("ablation_models.csv")).unwrap();
    let mut ms: Vec<String> = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == "average")
        .map(|r| r[6].to_string())
        .collect();
    ms.dedup();
    assert_eq!(ms, ["2", "6"]);
}

#[test]
fn optimizer_ablation_changes_only_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.n_runs = 1;
    cfg.average.m_values = vec![2];
    let outs = run_ablation(&cfg, AblationAxis::Optimizer, &quiet()).unwrap();
    assert_eq!(outs.len(), 2);
    for o in &outs {
        let adapt_opt: Vec<&str> = o.rows.iter().filter(|r| r.phase.starts_with("adapt")).map(|r| r.optimizer.as_str()).collect();
        assert!(adapt_opt.iter().all(|&x| x == cfg.adapt.hp.optimizer.name()));
    }
    assert_eq!(outs[0].pretrain_hash, outs[1].pretrain_hash);
    assert_ne!(outs[0].member_hashes, outs[1].member_hashes);
}
