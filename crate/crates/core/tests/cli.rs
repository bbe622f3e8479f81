use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn shiftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

const CONFIG: &str = r#"
master_seed = 3
n_runs = 1
data.family = "two_moons_rotate"
data.source = "rot0"
data.targets = ["rot40"]
data.n_train = 120
data.n_test = 120
model.arch = "mlp"
model.hidden = [8]
pretrain.target_acc = 0.7
pretrain.hp.learning_rate = 5e-3
probe.hp.epochs = 2
sweep.learning_rate = [1e-3]
sweep.epochs = 2
adapt.hp.epochs = 3
"#;

/// Writes the config and returns (config path, output dir as str).
fn setup(dir: &Path) -> (PathBuf, String) {
    let cfg = dir.join("c.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (cfg, dir.join("out").to_string_lossy().into_owned())
}

fn ckpt_path(line: &str) -> String {
    line.split_whitespace().nth(1).unwrap().to_string()
}

#[test]
fn usage_and_validation_errors_exit_with_one() {
    assert_eq!(shiftlab(&[]).status.code(), Some(1));
    assert_eq!(shiftlab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(shiftlab(&["--help"]).status.code(), Some(0));
    assert_eq!(shiftlab(&["ablate", "--axis", "colour"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "n_runs = 0\n").unwrap();
    assert_eq!(shiftlab(&["--config", bad.to_str().unwrap(), "experiment"]).status.code(), Some(1));
    assert_eq!(shiftlab(&["angle", "missing", "missing", "missing"]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("x.ckpt");
    std::fs::write(&f, b"not a checkpoint").unwrap();
    let p = f.to_str().unwrap();
    let o = shiftlab(&["angle", p, p, p]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let base = vec!["--config", cfg, "--out", &out];
    let run = |extra: &[&str]| {
        let mut args = base.clone();
        args.extend_from_slice(extra);
        let o = shiftlab(&args);
        assert!(o.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };

    let pre = ckpt_path(&run(&["pretrain"]));
    let probe = ckpt_path(&run(&["probe", &pre]));
    let sweep = run(&["sweep", &probe]);
    let member_hashes: Vec<&str> = sweep.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let members: Vec<String> = sweep.lines().map(ckpt_path).collect();
    assert_eq!(members.len(), 2);

    assert_eq!(run(&["angle", &members[0], &members[0], &probe]), "0.000000");
    let angle: f64 = run(&["angle", &members[0], &members[1], &probe]).parse().unwrap();
    assert!((0.0..=180.0).contains(&angle));

    let same = run(&["average", &members[0], &members[0], &members[0]]);
    assert_eq!(same.split_whitespace().next().unwrap(), member_hashes[0]);
    let avg = ckpt_path(&run(&["average", &members[0], &members[1], "--subset", "0,1"]));

    let evals = run(&["eval", &avg]);
    assert_eq!(evals.lines().count(), 2);
    let acc: f64 = run(&["adapt", &members[0], &members[1], "--k", "3", "--order", "before"]).parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let csv = run(&["export-data", "--domain", "rot40", "--split", "test"]);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 121);

    // Mixing in a member from a different initialization needs an explicit override.
    let mixed = shiftlab(&[&base[..], &["average", &members[0], &pre]].concat());
    assert_eq!(mixed.status.code(), Some(2));
    assert!(shiftlab(&[&base[..], &["average", &members[0], &pre, "--allow-mixed-init"]].concat()).status.success());
}
