//! Command-line surface. Exit codes: 0 success, 1 usage or validation error,
//! 2 runtime error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::averaging::{model_angle, weight_average};
use crate::data::{generate_split, Domain, Split};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, load_params, save_in_dir, CheckpointMeta};
use crate::harness::config::{AdaptOrder, ExperimentConfig};
use crate::harness::experiment::{
    build_domains, population_from_checkpoints, resolve_jobs, run_ablation, run_experiment, AblationAxis, RunOptions,
};
use crate::pipelines::{
    adapt_after_wa, adapt_before_wa, evaluate, linear_probe, pretrain_shared_init, sweep_train, AdaptSpec,
    SweepOptions,
};
use crate::seed::derive;

#[derive(Parser, Debug)]
#[command(name = "shiftlab", version, about = "Weight averaging and few-shot adaptation under covariate shift")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment configuration (TOML with dotted keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Parallel sweep runs (fallback: SHIFTLAB_JOBS).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the shared initialization on the source domain.
    Pretrain,
    /// Train only the linear head of a checkpoint.
    Probe { init: PathBuf },
    /// Paired sweep from a probed checkpoint.
    Sweep {
        init: PathBuf,
        /// Overrides n_runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Uniformly average checkpoints.
    Average {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated member indices.
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<usize>>,
        #[arg(long)]
        allow_mixed_init: bool,
    },
    /// Few-shot adaptation of a population on the first target domain.
    Adapt {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "after")]
        order: String,
        /// Target domain id; defaults to the first configured target.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Accuracy of a checkpoint on a domain split.
    Eval {
        checkpoint: PathBuf,
        /// Domain id; defaults to every configured domain.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Angle in degrees between two checkpoints' displacements from an init.
    Angle { a: PathBuf, b: PathBuf, init: PathBuf },
    /// Full pipeline from a config file.
    Experiment,
    /// Run an ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
    },
    /// Write a generated domain split as CSV.
    ExportData {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global, cfg: &ExperimentConfig) -> PathBuf {
    g.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn say(g: &Global, line: impl AsRef<str>) {
    if !g.quiet {
        println!("{}", line.as_ref());
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("no such checkpoint: {}", p.display())))
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    let opts = RunOptions {
        jobs: Some(resolve_jobs(g.jobs)?),
        quiet: g.quiet,
    };
    let out = out_dir(g, &cfg);
    match &cli.command {
        Command::Pretrain => {
            let domains = build_domains(&cfg)?;
            let seed = derive(cfg.master_seed, "pretrain", 0);
            let spec = cfg.model_spec()?;
            let model = pretrain_shared_init(&spec, &domains.source.0, cfg.pretrain.target_acc, seed, &cfg.pretrain.options())?;
            let meta = CheckpointMeta::new("pretrain").with_seed("pretrain", seed);
            let (path, hash) = save_in_dir(&out, &model, &meta)?;
            say(g, format!("{hash} {}", path.display()));
        }
        Command::Probe { init } => {
            require_file(init)?;
            let ck = load_checkpoint(init)?;
            let domains = build_domains(&cfg)?;
            let seed = derive(cfg.master_seed, "probe", 0);
            let probed = linear_probe(&ck.params, &domains.source.0, &cfg.probe.hp, seed)?;
            let meta = CheckpointMeta::new("probe").with_init_hash(&ck.hash).with_seed("probe", seed);
            let (path, hash) = save_in_dir(&out, &probed, &meta)?;
            say(g, format!("{hash} {}", path.display()));
        }
        Command::Sweep { init, runs } => {
            require_file(init)?;
            let ck = load_checkpoint(init)?;
            let domains = build_domains(&cfg)?;
            let seed = derive(cfg.master_seed, "sweep", 0);
            let sweep_opts = SweepOptions {
                identical_pair_seeds: false,
                jobs: opts.jobs,
            };
            let n_runs = runs.unwrap_or(cfg.n_runs);
            let result = sweep_train(&ck.params, &ck.hash, &domains.source.0, n_runs, &cfg.sweep, seed, &sweep_opts)?;
            for (i, m) in result.population.members.iter().enumerate() {
                let run = result.run_of_member(i);
                let member_seed = if i % 2 == 0 { run.seeds.member_a } else { run.seeds.member_b };
                let meta = CheckpointMeta::new("member")
                    .with_init_hash(&ck.hash)
                    .with_seed("member", member_seed)
                    .with_hyperparams(&run.hp)?;
                let (path, hash) = save_in_dir(&out, m, &meta)?;
                say(g, format!("{hash} {}", path.display()));
            }
        }
        Command::Average {
            checkpoints,
            subset,
            allow_mixed_init,
        } => {
            checkpoints.iter().try_for_each(|p| require_file(p))?;
            let pop = population_from_checkpoints(checkpoints)?;
            let avg = weight_average(&pop, subset.as_deref(), *allow_mixed_init)?;
            let mut meta = CheckpointMeta::new("average").with_init_hash(&pop.init_hash);
            if avg.init_check_overridden {
                meta.extra.insert("init_check".into(), "overridden".into());
            }
            let (path, hash) = save_in_dir(&out, &avg.params, &meta)?;
            say(g, format!("{hash} {}", path.display()));
        }
        Command::Adapt {
            checkpoints,
            k,
            order,
            domain,
        } => {
            let order: AdaptOrder = order.parse()?;
            checkpoints.iter().try_for_each(|p| require_file(p))?;
            let pop = population_from_checkpoints(checkpoints)?;
            let family = cfg.data.family()?;
            let target: Domain = match domain {
                Some(d) => d.parse()?,
                None => cfg
                    .data
                    .target_domains()?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Config("no target domain configured".into()))?,
            };
            let (train, test) = generate_split(
                &family,
                &target,
                cfg.data.n_train,
                cfg.data.n_test,
                cfg.data.noise,
                derive(cfg.master_seed, &format!("data/{}", target.id()), 0),
            )?;
            let spec = AdaptSpec {
                target_train: &train,
                target_test: &test,
                k: *k,
                hp: &cfg.adapt.hp,
                seed: derive(cfg.master_seed, "adapt", *k as u64),
                head_only: cfg.adapt.head_only,
            };
            let acc = match order {
                AdaptOrder::After => adapt_after_wa(&pop, &spec)?,
                AdaptOrder::Before => adapt_before_wa(&pop, &spec)?,
            };
            println!("{acc:.6}");
        }
        Command::Eval {
            checkpoint,
            domain,
            split,
        } => {
            require_file(checkpoint)?;
            let split = parse_split(split)?;
            let params = load_params(checkpoint)?;
            let domains = build_domains(&cfg)?;
            let mut sets = vec![&domains.source];
            sets.extend(domains.targets.iter());
            let mut found = false;
            for (train, test) in sets {
                let ds = if split == Split::Train { train } else { test };
                if domain.as_deref().is_some_and(|d| d != ds.domain_id) {
                    continue;
                }
                found = true;
                let e = evaluate(&params, ds)?;
                println!("{} {} {:.6}", ds.domain_id, ds.split, e.accuracy);
            }
            if !found {
                return Err(Error::InvalidArgument(format!(
                    "domain {} is not part of the configuration",
                    domain.as_deref().unwrap_or("")
                )));
            }
        }
        Command::Angle { a, b, init } => {
            for p in [a, b, init] {
                require_file(p)?;
            }
            let angle = model_angle(&load_params(a)?, &load_params(b)?, &load_params(init)?)?;
            println!("{:.6}", angle.degrees);
        }
        Command::Experiment => {
            let o = run_experiment(&cfg, &opts)?;
            say(g, format!("{}", o.dir.join("metrics.csv").display()));
        }
        Command::Ablate { axis } => {
            let axis: AblationAxis = axis.parse()?;
            let outs = run_ablation(&cfg, axis, &opts)?;
            for o in outs {
                say(g, format!("{}", o.dir.join("metrics.csv").display()));
            }
        }
        Command::ExportData { domain, split } => {
            let split = parse_split(split)?;
            let d: Domain = domain.parse()?;
            let (train, test) = generate_split(
                &cfg.data.family()?,
                &d,
                cfg.data.n_train,
                cfg.data.n_test,
                cfg.data.noise,
                derive(cfg.master_seed, &format!("data/{}", d.id()), 0),
            )?;
            let ds = if split == Split::Train { train } else { test };
            let path = out.join(format!("{}_{}.csv", ds.domain_id, ds.split));
            std::fs::create_dir_all(&out)?;
            let mut bytes = Vec::new();
            ds.write_csv(&mut bytes)?;
            crate::harness::checkpoint::write_atomic(&path, &bytes)?;
            say(g, format!("{}", path.display()));
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("split must be train or test, got '{s}'"))),
    }
}
