//! End-to-end experiment: pretrain → probe → sweep → average → adapt → evaluate.
//!
//! Output tree under `<out_dir>/<experiment_id>/`:
//!
//! ```text
//! config.toml        resolved configuration
//! metrics.csv        one row per (model, domain) evaluation
//! manifest.json      phase progress; rewritten after each phase
//! checkpoints/       content-addressed *.ckpt
//! manifests/         one RunManifest per sweep run
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{save_in_dir, CheckpointMeta};
use super::config::{AdaptOrder, ExperimentConfig};
use super::manifest::{write_json, ExperimentManifest, RunManifest};
use crate::averaging::{mean_pairwise_angle, weight_average};
use crate::data::{generate_split, DomainDataset};
use crate::diversity;
use crate::error::{Error, Result};
use crate::fmt17;
use crate::models::ParamSet;
use crate::pipelines::{
    adapt_after_wa, adapt_before_wa, evaluate, linear_probe, pretrain_shared_init, run_id, sweep_train, AdaptSpec,
    SweepOptions, SweepResult,
};
use crate::seed::derive;

/// Column order of metrics.csv.
pub const METRICS_HEADER: [&str; 13] = [
    "experiment_id",
    "phase",
    "model_id",
    "domain_id",
    "split",
    "k",
    "m_averaged",
    "optimizer",
    "diversity_coeff",
    "seed",
    "accuracy",
    "mean_cossim",
    "model_angle_mean",
];

/// One metrics.csv row. Floats are pre-formatted with 17 significant digits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub phase: String,
    pub model_id: String,
    pub domain_id: String,
    pub split: String,
    pub k: Option<usize>,
    pub m_averaged: Option<usize>,
    pub optimizer: String,
    pub diversity_coeff: Option<String>,
    pub seed: u64,
    pub accuracy: String,
    pub mean_cossim: Option<String>,
    pub model_angle_mean: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parallel sweep runs; falls back to `SHIFTLAB_JOBS`, then 1.
    pub jobs: Option<usize>,
    pub quiet: bool,
}

/// `--jobs` value, else `SHIFTLAB_JOBS`, else 1.
pub fn resolve_jobs(flag: Option<usize>) -> Result<usize> {
    if let Some(j) = flag {
        return if j == 0 {
            Err(Error::InvalidArgument("--jobs must be at least 1".into()))
        } else {
            Ok(j)
        };
    }
    match std::env::var("SHIFTLAB_JOBS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&j| j > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("SHIFTLAB_JOBS='{v}' is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

/// What an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub pretrain_hash: String,
    pub probe_hash: String,
    pub member_hashes: Vec<String>,
    pub averaged_hash: String,
}

/// Train/test splits of the source and every target domain.
pub struct Domains {
    pub source: (DomainDataset, DomainDataset),
    pub targets: Vec<(DomainDataset, DomainDataset)>,
}

impl Domains {
    pub fn test_sets(&self) -> impl Iterator<Item = &DomainDataset> {
        std::iter::once(&self.source.1).chain(self.targets.iter().map(|t| &t.1))
    }
}

pub fn build_domains(cfg: &ExperimentConfig) -> Result<Domains> {
    let family = cfg.data.family()?;
    let make = |domain: &crate::data::Domain| {
        generate_split(
            &family,
            domain,
            cfg.data.n_train,
            cfg.data.n_test,
            cfg.data.noise,
            derive(cfg.master_seed, &format!("data/{}", domain.id()), 0),
        )
    };
    Ok(Domains {
        source: make(&cfg.data.source_domain()?)?,
        targets: cfg.data.target_domains()?.iter().map(make).collect::<Result<_>>()?,
    })
}

fn short(hash: &str) -> String {
    hash[..16].to_string()
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    ckpt_dir: PathBuf,
    manifest: ExperimentManifest,
    rows: Vec<MetricsRow>,
    quiet: bool,
}

impl Ctx<'_> {
    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.cfg.experiment_id);
        }
    }

    fn phase_done(&mut self, phase: &str) -> Result<()> {
        self.manifest.completed_phases.push(phase.to_string());
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_rows(
        &mut self,
        phase: &str,
        model: &ParamSet,
        model_id: &str,
        sets: &[&DomainDataset],
        optimizer: &str,
        diversity_coeff: Option<f64>,
        seed: u64,
        mean_cossim: Option<f64>,
        m_averaged: Option<usize>,
        model_angle_mean: Option<f64>,
    ) -> Result<()> {
        for ds in sets {
            let acc = evaluate(model, ds)?.accuracy;
            self.rows.push(MetricsRow {
                experiment_id: self.cfg.experiment_id.clone(),
                phase: phase.into(),
                model_id: model_id.into(),
                domain_id: ds.domain_id.clone(),
                split: ds.split.to_string(),
                k: None,
                m_averaged,
                optimizer: optimizer.into(),
                diversity_coeff: diversity_coeff.map(fmt17),
                seed,
                accuracy: fmt17(acc),
                mean_cossim: mean_cossim.map(fmt17),
                model_angle_mean: model_angle_mean.map(fmt17),
            });
        }
        Ok(())
    }
}

/// Runs the configured pipeline and writes its output tree.
///
/// On failure the manifest records the failed phase and the error.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let jobs = resolve_jobs(opts.jobs)?;
    let dir = cfg.out_dir.join(&cfg.experiment_id);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(dir.join("manifests"))?;
    super::checkpoint::write_atomic(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let mut ctx = Ctx {
        cfg,
        dir: dir.clone(),
        ckpt_dir,
        manifest: ExperimentManifest {
            experiment_id: cfg.experiment_id.clone(),
            master_seed: cfg.master_seed,
            ..Default::default()
        },
        rows: Vec::new(),
        quiet: opts.quiet,
    };
    let mut phase = "data";
    match run_phases(&mut ctx, jobs, &mut phase) {
        Ok(out) => Ok(out),
        Err(e) => {
            ctx.manifest.failed_phase = Some(phase.to_string());
            ctx.manifest.error = Some(e.to_string());
            write_json(&dir.join("manifest.json"), &ctx.manifest)?;
            Err(e)
        }
    }
}

fn run_phases(ctx: &mut Ctx<'_>, jobs: usize, phase: &mut &'static str) -> Result<ExperimentOutput> {
    let cfg = ctx.cfg;
    let spec = cfg.model_spec()?;
    let domains = build_domains(cfg)?;
    let tests: Vec<&DomainDataset> = domains.test_sets().collect();
    let source_train = &domains.source.0;
    ctx.phase_done("data")?;

    *phase = "pretrain";
    ctx.log("pretraining shared initialization");
    let pre_seed = derive(cfg.master_seed, "pretrain", 0);
    let pretrained = pretrain_shared_init(&spec, source_train, cfg.pretrain.target_acc, pre_seed, &cfg.pretrain.options())?;
    let meta = CheckpointMeta::new("pretrain")
        .with_seed("pretrain", pre_seed)
        .with_hyperparams(&cfg.pretrain.hp)?;
    let (_, pretrain_hash) = save_in_dir(&ctx.ckpt_dir, &pretrained, &meta)?;
    ctx.manifest.checkpoints.insert("pretrain".into(), pretrain_hash.clone());
    let opt = cfg.pretrain.hp.optimizer.name();
    ctx.eval_rows("pretrain", &pretrained, &short(&pretrain_hash), &tests, opt, None, pre_seed, None, None, None)?;
    ctx.phase_done("pretrain")?;

    *phase = "probe";
    ctx.log("linear probe");
    let probe_seed = derive(cfg.master_seed, "probe", 0);
    let probed = linear_probe(&pretrained, source_train, &cfg.probe.hp, probe_seed)?;
    let meta = CheckpointMeta::new("probe")
        .with_init_hash(&pretrain_hash)
        .with_seed("probe", probe_seed)
        .with_hyperparams(&cfg.probe.hp)?;
    let (_, probe_hash) = save_in_dir(&ctx.ckpt_dir, &probed, &meta)?;
    ctx.manifest.checkpoints.insert("probe".into(), probe_hash.clone());
    let opt = cfg.probe.hp.optimizer.name();
    ctx.eval_rows("probe", &probed, &short(&probe_hash), &tests, opt, None, probe_seed, None, None, None)?;
    ctx.phase_done("probe")?;

    *phase = "sweep";
    ctx.log(&format!("sweep: {} paired runs on {jobs} worker(s)", cfg.n_runs));
    let sweep_seed = derive(cfg.master_seed, "sweep", 0);
    let sweep_opts = SweepOptions {
        identical_pair_seeds: false,
        jobs: Some(jobs),
    };
    let result = sweep_train(&probed, &probe_hash, source_train, cfg.n_runs, &cfg.sweep, sweep_seed, &sweep_opts);
    let result = match result {
        Ok(r) => r,
        Err(Error::RunFailed { run_id, source }) => {
            ctx.manifest.runs.push(run_id.clone());
            write_json(
                &ctx.dir.join("manifests").join(format!("{run_id}.json")),
                &serde_json::json!({ "run_id": run_id, "status": "failed", "error": source.to_string() }),
            )?;
            return Err(Error::RunFailed { run_id, source });
        }
        Err(e) => return Err(e),
    };
    let member_hashes = record_sweep(ctx, &result, sweep_seed, &probe_hash, &tests, &domains.source.1)?;
    ctx.phase_done("sweep")?;

    *phase = "average";
    ctx.log("weight averaging");
    let full = weight_average(&result.population, None, cfg.average.allow_mixed_init)?;
    let meta = CheckpointMeta::new("average").with_init_hash(&probe_hash);
    let (_, averaged_hash) = save_in_dir(&ctx.ckpt_dir, &full.params, &meta)?;
    ctx.manifest.checkpoints.insert("average".into(), averaged_hash.clone());
    let m_all = result.population.len();
    let mut m_values = cfg.average.m_values.clone();
    if m_values.is_empty() {
        m_values.push(m_all);
    }
    let opt = cfg.sweep.optimizer.name();
    for &m in &m_values {
        let subset: Vec<usize> = (0..m).collect();
        let avg = if m == m_all {
            full.params.clone()
        } else {
            weight_average(&result.population, Some(&subset), cfg.average.allow_mixed_init)?.params
        };
        let refs: Vec<&ParamSet> = subset.iter().map(|&i| &result.population.members[i]).collect();
        let angle = mean_pairwise_angle(&refs, &probed)?;
        let id = short(&super::checkpoint::payload_hash(&avg));
        ctx.eval_rows("average", &avg, &id, &tests, opt, None, sweep_seed, None, Some(m), Some(angle))?;
    }
    ctx.phase_done("average")?;

    if cfg.adapt.enabled {
        *phase = "adapt";
        for (target_train, target_test) in &domains.targets {
            for &k in &cfg.adapt.k {
                let adapt_seed = derive(cfg.master_seed, "adapt", k as u64);
                let spec = AdaptSpec {
                    target_train,
                    target_test,
                    k,
                    hp: &cfg.adapt.hp,
                    seed: adapt_seed,
                    head_only: cfg.adapt.head_only,
                };
                for order in &cfg.adapt.orders {
                    ctx.log(&format!("{} k={k} on {}", order.phase(), target_test.domain_id));
                    let acc = match order {
                        AdaptOrder::After => adapt_after_wa(&result.population, &spec)?,
                        AdaptOrder::Before => adapt_before_wa(&result.population, &spec)?,
                    };
                    ctx.rows.push(MetricsRow {
                        experiment_id: cfg.experiment_id.clone(),
                        phase: order.phase().into(),
                        model_id: short(&averaged_hash),
                        domain_id: target_test.domain_id.clone(),
                        split: target_test.split.to_string(),
                        k: Some(k),
                        m_averaged: Some(m_all),
                        optimizer: cfg.adapt.hp.optimizer.name().into(),
                        diversity_coeff: None,
                        seed: adapt_seed,
                        accuracy: fmt17(acc),
                        mean_cossim: None,
                        model_angle_mean: None,
                    });
                }
            }
        }
        ctx.phase_done("adapt")?;
    }

    *phase = "metrics";
    write_metrics(&ctx.dir.join("metrics.csv"), &ctx.rows)?;
    ctx.phase_done("metrics")?;
    Ok(ExperimentOutput {
        dir: ctx.dir.clone(),
        rows: ctx.rows.clone(),
        pretrain_hash,
        probe_hash,
        member_hashes,
        averaged_hash,
    })
}

fn record_sweep(
    ctx: &mut Ctx<'_>,
    result: &SweepResult,
    sweep_seed: u64,
    probe_hash: &str,
    tests: &[&DomainDataset],
    source_test: &DomainDataset,
) -> Result<Vec<String>> {
    let mut hashes = Vec::with_capacity(result.population.len());
    let probe_y = source_test.one_hot();
    for run in &result.runs {
        let id = run_id(sweep_seed, run.run_index);
        let heldout = diversity::mean_cossim(&run.model_a, &run.model_b, &source_test.x, &probe_y)?;
        let mut run_hashes = Vec::new();
        let mut metrics = BTreeMap::new();
        metrics.insert("heldout_mean_cossim".to_string(), heldout);
        for (slot, (model, seed)) in [(&run.model_a, run.seeds.member_a), (&run.model_b, run.seeds.member_b)]
            .into_iter()
            .enumerate()
        {
            let meta = CheckpointMeta::new("member")
                .with_init_hash(probe_hash)
                .with_seed("member", seed)
                .with_seed("hyperparams", run.seeds.hp)
                .with_hyperparams(&run.hp)?;
            let (_, hash) = save_in_dir(&ctx.ckpt_dir, model, &meta)?;
            ctx.eval_rows(
                "member",
                model,
                &short(&hash),
                tests,
                run.hp.optimizer.name(),
                Some(run.hp.diversity_coeff),
                seed,
                Some(heldout),
                None,
                None,
            )?;
            for ds in tests {
                metrics.insert(format!("member{slot}/{}/accuracy", ds.domain_id), evaluate(model, ds)?.accuracy);
            }
            run_hashes.push(hash);
        }
        let manifest = RunManifest {
            run_id: id.clone(),
            master_seed: sweep_seed,
            run_index: run.run_index,
            hyperparams: run.hp,
            seeds: run.seeds,
            init_hash: probe_hash.to_string(),
            checkpoints: run_hashes.clone(),
            metrics,
        };
        write_json(&ctx.dir.join("manifests").join(format!("{id}.json")), &manifest)?;
        ctx.manifest.runs.push(id);
        hashes.extend(run_hashes);
    }
    Ok(hashes)
}

/// Writes rows with the fixed header; RFC 4180 quoting where needed.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    super::checkpoint::write_atomic(path, &bytes)
}

/// Ablation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Models,
    Optimizer,
    Shots,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "models" => Ok(Self::Models),
            "optimizer" => Ok(Self::Optimizer),
            "shots" => Ok(Self::Shots),
            _ => Err(Error::InvalidArgument(format!("axis must be models, optimizer or shots, got '{s}'"))),
        }
    }
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Models => "models",
            Self::Optimizer => "optimizer",
            Self::Shots => "shots",
        }
    }
}

/// Runs one experiment per ablation variant and concatenates their rows into
/// `<out_dir>/ablation_<axis>.csv`.
pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis, opts: &RunOptions) -> Result<Vec<ExperimentOutput>> {
    cfg.validate()?;
    let mut variants = Vec::new();
    match axis {
        AblationAxis::Models => {
            let mut c = cfg.clone();
            let max_m = c.ablation.models.iter().copied().max().unwrap_or(2);
            c.n_runs = c.n_runs.max(max_m.div_ceil(2));
            c.average.m_values = c.ablation.models.clone();
            c.experiment_id = format!("{}-models", cfg.experiment_id);
            variants.push(c);
        }
        AblationAxis::Shots => {
            let mut c = cfg.clone();
            c.adapt.enabled = true;
            c.adapt.k = c.ablation.shots.clone();
            c.experiment_id = format!("{}-shots", cfg.experiment_id);
            variants.push(c);
        }
        AblationAxis::Optimizer => {
            // Only the sweep optimizer varies; adaptation stays fixed so the
            // comparison isolates how members were trained.
            for o in &cfg.ablation.optimizers {
                let mut c = cfg.clone();
                c.sweep.optimizer = *o;
                c.experiment_id = format!("{}-opt-{}", cfg.experiment_id, o.name());
                variants.push(c);
            }
        }
    }
    for v in &variants {
        v.validate()?;
    }
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for v in &variants {
        let out = run_experiment(v, opts)?;
        rows.extend(out.rows.iter().cloned());
        outputs.push(out);
    }
    write_metrics(&cfg.out_dir.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    Ok(outputs)
}

/// Loads members, rebuilding a population whose init hash is the first
/// member's recorded one.
pub fn population_from_checkpoints(paths: &[PathBuf]) -> Result<crate::averaging::ModelPopulation> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("at least one checkpoint is required".into()));
    }
    let mut members = Vec::new();
    let mut inits = Vec::new();
    let mut ids = Vec::new();
    for p in paths {
        let ck = super::checkpoint::load_checkpoint(p)?;
        inits.push(ck.meta.init_hash.clone().unwrap_or_else(|| ck.hash.clone()));
        ids.push(ck.hash.clone());
        members.push(ck.params);
    }
    let mut pop = crate::averaging::ModelPopulation::new(members, inits[0].clone());
    pop.member_init_hashes = inits;
    pop.manifests = ids;
    Ok(pop)
}
