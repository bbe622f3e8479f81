//! Training procedures: shared-initialization pretraining, linear probing,
//! the paired sweep with gradient diversity, and k-shot adaptation before
//! or after weight averaging.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{average_params, weight_average, ModelPopulation};
use crate::data::{k_shot_sample, DomainDataset};
use crate::diversity::{self, feature_gradient, regularized_loss};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamSet};
use crate::optim::{BaseRule, LossEval, OptConfig, Optimizer};
use crate::seed::derive;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    SamSgd,
    SamAdam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::SamSgd => "sam_sgd",
            OptimizerKind::SamAdam => "sam_adam",
        }
    }
}

/// One sweep member's training configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub sam_rho: f64,
    pub dropout: f64,
    pub diversity_coeff: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 0.0,
            sam_rho: 0.05,
            dropout: 0.0,
            diversity_coeff: 1.0,
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerKind::SamAdam,
        }
    }
}

impl HyperParams {
    pub fn opt_config(&self) -> OptConfig {
        let cfg = match self.optimizer {
            OptimizerKind::Sgd => OptConfig::sgd(self.learning_rate),
            OptimizerKind::Adam => OptConfig::adam(self.learning_rate),
            OptimizerKind::SamSgd => OptConfig::sam(self.sam_rho, BaseRule::sgd(), self.learning_rate),
            OptimizerKind::SamAdam => OptConfig::sam(self.sam_rho, BaseRule::adam(), self.learning_rate),
        };
        cfg.with_weight_decay(self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.opt_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.diversity_coeff >= 0.0) {
            return Err(Error::InvalidArgument("diversity coefficient must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerKind) -> Self {
        self.optimizer = optimizer;
        self
    }
}

/// Candidate values for the random hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpace {
    pub learning_rate: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub sam_rho: Vec<f64>,
    pub dropout: Vec<f64>,
    pub diversity_coeff: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for SweepSpace {
    /// Learning rate {1,3,5}e-5, weight decay {1e-4, 1e-6}, rho {0.01, 0.02,
    /// 0.05, 0.1}, dropout {0, 0.1, 0.5}; 100 epochs, batch 64.
    fn default() -> Self {
        Self {
            learning_rate: vec![1e-5, 3e-5, 5e-5],
            weight_decay: vec![1e-4, 1e-6],
            sam_rho: vec![0.01, 0.02, 0.05, 0.1],
            dropout: vec![0.0, 0.1, 0.5],
            diversity_coeff: vec![1.0],
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerKind::SamAdam,
        }
    }
}

impl SweepSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", &self.learning_rate),
            ("weight_decay", &self.weight_decay),
            ("sam_rho", &self.sam_rho),
            ("dropout", &self.dropout),
            ("diversity_coeff", &self.diversity_coeff),
        ] {
            if v.is_empty() {
                return Err(Error::Config(format!("sweep.{name} must list at least one value")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("sweep.epochs and sweep.batch_size must be positive".into()));
        }
        // every combination must be a valid configuration
        for &lr in &self.learning_rate {
            for &wd in &self.weight_decay {
                for &rho in &self.sam_rho {
                    for &p in &self.dropout {
                        for &div in &self.diversity_coeff {
                            let hp = HyperParams {
                                learning_rate: lr,
                                weight_decay: wd,
                                sam_rho: rho,
                                dropout: p,
                                diversity_coeff: div,
                                epochs: self.epochs,
                                batch_size: self.batch_size,
                                optimizer: self.optimizer,
                            };
                            hp.validate().map_err(|e| Error::Config(format!("sweep: {e}")))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws each hyperparameter uniformly from its candidate list.
    pub fn sample(&self, seed: u64) -> HyperParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |v: &[f64]| *v.choose(&mut rng).expect("validated non-empty");
        HyperParams {
            learning_rate: pick(&self.learning_rate),
            weight_decay: pick(&self.weight_decay),
            sam_rho: pick(&self.sam_rho),
            dropout: pick(&self.dropout),
            diversity_coeff: pick(&self.diversity_coeff),
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }
}

/// Accuracy of a model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Eval-mode argmax accuracy; ties go to the lowest class index.
pub fn evaluate(model: &ParamSet, ds: &DomainDataset) -> Result<Evaluation> {
    let logits = models::predict_logits(model, &ds.x)?;
    let c = ds.num_classes;
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (i, &y) in ds.y.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        total[y] += 1;
        if best == y {
            correct[y] += 1;
        }
    }
    let n: usize = total.iter().sum();
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / n as f64,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&k, &t)| if t == 0 { 0.0 } else { k as f64 / t as f64 })
            .collect(),
    })
}

fn batch_tensors(ds: &DomainDataset, onehot: &Tensor, idx: &[usize]) -> (Tensor, Tensor) {
    (ds.x.select_rows(idx), onehot.select_rows(idx))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, "epoch", epoch as u64)));
    order
}

fn cross_entropy_eval(model: &ParamSet, x: &Tensor, y: &Tensor, dropout_seed: u64) -> Result<LossEval> {
    let mut g = Graph::new(dropout_seed);
    let fwd = models::forward(model, x, true, true, &mut g)?;
    let yn = g.constant(y.clone());
    let loss = g.softmax_cross_entropy(fwd.logits, yn)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .zip(model.tensors())
        .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(LossEval { loss: value, grads })
}

/// Plain cross-entropy training of one model.
///
/// `frozen` marks tensors that must not change. `after_epoch` is called with
/// the epoch index and current parameters; returning `true` stops training.
pub fn train_single(
    params: &ParamSet,
    ds: &DomainDataset,
    hp: &HyperParams,
    frozen: Option<Vec<bool>>,
    seed: u64,
    mut after_epoch: impl FnMut(usize, &ParamSet) -> Result<bool>,
) -> Result<ParamSet> {
    hp.validate()?;
    let mut opt = Optimizer::new(hp.opt_config())?;
    if let Some(mask) = frozen {
        opt = opt.with_frozen(mask);
    }
    let mut current = params.clone().with_dropout(hp.dropout);
    let onehot = ds.one_hot();
    let mut step = 0u64;
    for epoch in 0..hp.epochs {
        let order = epoch_order(ds.len(), seed, epoch);
        for chunk in order.chunks(hp.batch_size) {
            let (x, y) = batch_tensors(ds, &onehot, chunk);
            let drop_seed = derive(seed, "dropout", step);
            let (next, _) = opt.step(&current, |p| cross_entropy_eval(p, &x, &y, drop_seed))?;
            current = next;
            step += 1;
        }
        if after_epoch(epoch, &current)? {
            break;
        }
    }
    Ok(current.with_dropout(params.spec().dropout()))
}

/// Options for shared-initialization pretraining.
#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub hp: HyperParams,
    pub epoch_cap: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            epoch_cap: 200,
        }
    }
}

/// Trains from a seeded init until source-train accuracy reaches `target_acc`.
pub fn pretrain_shared_init(
    spec: &ModelSpec,
    source: &DomainDataset,
    target_acc: f64,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<ParamSet> {
    let start = models::init(spec, derive(seed, "pretrain/init", 0))?;
    if !(target_acc > 0.0 && target_acc < 1.0) {
        let reached = evaluate(&start, source)?.accuracy;
        return Err(Error::ThresholdUnreachable {
            target: target_acc,
            reached,
            epochs: 0,
        });
    }
    let mut hp = opts.hp;
    hp.epochs = opts.epoch_cap;
    let mut reached = 0.0;
    let mut epochs = 0;
    let trained = train_single(&start, source, &hp, None, derive(seed, "pretrain/train", 0), |e, p| {
        reached = evaluate(p, source)?.accuracy;
        epochs = e + 1;
        Ok(reached >= target_acc)
    })?;
    if reached < target_acc {
        return Err(Error::ThresholdUnreachable {
            target: target_acc,
            reached,
            epochs,
        });
    }
    Ok(trained)
}

/// Trains only the linear head; feature-extractor tensors are left bit-identical.
pub fn linear_probe(init: &ParamSet, source: &DomainDataset, hp: &HyperParams, seed: u64) -> Result<ParamSet> {
    let frozen = init.head_mask().into_iter().map(|is_head| !is_head).collect();
    train_single(init, source, hp, Some(frozen), seed, |_, _| Ok(false))
}

/// Seeds of one paired run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSeeds {
    pub hp: u64,
    pub member_a: u64,
    pub member_b: u64,
}

/// Outcome of one paired run.
#[derive(Clone, Debug)]
pub struct PairRun {
    pub run_index: usize,
    pub hp: HyperParams,
    pub seeds: PairSeeds,
    pub model_a: ParamSet,
    pub model_b: ParamSet,
    /// Eval-mode mean feature-gradient similarity on a fixed probe subset,
    /// measured after every epoch.
    pub cossim_trajectory: Vec<f64>,
}

const COSSIM_PROBE: usize = 256;

/// Feature gradients of `model` in eval mode.
fn eval_feature_grad(model: &ParamSet, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let logits = models::predict_logits(model, x)?;
    let mut g = Graph::new(0);
    let l = g.constant(logits);
    let p = g.softmax(l)?;
    feature_gradient(model.head_weight(), g.value(p), y)
}

/// Jointly trains two copies of `init` with the diversity-regularized loss.
///
/// Each model walks its own batch order; the similarity term for a batch
/// compares against the partner's eval-mode feature gradients on that same
/// batch, held constant.
pub fn train_pair(
    init: &ParamSet,
    source: &DomainDataset,
    hp: &HyperParams,
    seed_a: u64,
    seed_b: u64,
) -> Result<(ParamSet, ParamSet, Vec<f64>)> {
    hp.validate()?;
    let mut a = init.clone().with_dropout(hp.dropout);
    let mut b = a.clone();
    let mut opt_a = Optimizer::new(hp.opt_config())?;
    let mut opt_b = Optimizer::new(hp.opt_config())?;
    let onehot = source.one_hot();
    let probe: Vec<usize> = (0..source.len().min(COSSIM_PROBE)).collect();
    let (probe_x, probe_y) = batch_tensors(source, &onehot, &probe);
    let lambda = hp.diversity_coeff;
    let mut trajectory = Vec::with_capacity(hp.epochs);
    let mut step = 0u64;
    for epoch in 0..hp.epochs {
        let order_a = epoch_order(source.len(), seed_a, epoch);
        let order_b = epoch_order(source.len(), seed_b, epoch);
        for (chunk_a, chunk_b) in order_a.chunks(hp.batch_size).zip(order_b.chunks(hp.batch_size)) {
            let (xa, ya) = batch_tensors(source, &onehot, chunk_a);
            let (xb, yb) = batch_tensors(source, &onehot, chunk_b);
            let drop_a = derive(seed_a, "dropout", step);
            let drop_b = derive(seed_b, "dropout", step);
            let (next_a, next_b) = if lambda == 0.0 {
                let na = opt_a.step(&a, |p| cross_entropy_eval(p, &xa, &ya, drop_a))?.0;
                let nb = opt_b.step(&b, |p| cross_entropy_eval(p, &xb, &yb, drop_b))?.0;
                (na, nb)
            } else {
                let partner_for_a = eval_feature_grad(&b, &xa, &ya)?;
                let partner_for_b = eval_feature_grad(&a, &xb, &yb)?;
                let na = opt_a
                    .step(&a, |p| regularized_loss(p, &xa, &ya, &partner_for_a, lambda, true, drop_a))?
                    .0;
                let nb = opt_b
                    .step(&b, |p| regularized_loss(p, &xb, &yb, &partner_for_b, lambda, true, drop_b))?
                    .0;
                (na, nb)
            };
            a = next_a;
            b = next_b;
            step += 1;
        }
        trajectory.push(diversity::mean_cossim(&a, &b, &probe_x, &probe_y)?);
    }
    let dropout = init.spec().dropout();
    Ok((a.with_dropout(dropout), b.with_dropout(dropout), trajectory))
}

/// Sweep options beyond the search space.
#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Give both members of a pair the same seeds (no symmetry breaking).
    pub identical_pair_seeds: bool,
    /// Worker threads; `None` or 1 runs serially.
    pub jobs: Option<usize>,
}

/// Result of a sweep: `2 · n_runs` members descending from one init.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub init: ParamSet,
    pub population: ModelPopulation,
    pub runs: Vec<PairRun>,
}

impl SweepResult {
    /// Member `2r` and `2r + 1` come from run `r`.
    pub fn run_of_member(&self, member: usize) -> &PairRun {
        &self.runs[member / 2]
    }
}

pub fn pair_seeds(master_seed: u64, run: usize, identical: bool) -> PairSeeds {
    let member_a = derive(master_seed, "sweep/member", 2 * run as u64);
    PairSeeds {
        hp: derive(master_seed, "sweep/hp", run as u64),
        member_a,
        member_b: if identical {
            member_a
        } else {
            derive(master_seed, "sweep/member", 2 * run as u64 + 1)
        },
    }
}

/// Runs `n_runs` paired trainings from `init` with sampled hyperparameters.
pub fn sweep_train(
    init: &ParamSet,
    init_hash: &str,
    source: &DomainDataset,
    n_runs: usize,
    space: &SweepSpace,
    master_seed: u64,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    space.validate()?;
    let run_one = |r: usize| -> Result<PairRun> {
        let seeds = pair_seeds(master_seed, r, opts.identical_pair_seeds);
        let hp = space.sample(seeds.hp);
        let (model_a, model_b, cossim_trajectory) = train_pair(init, source, &hp, seeds.member_a, seeds.member_b)
            .map_err(|e| Error::RunFailed {
                run_id: run_id(master_seed, r),
                source: Box::new(e),
            })?;
        Ok(PairRun {
            run_index: r,
            hp,
            seeds,
            model_a,
            model_b,
            cossim_trajectory,
        })
    };
    let jobs = opts.jobs.unwrap_or(1).max(1);
    let runs: Vec<PairRun> = if jobs == 1 {
        (0..n_runs).map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| (0..n_runs).into_par_iter().map(run_one).collect::<Result<_>>())?
    };
    let mut members = Vec::with_capacity(2 * n_runs);
    let mut manifests = Vec::with_capacity(2 * n_runs);
    for run in &runs {
        members.push(run.model_a.clone());
        members.push(run.model_b.clone());
        let id = run_id(master_seed, run.run_index);
        manifests.push(id.clone());
        manifests.push(id);
    }
    let mut population = ModelPopulation::new(members, init_hash);
    population.manifests = manifests;
    Ok(SweepResult {
        init: init.clone(),
        population,
        runs,
    })
}

pub fn run_id(master_seed: u64, run: usize) -> String {
    format!("run-{master_seed}-{run:03}")
}

/// Fine-tunes on `k` target samples per class.
///
/// With `head_only` the feature extractor is frozen.
pub fn adapt(
    model: &ParamSet,
    target_train: &DomainDataset,
    k: usize,
    hp: &HyperParams,
    seed: u64,
    head_only: bool,
) -> Result<ParamSet> {
    let shots = k_shot_sample(target_train, k, derive(seed, "adapt/select", 0))?;
    let frozen = head_only.then(|| model.head_mask().into_iter().map(|h| !h).collect());
    train_single(model, &shots, hp, frozen, derive(seed, "adapt/train", 0), |_, _| Ok(false))
}

/// Adaptation settings shared by both orderings.
#[derive(Clone, Copy, Debug)]
pub struct AdaptSpec<'a> {
    pub target_train: &'a DomainDataset,
    pub target_test: &'a DomainDataset,
    pub k: usize,
    pub hp: &'a HyperParams,
    pub seed: u64,
    pub head_only: bool,
}

/// Average the population uniformly, adapt the average, test it.
pub fn adapt_after_wa(pop: &ModelPopulation, spec: &AdaptSpec<'_>) -> Result<f64> {
    let averaged = weight_average(pop, None, false)?.params;
    let adapted = adapt(&averaged, spec.target_train, spec.k, spec.hp, spec.seed, spec.head_only)?;
    Ok(evaluate(&adapted, spec.target_test)?.accuracy)
}

/// Adapt every member on the same k-shot selection, average, test.
pub fn adapt_before_wa(pop: &ModelPopulation, spec: &AdaptSpec<'_>) -> Result<f64> {
    weight_average(pop, None, false)?;
    let adapted: Vec<ParamSet> = pop
        .members
        .iter()
        .map(|m| adapt(m, spec.target_train, spec.k, spec.hp, spec.seed, spec.head_only))
        .collect::<Result<_>>()?;
    let refs: Vec<&ParamSet> = adapted.iter().collect();
    let averaged = average_params(&refs)?;
    Ok(evaluate(&averaged, spec.target_test)?.accuracy)
}
