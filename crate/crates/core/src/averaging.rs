//! Uniform weight averaging and model-geometry analytics.

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::pipelines::evaluate;
use crate::tensor::{cosine, Tensor};

/// Models descending from one shared initialization.
#[derive(Clone, Debug)]
pub struct ModelPopulation {
    pub members: Vec<ParamSet>,
    /// Content hash of the shared initialization checkpoint.
    pub init_hash: String,
    /// Init hash recorded by each member.
    pub member_init_hashes: Vec<String>,
    /// Run id that produced each member.
    pub manifests: Vec<String>,
}

impl ModelPopulation {
    /// Population whose members all record `init_hash`.
    pub fn new(members: Vec<ParamSet>, init_hash: impl Into<String>) -> Self {
        let init_hash = init_hash.into();
        let n = members.len();
        Self {
            members,
            member_init_hashes: vec![init_hash.clone(); n],
            init_hash,
            manifests: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Averaged parameters plus provenance.
#[derive(Clone, Debug)]
pub struct AveragedModel {
    pub params: ParamSet,
    pub members: Vec<usize>,
    /// Set when the shared-initialization check was explicitly overridden.
    pub init_check_overridden: bool,
}

/// Elementwise mean of `subset` (all members when `None`).
///
/// The shared-initialization check can be skipped with `allow_mixed_init`;
/// the override is recorded in the result.
pub fn weight_average(
    pop: &ModelPopulation,
    subset: Option<&[usize]>,
    allow_mixed_init: bool,
) -> Result<AveragedModel> {
    let members: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..pop.members.len()).collect(),
    };
    if members.is_empty() {
        return Err(Error::InvalidArgument("cannot average an empty subset".into()));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= pop.members.len()) {
        return Err(Error::InvalidArgument(format!(
            "member index {bad} out of range for population of {}",
            pop.members.len()
        )));
    }
    let mut overridden = false;
    for &i in &members {
        let found = pop.member_init_hashes.get(i).unwrap_or(&pop.init_hash);
        if *found != pop.init_hash {
            if !allow_mixed_init {
                return Err(Error::SharedInitMismatch {
                    expected: pop.init_hash.clone(),
                    member: i,
                    found: found.clone(),
                });
            }
            overridden = true;
        }
    }
    let chosen: Vec<&ParamSet> = members.iter().map(|&i| &pop.members[i]).collect();
    Ok(AveragedModel {
        params: average_params(&chosen)?,
        members,
        init_check_overridden: overridden,
    })
}

/// Elementwise mean of parameter sets sharing one structure.
///
/// For each element the values are sorted, and the mean is taken as the
/// smallest value plus the mean offset from it. The result does not depend
/// on member order and is exact when all members agree.
pub fn average_params(models: &[&ParamSet]) -> Result<ParamSet> {
    let first = *models
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero models".into()))?;
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    let count = models.len() as f64;
    let mut column = Vec::with_capacity(models.len());
    let mut out = Vec::with_capacity(first.tensors().len());
    for (ti, (_, t0)) in first.tensors().iter().enumerate() {
        let mut avg = Tensor::zeros(t0.shape());
        for (e, slot) in avg.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(models.iter().map(|m| m.tensors()[ti].1.data()[e]));
            column.sort_by(f64::total_cmp);
            let base = column[0];
            let offset: f64 = column.iter().map(|v| v - base).sum();
            *slot = base + offset / count;
        }
        out.push(avg);
    }
    first.with_tensors(out)
}

/// Angle in degrees with a flag for zero-length displacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Angle {
    pub degrees: f64,
    pub degenerate: bool,
}

/// Angle between `θ₁ − θ_init` and `θ₂ − θ_init`.
pub fn model_angle(theta_1: &ParamSet, theta_2: &ParamSet, theta_init: &ParamSet) -> Result<Angle> {
    theta_1.check_compatible(theta_2)?;
    theta_1.check_compatible(theta_init)?;
    let init = theta_init.flatten();
    let d1: Vec<f64> = theta_1.flatten().data().iter().zip(init.data()).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = theta_2.flatten().data().iter().zip(init.data()).map(|(a, b)| a - b).collect();
    Ok(angle_between(&d1, &d2))
}

/// Angle between two raw displacement vectors.
pub fn angle_between(d1: &[f64], d2: &[f64]) -> Angle {
    let c = cosine(d1, d2);
    if c.degenerate {
        Angle {
            degrees: 0.0,
            degenerate: true,
        }
    } else {
        Angle {
            degrees: c.value.clamp(-1.0, 1.0).acos().to_degrees(),
            degenerate: false,
        }
    }
}

/// Mean angle over all unordered pairs of `members` relative to `init`.
pub fn mean_pairwise_angle(members: &[&ParamSet], init: &ParamSet) -> Result<f64> {
    if members.len() < 2 {
        return Ok(0.0);
    }
    let flat_init = init.flatten();
    let diffs: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            m.check_compatible(init)?;
            Ok(m.flatten().data().iter().zip(flat_init.data()).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..diffs.len() {
        for j in i + 1..diffs.len() {
            total += angle_between(&diffs[i], &diffs[j]).degrees;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `acc(averaged) − (acc(θ₁) + acc(θ₂)) / 2` on `eval_set`.
pub fn accuracy_gain(
    theta_1: &ParamSet,
    theta_2: &ParamSet,
    averaged: &ParamSet,
    eval_set: &DomainDataset,
) -> Result<f64> {
    let a1 = evaluate(theta_1, eval_set)?.accuracy;
    let a2 = evaluate(theta_2, eval_set)?.accuracy;
    let aw = evaluate(averaged, eval_set)?.accuracy;
    Ok(aw - 0.5 * (a1 + a2))
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init, ModelSpec};

    fn tiny(values: &[f64]) -> ParamSet {
        // mlp(1 -> 2 classes, no hidden): 4 parameters
        ParamSet::unflatten(&ModelSpec::mlp(1, vec![], 2), values).unwrap()
    }

    #[test]
    fn two_model_example() {
        let pop = ModelPopulation::new(
            vec![tiny(&[0.0, 0.0, 0.0, 0.0]), tiny(&[2.0, 0.0, 0.0, 0.0])],
            "h",
        );
        let avg = weight_average(&pop, None, false).unwrap();
        assert_eq!(avg.params.flatten().data()[0], 1.0);
    }

    #[test]
    fn identical_members_average_exactly() {
        let m = init(&ModelSpec::small_cnn(1, 8, 10), 11).unwrap();
        let pop = ModelPopulation::new(vec![m.clone(); 7], "h");
        assert_eq!(weight_average(&pop, None, false).unwrap().params, m);
    }

    #[test]
    fn init_mismatch_needs_override() {
        let mut pop = ModelPopulation::new(vec![tiny(&[1.0; 4]), tiny(&[3.0; 4])], "a");
        pop.member_init_hashes[1] = "b".into();
        let err = weight_average(&pop, None, false).unwrap_err();
        assert!(err.to_string().contains("models lack shared initialization"));
        let ok = weight_average(&pop, None, true).unwrap();
        assert!(ok.init_check_overridden);
        assert!(weight_average(&pop, Some(&[0]), false).is_ok());
    }

    #[test]
    fn empty_subset_rejected() {
        let pop = ModelPopulation::new(vec![tiny(&[1.0; 4])], "a");
        assert!(weight_average(&pop, Some(&[]), false).is_err());
        assert!(weight_average(&pop, Some(&[3]), false).is_err());
    }

    #[test]
    fn angle_examples() {
        let init = tiny(&[0.0; 4]);
        let a = tiny(&[1.0, 0.0, 0.0, 0.0]);
        let b = tiny(&[0.0, 1.0, 0.0, 0.0]);
        let c = tiny(&[-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(model_angle(&a, &a, &init).unwrap().degrees, 0.0);
        assert!((model_angle(&a, &b, &init).unwrap().degrees - 90.0).abs() < 1e-12);
        assert!((model_angle(&a, &c, &init).unwrap().degrees - 180.0).abs() < 1e-12);
        let d = model_angle(&init, &a, &init).unwrap();
        assert!(d.degenerate && d.degrees == 0.0);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }
}
