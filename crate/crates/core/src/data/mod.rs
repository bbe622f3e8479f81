//! Synthetic multi-domain datasets with covariate shift, and the k-shot sampler.
//!
//! Within a family the labeling rule is fixed; domains only change how
//! inputs are rendered (rotation, mean shift, pixel corruption).

pub mod glyphs;

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Dataset family; the labeling rule is shared by all its domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShiftFamily {
    /// Two interleaved half circles, centered then rotated per domain.
    TwoMoonsRotate,
    /// Class-conditional isotropic Gaussians with means on a circle of
    /// radius `separation` in the first two coordinates.
    GaussMeanShift {
        dim: usize,
        num_classes: usize,
        separation: f64,
    },
    /// Ten 8×8 glyph classes.
    SynthDigits,
}

impl ShiftFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftFamily::TwoMoonsRotate => "two_moons_rotate",
            ShiftFamily::GaussMeanShift { .. } => "gauss_mean_shift",
            ShiftFamily::SynthDigits => "synth_digits",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ShiftFamily::TwoMoonsRotate => 2,
            ShiftFamily::GaussMeanShift { num_classes, .. } => *num_classes,
            ShiftFamily::SynthDigits => 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ShiftFamily::TwoMoonsRotate => 2,
            ShiftFamily::GaussMeanShift { dim, .. } => *dim,
            ShiftFamily::SynthDigits => glyphs::SIDE * glyphs::SIDE,
        }
    }

    fn class_mean(&self, class: usize) -> Vec<f64> {
        match self {
            ShiftFamily::GaussMeanShift {
                dim,
                num_classes,
                separation,
            } => {
                let a = 2.0 * PI * class as f64 / *num_classes as f64;
                let mut m = vec![0.0; *dim];
                m[0] = separation * a.cos();
                m[1] = separation * a.sin();
                m
            }
            _ => unreachable!("only Gaussian families have class means"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitStyle {
    Clean,
    NoisyBg,
    Inverted,
    Thick,
}

/// Domain parameter of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Rotation { degrees: f64 },
    MeanShift { offset: Vec<f64>, scale: f64 },
    Digits { style: DigitStyle },
}

impl Domain {
    /// Short identifier, parseable by [`Domain::from_str`].
    pub fn id(&self) -> String {
        match self {
            Domain::Rotation { degrees } => format!("rot{degrees}"),
            Domain::MeanShift { offset, scale } => {
                let o: Vec<String> = offset.iter().map(|v| v.to_string()).collect();
                format!("shift{}x{scale}", o.join(","))
            }
            Domain::Digits { style } => match style {
                DigitStyle::Clean => "clean",
                DigitStyle::NoisyBg => "noisy_bg",
                DigitStyle::Inverted => "inverted",
                DigitStyle::Thick => "thick",
            }
            .to_string(),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Domain {
    type Err = Error;

    /// Accepts `rot<deg>`, `shift<o1,o2,...>x<scale>`, or a digit style name.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidDomain {
            family: "any",
            reason: format!("unrecognized domain '{s}'"),
        };
        if let Some(rest) = s.strip_prefix("rot") {
            let degrees = rest.parse().map_err(|_| bad())?;
            return Ok(Domain::Rotation { degrees });
        }
        if let Some(rest) = s.strip_prefix("shift") {
            let (offs, scale) = rest.rsplit_once('x').ok_or_else(bad)?;
            let offset = offs
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            let scale = scale.parse().map_err(|_| bad())?;
            return Ok(Domain::MeanShift { offset, scale });
        }
        let style = match s {
            "clean" => DigitStyle::Clean,
            "noisy_bg" => DigitStyle::NoisyBg,
            "inverted" => DigitStyle::Inverted,
            "thick" => DigitStyle::Thick,
            _ => return Err(bad()),
        };
        Ok(Domain::Digits { style })
    }
}

/// Parameters that produced a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub family: ShiftFamily,
    pub domain: Domain,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Labeled samples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    /// `[N, input_dim]`; images are flattened row-major.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub domain_id: String,
    pub split: Split,
    /// Position of each sample within the generating call.
    pub sample_index: Vec<usize>,
    pub generator: GeneratorParams,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    pub fn one_hot(&self) -> Tensor {
        Tensor::one_hot(&self.y, self.num_classes).expect("labels validated at construction")
    }

    /// Rows selected by position, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            domain_id: self.domain_id.clone(),
            split: self.split,
            sample_index: idx.iter().map(|&i| self.sample_index[i]).collect(),
            generator: self.generator.clone(),
        }
    }

    /// CSV with header `label,x0,...,x{d-1}` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.x.shape()[1];
        let mut header = vec!["label".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.x.row(i).iter().map(|&v| fmt17(v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Checks that `domain` belongs to `family` and is well-formed.
pub fn check_domain(family: &ShiftFamily, domain: &Domain) -> Result<()> {
    let bad = |reason: String| {
        Err(Error::InvalidDomain {
            family: family.name(),
            reason,
        })
    };
    match (family, domain) {
        (ShiftFamily::TwoMoonsRotate, Domain::Rotation { degrees }) if degrees.is_finite() => Ok(()),
        (ShiftFamily::GaussMeanShift { dim, num_classes, .. }, Domain::MeanShift { offset, scale }) => {
            if *dim < 2 || *num_classes < 2 {
                bad("Gaussian family needs dim >= 2 and at least 2 classes".into())
            } else if offset.len() != *dim {
                bad(format!("offset has {} entries, family dim is {dim}", offset.len()))
            } else if !(*scale > 0.0) {
                bad(format!("covariance scale {scale} must be > 0"))
            } else {
                Ok(())
            }
        }
        (ShiftFamily::SynthDigits, Domain::Digits { .. }) => Ok(()),
        _ => bad(format!("domain '{}' does not belong to this family", domain.id())),
    }
}

/// Ink intensity range for rendered glyphs.
const INK_RANGE: (f64, f64) = (0.75, 1.0);
/// Upper bound of the uniform background texture in the `noisy_bg` style.
const TEXTURE_MAX: f64 = 0.6;
/// Moons are translated by this before rotation so they rotate about their center.
const MOONS_CENTER: (f64, f64) = (0.5, 0.25);

/// Generates `n` samples (stratified, `n` divisible by the class count).
///
/// Sample `i` has label `i % num_classes`. Output is a pure function of the arguments.
pub fn generate(
    family: &ShiftFamily,
    domain: &Domain,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<DomainDataset> {
    check_domain(family, domain)?;
    let classes = family.num_classes();
    if n < 2 * classes || !n.is_multiple_of(classes) {
        return Err(Error::InvalidArgument(format!(
            "sample count {n} must be a multiple of {classes} and at least {}",
            2 * classes
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise {noise} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = family.input_dim();
    let mut x = Vec::with_capacity(n * d);
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &label in &y {
        match (family, domain) {
            (ShiftFamily::TwoMoonsRotate, Domain::Rotation { degrees }) => {
                x.extend(moon_point(label, degrees.to_radians(), noise, &mut rng));
            }
            (ShiftFamily::GaussMeanShift { .. }, Domain::MeanShift { offset, scale }) => {
                let mean = family.class_mean(label);
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.push(mean[j] + offset[j] + scale * noise * z);
                }
            }
            (ShiftFamily::SynthDigits, Domain::Digits { style }) => {
                x.extend(digit_image(label, *style, noise, &mut rng));
            }
            _ => unreachable!("checked by check_domain"),
        }
    }
    Ok(DomainDataset {
        x: Tensor::new(vec![n, d], x)?,
        y,
        num_classes: classes,
        domain_id: domain.id(),
        split: Split::Train,
        sample_index: (0..n).collect(),
        generator: GeneratorParams {
            family: family.clone(),
            domain: domain.clone(),
            n,
            noise,
            seed,
        },
    })
}

/// One generating call split into disjoint train and test parts.
pub fn generate_split(
    family: &ShiftFamily,
    domain: &Domain,
    n_train: usize,
    n_test: usize,
    noise: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let classes = family.num_classes();
    if !n_train.is_multiple_of(classes) || !n_test.is_multiple_of(classes) || n_test < classes {
        return Err(Error::InvalidArgument(format!(
            "train/test sizes {n_train}/{n_test} must be positive multiples of {classes}"
        )));
    }
    let all = generate(family, domain, n_train + n_test, noise, seed)?;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
    let train = all.subset(&train_idx);
    let mut test = all.subset(&test_idx);
    test.split = Split::Test;
    Ok((train, test))
}

fn moon_point(label: usize, angle: f64, noise: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let t = rng.random_range(0.0..PI);
    let (px, py) = if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    let (cx, cy) = (px + noise * nx - MOONS_CENTER.0, py + noise * ny - MOONS_CENTER.1);
    let (s, c) = angle.sin_cos();
    [c * cx - s * cy, s * cx + c * cy]
}

fn digit_image(label: usize, style: DigitStyle, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dy = rng.random_range(-1i64..=1) as isize;
    let dx = rng.random_range(-1i64..=1) as isize;
    let ink = rng.random_range(INK_RANGE.0..INK_RANGE.1);
    let mut mask = glyphs::shifted(&glyphs::mask(label), dy, dx);
    if style == DigitStyle::Thick {
        mask = glyphs::dilate(&mask);
    }
    mask.iter()
        .map(|&on| {
            let base = if on { ink } else { 0.0 };
            let mut v = match style {
                DigitStyle::NoisyBg if !on => rng.random_range(0.0..TEXTURE_MAX),
                _ => base,
            };
            if style == DigitStyle::Inverted {
                v = 1.0 - v;
            }
            let z: f64 = StandardNormal.sample(rng);
            v + noise * z
        })
        .collect()
}

/// Known-rule classifier in generator coordinates, used to check that
/// labels are consistent across domains.
pub fn reference_label(family: &ShiftFamily, domain: &Domain, x: &[f64]) -> Result<usize> {
    check_domain(family, domain)?;
    Ok(match (family, domain) {
        (ShiftFamily::TwoMoonsRotate, Domain::Rotation { degrees }) => {
            let (s, c) = (-degrees.to_radians()).sin_cos();
            let px = c * x[0] - s * x[1] + MOONS_CENTER.0;
            let py = s * x[0] + c * x[1] + MOONS_CENTER.1;
            let d0 = arc_distance(px, py, (0.0, 0.0), true);
            let d1 = arc_distance(px, py, (1.0, 0.5), false);
            usize::from(d1 < d0)
        }
        (ShiftFamily::GaussMeanShift { num_classes, .. }, Domain::MeanShift { offset, .. }) => {
            (0..*num_classes)
                .map(|c| {
                    let m = family.class_mean(c);
                    let d: f64 = x.iter().zip(&m).zip(offset).map(|((v, m), o)| (v - m - o).powi(2)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two classes")
                .0
        }
        (ShiftFamily::SynthDigits, Domain::Digits { style }) => {
            let mid_ink = 0.5 * (INK_RANGE.0 + INK_RANGE.1);
            let background = if *style == DigitStyle::NoisyBg { 0.5 * TEXTURE_MAX } else { 0.0 };
            let mut best = (0, f64::INFINITY);
            for class in 0..10 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let mut m = glyphs::shifted(&glyphs::mask(class), dy, dx);
                        if *style == DigitStyle::Thick {
                            m = glyphs::dilate(&m);
                        }
                        let d: f64 = m
                            .iter()
                            .zip(x)
                            .map(|(&on, &v)| {
                                let mut p = if on { mid_ink } else { background };
                                if *style == DigitStyle::Inverted {
                                    p = 1.0 - p;
                                }
                                (v - p).powi(2)
                            })
                            .sum();
                        if d < best.1 {
                            best = (class, d);
                        }
                    }
                }
            }
            best.0
        }
        _ => unreachable!("checked by check_domain"),
    })
}

/// Distance from a point to the upper (`upper = true`) or lower unit half
/// circle centered at `c`.
fn arc_distance(px: f64, py: f64, c: (f64, f64), upper: bool) -> f64 {
    let (vx, vy) = (px - c.0, py - c.1);
    let on_side = if upper { vy >= 0.0 } else { vy <= 0.0 };
    if on_side {
        ((vx * vx + vy * vy).sqrt() - 1.0).abs()
    } else {
        let d1 = ((vx - 1.0).powi(2) + vy * vy).sqrt();
        let d2 = ((vx + 1.0).powi(2) + vy * vy).sqrt();
        d1.min(d2)
    }
}

/// Exactly `k` samples per class: seeded shuffle, then the first `k` of each class.
pub fn k_shot_sample(ds: &DomainDataset, k: usize, seed: u64) -> Result<DomainDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    for (class, &available) in ds.class_counts().iter().enumerate() {
        if available < k {
            return Err(Error::InsufficientSamples {
                class,
                needed: k,
                available,
            });
        }
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0; ds.num_classes];
    let picked: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let c = ds.y[i];
            if taken[c] < k {
                taken[c] += 1;
                true
            } else {
                false
            }
        })
        .collect();
    Ok(ds.subset(&picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss() -> ShiftFamily {
        ShiftFamily::GaussMeanShift {
            dim: 2,
            num_classes: 3,
            separation: 4.0,
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let f = ShiftFamily::TwoMoonsRotate;
        let a = generate(&f, &Domain::Rotation { degrees: 0.0 }, 200, 0.1, 5).unwrap();
        let b = generate(&f, &Domain::Rotation { degrees: 360.0 }, 200, 0.1, 5).unwrap();
        for (u, v) in a.x.data().iter().zip(b.x.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn zero_shift_domains_share_inputs() {
        let d = Domain::MeanShift {
            offset: vec![0.0, 0.0],
            scale: 1.0,
        };
        let a = generate(&gauss(), &d, 30, 1.0, 9).unwrap();
        let b = generate(&gauss(), &d.clone(), 30, 1.0, 9).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn digits_are_balanced() {
        let ds = generate(&ShiftFamily::SynthDigits, &"clean".parse().unwrap(), 100, 0.05, 2024).unwrap();
        assert_eq!(ds.class_counts(), vec![10; 10]);
        assert_eq!(ds.x.shape(), &[100, 64]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = ShiftFamily::SynthDigits;
        let clean: Domain = "clean".parse().unwrap();
        assert!(generate(&f, &clean, 105, 0.05, 0).is_err());
        assert!(generate(&f, &clean, 10, 0.05, 0).is_err());
        assert!(generate(&f, &clean, 100, -1.0, 0).is_err());
        assert!(matches!(
            generate(&f, &Domain::Rotation { degrees: 10.0 }, 100, 0.05, 0),
            Err(Error::InvalidDomain { .. })
        ));
        let bad_shift = Domain::MeanShift {
            offset: vec![1.0],
            scale: 1.0,
        };
        assert!(generate(&gauss(), &bad_shift, 30, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let (tr, te) = generate_split(&ShiftFamily::TwoMoonsRotate, &Domain::Rotation { degrees: 0.0 }, 100, 50, 0.1, 1).unwrap();
        assert!(tr.sample_index.iter().all(|i| !te.sample_index.contains(i)));
        assert_eq!(te.split, Split::Test);
        assert_eq!(te.class_counts(), vec![25, 25]);
    }

    #[test]
    fn k_shot_examples() {
        let ds = generate(&ShiftFamily::SynthDigits, &"clean".parse().unwrap(), 200, 0.05, 1).unwrap();
        let s = k_shot_sample(&ds, 10, 3).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.class_counts(), vec![10; 10]);
        assert_eq!(s, k_shot_sample(&ds, 10, 3).unwrap());

        let full = k_shot_sample(&ds, 20, 4).unwrap();
        let mut idx = full.sample_index.clone();
        idx.sort();
        assert_eq!(idx, (0..200).collect::<Vec<_>>());

        match k_shot_sample(&ds, 21, 0) {
            Err(Error::InsufficientSamples { class: 0, needed: 21, available: 20 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_ids_parse_back() {
        for d in [
            Domain::Rotation { degrees: 40.0 },
            Domain::MeanShift { offset: vec![1.5, -2.0], scale: 2.0 },
            Domain::Digits { style: DigitStyle::NoisyBg },
        ] {
            assert_eq!(d.id().parse::<Domain>().unwrap(), d);
        }
        assert!("bogus".parse::<Domain>().is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ds = generate(&ShiftFamily::TwoMoonsRotate, &Domain::Rotation { degrees: 0.0 }, 4, 0.1, 0).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("label,x0,x1"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1].parse::<f64>().unwrap(), ds.x.data()[0]);
    }
}
