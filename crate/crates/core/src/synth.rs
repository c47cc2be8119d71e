// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic labeled activations with planted object and style directions,
//! and the least-squares linear probe used to read concepts back out.
//!
//! Every sample is `m(t) * (a * object_dir + b * style_dir) + noise` where
//! `m` is a linear ramp over timesteps, `a`, `b` are drawn uniformly from
//! `coef_range`, and the noise is isotropic Gaussian with per-coordinate
//! standard deviation `noise_sigma / sqrt(d)`, so its norm is about
//! `noise_sigma` whatever the dimension.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivationSample, Dataset, Domain};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

const OBJECT_NAMES: [&str; 20] = [
    "Architectures", "Bears", "Birds", "Butterfly", "Cats", "Dogs", "Fishes", "Flame", "Flowers",
    "Frogs", "Horses", "Human", "Jellyfish", "Rabbits", "Sandwiches", "Sea", "Statues", "Towers",
    "Trees", "Waterfalls",
];

const STYLE_NAMES: [&str; 10] = [
    "Impressionism", "Cubism", "Watercolor", "Pop_Art", "Sketch", "Ukiyoe", "Van_Gogh",
    "Mosaic", "Crayon", "Neon_Lines",
];

/// A pair of object directions forced to near-identical orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearDuplicate {
    pub a: u16,
    pub b: u16,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub d: usize,
    pub num_objects: u16,
    pub num_styles: u16,
    pub timesteps: u16,
    pub samples_per_pair: usize,
    pub noise_sigma: f64,
    /// Range of the per-sample object and style coefficients.
    pub coef_range: (f64, f64),
    /// Timestep modulation runs linearly from `.0` at `t = 0` to `.1` at `t = T - 1`.
    pub modulation: (f64, f64),
    /// Largest allowed dot product between two distinct planted directions.
    pub max_overlap: f64,
    pub near_duplicates: Vec<NearDuplicate>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 64,
            num_objects: 20,
            num_styles: 10,
            timesteps: 10,
            samples_per_pair: 20,
            noise_sigma: 0.05,
            coef_range: (0.8, 1.2),
            modulation: (0.7, 1.3),
            max_overlap: 0.5,
            near_duplicates: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d < 2 {
            return bad(format!("d={} must be at least 2", self.d));
        }
        if self.num_objects == 0 || self.num_styles == 0 || self.timesteps == 0 {
            return bad("object, style and timestep counts must be positive".into());
        }
        if self.num_objects == u16::MAX || self.num_styles == u16::MAX {
            return bad("vocabulary too large for 16-bit labels".into());
        }
        if self.samples_per_pair == 0 {
            return bad("samples_per_pair must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma={} must be >= 0", self.noise_sigma));
        }
        let (lo, hi) = self.coef_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("coef_range {lo}..{hi} must be positive and ordered"));
        }
        let (m0, m1) = self.modulation;
        if !(m0 > 0.0 && m1 > 0.0 && m0.is_finite() && m1.is_finite()) {
            return bad("modulation endpoints must be positive".into());
        }
        if !(self.max_overlap > 0.0 && self.max_overlap < 1.0) {
            return bad(format!("max_overlap={} must lie in (0, 1)", self.max_overlap));
        }
        for nd in &self.near_duplicates {
            if nd.a == nd.b || nd.a >= self.num_objects || nd.b >= self.num_objects {
                return bad(format!("invalid near-duplicate pair ({}, {})", nd.a, nd.b));
            }
            if !(nd.cosine > 0.0 && nd.cosine < 1.0) {
                return bad(format!("near-duplicate cosine {} must lie in (0, 1)", nd.cosine));
            }
        }
        Ok(())
    }

    pub fn modulation_at(&self, t: u16) -> f64 {
        let (m0, m1) = self.modulation;
        if self.timesteps <= 1 {
            return m0;
        }
        m0 + (m1 - m0) * f64::from(t) / f64::from(self.timesteps - 1)
    }

    pub fn object_names(&self) -> Vec<String> {
        vocabulary(&OBJECT_NAMES, "object", self.num_objects)
    }

    pub fn style_names(&self) -> Vec<String> {
        vocabulary(&STYLE_NAMES, "style", self.num_styles)
    }
}

fn vocabulary(names: &[&str], prefix: &str, count: u16) -> Vec<String> {
    (0..usize::from(count))
        .map(|i| {
            names
                .get(i)
                .map_or_else(|| format!("{prefix}_{i:02}"), |s| (*s).to_string())
        })
        .collect()
}

/// Returns `spec` with objects `a` and `b` planted at cosine 0.95.
pub fn make_near_duplicates(spec: &SynthSpec, pair: (u16, u16)) -> SynthSpec {
    let mut out = spec.clone();
    out.near_duplicates.push(NearDuplicate {
        a: pair.0,
        b: pair.1,
        cosine: 0.95,
    });
    out
}

/// Unit-norm planted directions, one row per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDirections {
    pub objects: Matrix,
    pub styles: Matrix,
}

fn spread_directions(rng: &mut RngState, count: usize, d: usize, max_overlap: f64, avoid: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while dirs.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {count} directions in d={d} with overlap <= {max_overlap}"
            )));
        }
        let cand = rng.unit_vector(d);
        let ok = dirs.iter().chain(avoid).all(|o| {
            let dp: f64 = o.iter().zip(&cand).map(|(a, b)| a * b).sum();
            dp <= max_overlap
        });
        if ok {
            dirs.push(cand);
        }
    }
    Ok(dirs)
}

fn to_matrix(rows: &[Vec<f64>], d: usize) -> Matrix {
    let data = rows.iter().flatten().map(|&v| v as f32).collect();
    Matrix::from_vec(rows.len(), d, data).expect("direction shape")
}

pub fn planted_directions(spec: &SynthSpec) -> Result<PlantedDirections> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed).derive(0);
    let mut objects = spread_directions(
        &mut rng,
        usize::from(spec.num_objects),
        spec.d,
        spec.max_overlap,
        &[],
    )?;
    let styles = spread_directions(
        &mut rng,
        usize::from(spec.num_styles),
        spec.d,
        spec.max_overlap,
        &[],
    )?;
    for nd in &spec.near_duplicates {
        let base = objects[usize::from(nd.a)].clone();
        // random unit vector orthogonal to the anchor
        let mut w = rng.unit_vector(spec.d);
        let proj: f64 = w.iter().zip(&base).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&base).for_each(|(a, b)| *a -= proj * b);
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        let sin = (1.0 - nd.cosine * nd.cosine).sqrt();
        objects[usize::from(nd.b)] = base
            .iter()
            .zip(&w)
            .map(|(b, o)| nd.cosine * b + sin * o / norm)
            .collect();
    }
    Ok(PlantedDirections {
        objects: to_matrix(&objects, spec.d),
        styles: to_matrix(&styles, spec.d),
    })
}

/// Number of samples of one (object, style) pair at timestep `t`.
/// The remainder of `samples_per_pair / T` goes to the earliest timesteps.
pub fn samples_at(spec: &SynthSpec, t: u16) -> usize {
    let per = spec.samples_per_pair / usize::from(spec.timesteps);
    let extra = spec.samples_per_pair % usize::from(spec.timesteps);
    per + usize::from(usize::from(t) < extra)
}

/// Generates split 0 of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    generate_split(spec, 0)
}

/// Independent draw of samples over the same planted directions; split
/// `0` is the training set by convention.
pub fn generate_split(spec: &SynthSpec, split: u32) -> Result<Dataset> {
    let dirs = planted_directions(spec)?;
    let root = RngState::new(spec.seed);
    let (no, ns) = (usize::from(spec.num_objects), usize::from(spec.num_styles));
    let cells: Vec<Vec<ActivationSample>> = (0..no * ns)
        .into_par_iter()
        .map(|cell| {
            let (o, s) = (cell / ns, cell % ns);
            let mut rng = root.derive(1 + ((u64::from(split)) << 32) + cell as u64);
            let (od, sd) = (dirs.objects.row(o), dirs.styles.row(s));
            let mut out = Vec::with_capacity(spec.samples_per_pair);
            let sd_noise = spec.noise_sigma / (spec.d as f64).sqrt();
            for t in 0..spec.timesteps {
                let m = spec.modulation_at(t);
                for _ in 0..samples_at(spec, t) {
                    let a = rng.uniform(spec.coef_range.0, spec.coef_range.1);
                    let b = rng.uniform(spec.coef_range.0, spec.coef_range.1);
                    let x = (0..spec.d)
                        .map(|r| {
                            let clean = m * (a * f64::from(od[r]) + b * f64::from(sd[r]));
                            (clean + sd_noise * rng.normal()) as f32
                        })
                        .collect();
                    out.push(ActivationSample {
                        x,
                        timestep: t,
                        object: Some(o as u16),
                        style: Some(s as u16),
                    });
                }
            }
            out
        })
        .collect();
    let data = Dataset {
        d: spec.d,
        timesteps: spec.timesteps,
        objects: spec.object_names(),
        styles: spec.style_names(),
        samples: cells.into_iter().flatten().collect(),
    };
    data.validate()?;
    Ok(data)
}

/// One-vs-rest least-squares classifier over a representation of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub domain: Domain,
    pub num_classes: usize,
    /// `(dim + 1) x classes`, last row is the bias.
    weights: DMatrix<f64>,
}

/// Per-class and macro-averaged accuracy. Classes absent from the evaluated
/// data report `None` and are left out of the macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub per_class: Vec<Option<f64>>,
    pub macro_avg: f64,
    pub overall: f64,
}

const RIDGE: f64 = 1e-6;

impl LinearProbe {
    /// Fits on `features` (one row each) with labels in `0..num_classes`.
    pub fn fit(domain: Domain, features: &[Vec<f32>], labels: &[u16], num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "probe labels",
                expected: features.len(),
                actual: labels.len(),
            });
        }
        let mut seen = vec![false; num_classes];
        for &l in labels {
            if usize::from(l) >= num_classes {
                return Err(Error::IndexOutOfRange {
                    context: "probe label",
                    index: usize::from(l),
                    len: num_classes,
                });
            }
            seen[usize::from(l)] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::InvalidArgument(
                "probe needs at least two classes present".into(),
            ));
        }
        let dim = features.first().map_or(0, Vec::len) + 1;
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DMatrix::<f64>::zeros(dim, num_classes);
        let mut row = DVector::<f64>::zeros(dim);
        for (f, &l) in features.iter().zip(labels) {
            if f.len() + 1 != dim {
                return Err(Error::DimensionMismatch {
                    context: "probe features",
                    expected: dim - 1,
                    actual: f.len(),
                });
            }
            for (r, &v) in row.iter_mut().zip(f) {
                *r = f64::from(v);
            }
            row[dim - 1] = 1.0;
            gram.ger(1.0, &row, &row, 1.0);
            let mut col = rhs.column_mut(usize::from(l));
            col += &row;
        }
        let scale = gram.trace() / dim as f64;
        for i in 0..dim {
            gram[(i, i)] += RIDGE * scale.max(1e-12);
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("probe normal equations are singular".into()))?;
        Ok(Self {
            domain,
            num_classes,
            weights: chol.solve(&rhs),
        })
    }

    pub fn scores(&self, feature: &[f32]) -> Vec<f64> {
        let dim = self.weights.nrows();
        (0..self.num_classes)
            .map(|c| {
                let col = self.weights.column(c);
                feature
                    .iter()
                    .zip(col.iter())
                    .map(|(&x, &w)| f64::from(x) * w)
                    .sum::<f64>()
                    + col[dim - 1]
            })
            .collect()
    }

    pub fn predict(&self, feature: &[f32]) -> u16 {
        let scores = self.scores(feature);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        best as u16
    }

    /// Accuracy on precomputed features for the given labels.
    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[u16]) -> ProbeAccuracy {
        let mut hits = vec![0usize; self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for (f, &l) in features.iter().zip(labels) {
            counts[usize::from(l)] += 1;
            if self.predict(f) == l {
                hits[usize::from(l)] += 1;
            }
        }
        let per_class: Vec<Option<f64>> = hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let total: usize = counts.iter().sum();
        ProbeAccuracy {
            macro_avg: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            overall: if total == 0 {
                0.0
            } else {
                hits.iter().sum::<usize>() as f64 / total as f64
            },
            per_class,
        }
    }
}

fn labeled_features(data: &Dataset, domain: Domain, repr: &(dyn Fn(&ActivationSample) -> Vec<f32> + Sync)) -> (Vec<Vec<f32>>, Vec<u16>) {
    let picked: Vec<&ActivationSample> = data
        .samples
        .iter()
        .filter(|s| s.label(domain).is_some())
        .collect();
    let features = picked.par_iter().map(|s| repr(s)).collect();
    let labels = picked.iter().map(|s| s.label(domain).unwrap()).collect();
    (features, labels)
}

/// Trains a probe for `domain` on `repr(sample)` over the labeled samples.
pub fn probe_train(data: &Dataset, domain: Domain, repr: &(dyn Fn(&ActivationSample) -> Vec<f32> + Sync)) -> Result<LinearProbe> {
    let (features, labels) = labeled_features(data, domain, repr);
    LinearProbe::fit(domain, &features, &labels, data.vocabulary(domain).len())
}

pub fn probe_eval(probe: &LinearProbe, data: &Dataset, repr: &(dyn Fn(&ActivationSample) -> Vec<f32> + Sync)) -> ProbeAccuracy {
    let (features, labels) = labeled_features(data, probe.domain, repr);
    probe.accuracy(&features, &labels)
}

/// Identity representation: the raw activation.
pub fn raw(sample: &ActivationSample) -> Vec<f32> {
    sample.x.clone()
}
