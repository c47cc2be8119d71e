// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept scoring, concept-to-latent assignment and centralization
//! diagnostics.
//!
//! The score of latent `i` for concept `c` at timestep `t` contrasts the
//! latent's share of total activation on samples carrying `c` with its
//! share on samples without `c`:
//!
//! ```text
//! score(i, t, c) = mu(i, t, D_c) / (sum_j mu(j, t, D_c) + delta)
//!                - mu(i, t, D_not_c) / (sum_j mu(j, t, D_not_c) + delta)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Concept, Dataset};
use crate::error::{Error, Result};
use crate::sae::SaeParams;

pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_MARGIN: f64 = 2.0;

/// Sums of post-TopK activations per timestep and per (concept, timestep).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    n: usize,
    timesteps: usize,
    concepts: Vec<Concept>,
    sum_all: Vec<f64>,
    count_all: Vec<usize>,
    sum_concept: Vec<f64>,
    count_concept: Vec<usize>,
}

impl ActivationStats {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    fn concept_index(&self, c: Concept) -> Result<usize> {
        self.concepts
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::InvalidArgument(format!("concept {c} has no statistics")))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps {
            return Err(Error::IndexOutOfRange {
                context: "timestep",
                index: t,
                len: self.timesteps,
            });
        }
        Ok(())
    }

    /// Mean activation of every latent at `t` over all samples.
    pub fn mu_all(&self, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let count = self.count_all[t];
        if count == 0 {
            return Err(Error::EmptyStratum(format!("timestep {t}")));
        }
        Ok(self.sum_all[t * self.n..(t + 1) * self.n]
            .iter()
            .map(|s| s / count as f64)
            .collect())
    }

    /// Mean activation of every latent at `t` over samples carrying `c`.
    pub fn mu_concept(&self, c: Concept, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let ci = self.concept_index(c)?;
        let count = self.count_concept[ci * self.timesteps + t];
        if count == 0 {
            return Err(Error::EmptyStratum(format!("{c} at timestep {t}")));
        }
        let off = (ci * self.timesteps + t) * self.n;
        Ok(self.sum_concept[off..off + self.n]
            .iter()
            .map(|s| s / count as f64)
            .collect())
    }

    /// Mean over samples at `t` that do not carry `c`.
    pub fn mu_complement(&self, c: Concept, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let ci = self.concept_index(c)?;
        let count = self.count_all[t] - self.count_concept[ci * self.timesteps + t];
        if count == 0 {
            return Err(Error::EmptyStratum(format!("complement of {c} at timestep {t}")));
        }
        let off = (ci * self.timesteps + t) * self.n;
        Ok((0..self.n)
            .map(|i| (self.sum_all[t * self.n + i] - self.sum_concept[off + i]) / count as f64)
            .collect())
    }

    pub fn concept_count(&self, c: Concept, t: usize) -> usize {
        self.concept_index(c)
            .map(|ci| self.count_concept[ci * self.timesteps + t])
            .unwrap_or(0)
    }
}

/// Encodes every sample and accumulates post-TopK activation means.
/// Fails if any timestep of the dataset has no samples.
pub fn compute_stats(model: &SaeParams, data: &Dataset) -> Result<ActivationStats> {
    data.validate()?;
    if data.d != model.d() {
        return Err(Error::DimensionMismatch {
            context: "dataset vs model",
            expected: model.d(),
            actual: data.d,
        });
    }
    let (n, tn) = (model.n(), usize::from(data.timesteps));
    let concepts = data.concepts();
    let encoded: Vec<(Vec<usize>, Vec<f32>)> = data
        .samples
        .par_iter()
        .map(|s| {
            let e = model.encode_unchecked(&s.x);
            (e.support, e.values)
        })
        .collect();
    let mut stats = ActivationStats {
        n,
        timesteps: tn,
        sum_all: vec![0.0; tn * n],
        count_all: vec![0; tn],
        sum_concept: vec![0.0; concepts.len() * tn * n],
        count_concept: vec![0; concepts.len() * tn],
        concepts,
    };
    let no = data.objects.len();
    for (s, (support, values)) in data.samples.iter().zip(&encoded) {
        let t = usize::from(s.timestep);
        stats.count_all[t] += 1;
        let mut slots: Vec<usize> = Vec::with_capacity(2);
        if let Some(o) = s.object {
            slots.push(usize::from(o));
        }
        if let Some(st) = s.style {
            slots.push(no + usize::from(st));
        }
        for &ci in &slots {
            stats.count_concept[ci * tn + t] += 1;
        }
        for (&i, &z) in support.iter().zip(values) {
            let z = f64::from(z);
            stats.sum_all[t * n + i] += z;
            for &ci in &slots {
                stats.sum_concept[(ci * tn + t) * n + i] += z;
            }
        }
    }
    if let Some(t) = stats.count_all.iter().position(|&c| c == 0) {
        return Err(Error::EmptyStratum(format!("timestep {t}")));
    }
    Ok(stats)
}

/// Scores of every latent given the means on `D_c` and on `D_not_c`.
pub fn score_from_means(mu_c: &[f64], mu_not: &[f64], delta: f64) -> Vec<f64> {
    let total_c: f64 = mu_c.iter().sum::<f64>() + delta;
    let total_not: f64 = mu_not.iter().sum::<f64>() + delta;
    mu_c.iter()
        .zip(mu_not)
        .map(|(a, b)| a / total_c - b / total_not)
        .collect()
}

/// Score of latent `i` for concept `c` at timestep `t`.
pub fn score(stats: &ActivationStats, c: Concept, i: usize, t: usize, delta: f64) -> Result<f64> {
    if i >= stats.n {
        return Err(Error::IndexOutOfRange {
            context: "latent",
            index: i,
            len: stats.n,
        });
    }
    let mu_c = stats.mu_concept(c, t)?;
    let mu_not = match stats.mu_complement(c, t) {
        Ok(m) => m,
        Err(Error::EmptyStratum(_)) => vec![0.0; stats.n],
        Err(e) => return Err(e),
    };
    let ratio_c = mu_c[i] / (mu_c.iter().sum::<f64>() + delta);
    let ratio_not = mu_not[i] / (mu_not.iter().sum::<f64>() + delta);
    Ok(ratio_c - ratio_not)
}

/// How per-timestep scores combine into the score used for assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// `score(i, t, c)` for every latent, timestep and concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n: usize,
    pub timesteps: usize,
    pub delta: f64,
    pub concepts: Vec<Concept>,
    /// Whether concept `c` has samples at timestep `t`, laid out `[c][t]`.
    pub present: Vec<bool>,
    /// Laid out `[c][t][i]`.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn compute(stats: &ActivationStats, delta: f64) -> Result<Self> {
        let (n, tn) = (stats.n, stats.timesteps);
        let mut present = Vec::with_capacity(stats.concepts.len() * tn);
        let mut scores = Vec::with_capacity(stats.concepts.len() * tn * n);
        for &c in &stats.concepts {
            for t in 0..tn {
                match stats.mu_concept(c, t) {
                    Ok(mu_c) => {
                        // an empty complement contributes nothing
                        let mu_not = match stats.mu_complement(c, t) {
                            Ok(m) => m,
                            Err(Error::EmptyStratum(_)) => vec![0.0; n],
                            Err(e) => return Err(e),
                        };
                        present.push(true);
                        scores.extend(score_from_means(&mu_c, &mu_not, delta));
                    }
                    Err(Error::EmptyStratum(_)) => {
                        present.push(false);
                        scores.extend(std::iter::repeat_n(0.0, n));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            n,
            timesteps: tn,
            delta,
            concepts: stats.concepts.clone(),
            present,
            scores,
        })
    }

    pub fn from_model(model: &SaeParams, data: &Dataset, delta: f64) -> Result<Self> {
        Self::compute(&compute_stats(model, data)?, delta)
    }

    fn concept_index(&self, c: Concept) -> Result<usize> {
        self.concepts
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::InvalidArgument(format!("concept {c} is not scored")))
    }

    pub fn is_present(&self, c: Concept, t: usize) -> bool {
        self.concept_index(c)
            .map(|ci| self.present[ci * self.timesteps + t])
            .unwrap_or(false)
    }

    /// Scores of all latents for `c` at `t`, or `None` if `c` has no data at `t`.
    pub fn at(&self, c: Concept, t: usize) -> Option<&[f64]> {
        let ci = self.concept_index(c).ok()?;
        if t >= self.timesteps || !self.present[ci * self.timesteps + t] {
            return None;
        }
        let off = (ci * self.timesteps + t) * self.n;
        Some(&self.scores[off..off + self.n])
    }

    pub fn get(&self, i: usize, t: usize, c: Concept) -> Option<f64> {
        self.at(c, t).map(|row| row[i])
    }

    /// Per-latent score combined over the timesteps where `c` has data.
    pub fn aggregate(&self, c: Concept, agg: Aggregation) -> Result<Vec<f64>> {
        let rows: Vec<&[f64]> = (0..self.timesteps).filter_map(|t| self.at(c, t)).collect();
        if rows.is_empty() {
            self.concept_index(c)?;
            return Err(Error::EmptyStratum(format!("{c} has no scored timestep")));
        }
        let mut out = match agg {
            Aggregation::Mean => vec![0.0; self.n],
            Aggregation::Max => vec![f64::NEG_INFINITY; self.n],
        };
        for row in &rows {
            for (o, &s) in out.iter_mut().zip(row.iter()) {
                match agg {
                    Aggregation::Mean => *o += s,
                    Aggregation::Max => *o = o.max(s),
                }
            }
        }
        if agg == Aggregation::Mean {
            out.iter_mut().for_each(|o| *o /= rows.len() as f64);
        }
        Ok(out)
    }
}

/// First index of the maximum; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub concept: Concept,
    pub latent: usize,
}

/// The map from each concept to its single latent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    pub entries: Vec<AssignmentEntry>,
}

impl ConceptAssignment {
    pub fn latent(&self, c: Concept) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.concept == c)
            .map(|e| e.latent)
    }

    pub fn concepts(&self) -> impl Iterator<Item = Concept> + '_ {
        self.entries.iter().map(|e| e.concept)
    }

    pub fn latents_of(&self, domain: crate::dataset::Domain) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.concept.domain == domain)
            .map(|e| e.latent)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_injective(&self) -> bool {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.latent).collect();
        l.sort_unstable();
        l.windows(2).all(|w| w[0] != w[1])
    }
}

/// Assigns each concept its highest-scoring latent.
///
/// When two concepts peak on the same latent, the concept with the larger
/// peak keeps it and the other takes its best latent not yet taken, so the
/// map is always injective. Without collisions this is the plain argmax.
pub fn assign(table: &ScoreTable, concepts: &[Concept], agg: Aggregation) -> Result<ConceptAssignment> {
    let mut rows: Vec<(Concept, Vec<f64>)> = Vec::with_capacity(concepts.len());
    for &c in concepts {
        rows.push((c, table.aggregate(c, agg)?));
    }
    if concepts.len() > table.n {
        return Err(Error::InvalidArgument(format!(
            "{} concepts cannot map injectively onto {} latents",
            concepts.len(),
            table.n
        )));
    }
    // claim order: strongest peak first, input order on ties
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let peak = |r: &Vec<f64>| r[argmax(r)];
    order.sort_by(|&a, &b| peak(&rows[b].1).total_cmp(&peak(&rows[a].1)).then(a.cmp(&b)));
    let mut taken = vec![false; table.n];
    let mut latent_of = vec![0usize; rows.len()];
    for &ri in &order {
        let scores = &rows[ri].1;
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let best = best.expect("fewer concepts than latents");
        taken[best] = true;
        latent_of[ri] = best;
    }
    Ok(ConceptAssignment {
        entries: rows
            .iter()
            .zip(latent_of)
            .map(|((c, _), latent)| AssignmentEntry {
                concept: *c,
                latent,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizationEntry {
    pub concept: Concept,
    pub assigned: usize,
    pub top_latent: usize,
    pub top: f64,
    pub runner_up: f64,
    pub ratio: f64,
    pub dominant: bool,
}

/// `top / max(runner_up, delta)`.
pub fn centralization_ratio(top: f64, runner_up: f64, delta: f64) -> f64 {
    top / runner_up.max(delta)
}

/// Top and runner-up aggregated score per assigned concept.
pub fn centralization_report(
    table: &ScoreTable,
    assignment: &ConceptAssignment,
    margin: f64,
) -> Result<Vec<CentralizationEntry>> {
    assignment
        .entries
        .iter()
        .map(|e| {
            let scores = table.aggregate(e.concept, Aggregation::Mean)?;
            let top_latent = argmax(&scores);
            let top = scores[top_latent];
            let runner_up = scores
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != top_latent)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            let runner_up = if runner_up.is_finite() { runner_up } else { 0.0 };
            let ratio = centralization_ratio(top, runner_up, table.delta);
            Ok(CentralizationEntry {
                concept: e.concept,
                assigned: e.latent,
                top_latent,
                top,
                runner_up,
                ratio,
                dominant: top_latent == e.latent && ratio >= margin,
            })
        })
        .collect()
}

/// Timesteps at which concepts `a` and `b` share their most active latent.
pub fn overlap_timesteps(table: &ScoreTable, a: Concept, b: Concept) -> Result<usize> {
    table.concept_index(a)?;
    table.concept_index(b)?;
    Ok((0..table.timesteps)
        .filter(|&t| match (table.at(a, t), table.at(b, t)) {
            (Some(ra), Some(rb)) => argmax(ra) == argmax(rb),
            _ => false,
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActivationSample, Domain};
    use crate::numerics::Matrix;

    /// Model whose latent `i` reads coordinate `i` of the input (`d = n`).
    fn identity_model(n: usize, k: usize) -> SaeParams {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w.set(i, i, 1.0);
        }
        SaeParams::from_parts(w.clone(), vec![0.0; n], w, vec![0.0; n], k, 1).unwrap()
    }

    fn sample(x: Vec<f32>, t: u16, object: Option<u16>, style: Option<u16>) -> ActivationSample {
        ActivationSample {
            x,
            timestep: t,
            object,
            style,
        }
    }

    fn data(samples: Vec<ActivationSample>, d: usize, timesteps: u16) -> Dataset {
        Dataset {
            d,
            timesteps,
            objects: vec!["A".into(), "B".into()],
            styles: vec!["S".into()],
            samples,
        }
    }

    #[test]
    fn stats_examples() {
        let model = identity_model(3, 3);
        let ds = data(
            vec![
                sample(vec![0.0, 1.0, 1.0], 0, Some(0), None),
                sample(vec![2.0, 1.0, 1.0], 0, Some(1), None),
            ],
            3,
            1,
        );
        let stats = compute_stats(&model, &ds).unwrap();
        assert_eq!(stats.mu_all(0).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(stats.mu_concept(Concept::object(1), 0).unwrap(), vec![2.0, 1.0, 1.0]);
        assert_eq!(stats.mu_complement(Concept::object(1), 0).unwrap(), vec![0.0, 1.0, 1.0]);
        assert!(matches!(
            stats.mu_concept(Concept::style(0), 0),
            Err(Error::EmptyStratum(_))
        ));

        // constant activations everywhere
        let ds = data(
            vec![
                sample(vec![0.5, 0.5, 0.5], 0, Some(0), None),
                sample(vec![0.5, 0.5, 0.5], 0, Some(1), None),
            ],
            3,
            1,
        );
        let stats = compute_stats(&model, &ds).unwrap();
        assert_eq!(stats.mu_all(0).unwrap(), vec![0.5; 3]);

        let empty_t = data(vec![sample(vec![1.0, 0.0, 0.0], 0, Some(0), None)], 3, 2);
        assert!(matches!(
            compute_stats(&model, &empty_t),
            Err(Error::EmptyStratum(_))
        ));
    }

    #[test]
    fn score_examples() {
        let same = score_from_means(&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5], DEFAULT_DELTA);
        assert!(same.iter().all(|s| s.abs() < 1e-15));
        let only = score_from_means(&[3.0, 0.0, 0.0], &[0.0, 0.0, 0.0], DEFAULT_DELTA);
        assert!((only[0] - 1.0).abs() < 1e-8);
        let s = score_from_means(&[2.0, 1.0, 1.0], &[1.0, 1.0, 2.0], 0.0);
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
        assert!((s[2] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn score_matches_table() {
        let model = identity_model(3, 2);
        let ds = data(
            vec![
                sample(vec![2.0, 1.0, 0.0], 0, Some(0), Some(0)),
                sample(vec![0.0, 1.0, 2.0], 0, Some(1), Some(0)),
            ],
            3,
            1,
        );
        let stats = compute_stats(&model, &ds).unwrap();
        let table = ScoreTable::compute(&stats, DEFAULT_DELTA).unwrap();
        for i in 0..3 {
            let a = score(&stats, Concept::object(0), i, 0, DEFAULT_DELTA).unwrap();
            assert_eq!(Some(a), table.get(i, 0, Concept::object(0)));
        }
        // the style is on every sample: its complement is empty
        let s = table.at(Concept::style(0), 0).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    fn table_from(rows: &[(Concept, Vec<f64>)], t: usize) -> ScoreTable {
        let n = rows[0].1.len();
        ScoreTable {
            n,
            timesteps: t,
            delta: DEFAULT_DELTA,
            concepts: rows.iter().map(|r| r.0).collect(),
            present: vec![true; rows.len() * t],
            scores: rows
                .iter()
                .flat_map(|r| std::iter::repeat_n(r.1.clone(), t).flatten())
                .collect(),
        }
    }

    #[test]
    fn assign_examples() {
        let c = Concept::object(0);
        let t = table_from(&[(c, vec![0.1, 0.9, 0.2])], 2);
        assert_eq!(assign(&t, &[c], Aggregation::Mean).unwrap().latent(c), Some(1));

        let d = Concept::object(1);
        let t = table_from(&[(c, vec![0.1, 0.9, 0.2]), (d, vec![0.7, 0.1, 0.2])], 2);
        let a = assign(&t, &[c, d], Aggregation::Mean).unwrap();
        assert_eq!((a.latent(c), a.latent(d)), (Some(1), Some(0)));
        assert!(a.is_injective());

        // collision: the weaker peak moves to its next best latent
        let t = table_from(&[(c, vec![0.1, 0.9, 0.2]), (d, vec![0.1, 0.5, 0.3])], 1);
        let a = assign(&t, &[c, d], Aggregation::Mean).unwrap();
        assert_eq!((a.latent(c), a.latent(d)), (Some(1), Some(2)));

        // ties go to the lower latent index
        let t = table_from(&[(c, vec![0.4, 0.4, 0.1])], 1);
        assert_eq!(assign(&t, &[c], Aggregation::Max).unwrap().latent(c), Some(0));
    }

    #[test]
    fn single_object_single_style_map_apart() {
        let s = Concept::style(0);
        let o = Concept::object(0);
        let ds = Dataset {
            d: 3,
            timesteps: 1,
            objects: vec!["A".into()],
            styles: vec!["S".into()],
            samples: vec![sample(vec![2.0, 1.0, 0.0], 0, Some(0), Some(0)); 3],
        };
        let table = ScoreTable::from_model(&identity_model(3, 2), &ds, DEFAULT_DELTA).unwrap();
        let a = assign(&table, &[o, s], Aggregation::Mean).unwrap();
        assert_ne!(a.latent(o), a.latent(s));
    }

    #[test]
    fn centralization_examples() {
        let c = Concept::object(0);
        let assignment = ConceptAssignment {
            entries: vec![AssignmentEntry { concept: c, latent: 2 }],
        };
        let one_hot = table_from(&[(c, vec![0.0, 0.0, 1.0, 0.0])], 3);
        let r = &centralization_report(&one_hot, &assignment, DEFAULT_MARGIN).unwrap()[0];
        assert!(r.dominant && r.top_latent == 2);
        assert!(r.ratio >= 1e7);

        let flat = table_from(&[(c, vec![0.25; 4])], 3);
        let r = &centralization_report(&flat, &assignment, DEFAULT_MARGIN).unwrap()[0];
        assert!(!r.dominant);
        assert!((r.ratio - 1.0).abs() < 1e-12);

        let ratio = centralization_ratio(0.0404, 0.0166, DEFAULT_DELTA);
        assert_eq!((ratio * 100.0).round() / 100.0, 2.43);
        assert!(ratio >= DEFAULT_MARGIN);
    }

    #[test]
    fn overlap_examples() {
        let (a, b) = (Concept::object(0), Concept::object(1));
        let same = table_from(&[(a, vec![0.1, 0.8]), (b, vec![0.1, 0.8])], 4);
        assert_eq!(overlap_timesteps(&same, a, b).unwrap(), 4);
        let apart = table_from(&[(a, vec![0.1, 0.8]), (b, vec![0.8, 0.1])], 4);
        assert_eq!(overlap_timesteps(&apart, a, b).unwrap(), 0);
        assert!(overlap_timesteps(&apart, a, Concept::style(3)).is_err());
    }

    #[test]
    fn latents_by_domain() {
        let a = ConceptAssignment {
            entries: vec![
                AssignmentEntry { concept: Concept::object(0), latent: 5 },
                AssignmentEntry { concept: Concept::style(0), latent: 1 },
                AssignmentEntry { concept: Concept::object(1), latent: 3 },
            ],
        };
        assert_eq!(a.latents_of(Domain::Object), vec![3, 5]);
        assert_eq!(a.latents_of(Domain::Style), vec![1]);
    }
}
