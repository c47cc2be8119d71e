// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe-based unlearning metrics, multiplier sweeps, sequential erasure
//! and search-cost accounting.
//!
//! Probes are fit once on unsteered reconstructions, so reconstruction
//! error alone never counts as forgetting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{ScoreTable, Aggregation};
use crate::dataset::{Concept, Dataset, Domain};
use crate::error::{Error, Result};
use crate::sae::{EncodeResult, SaeParams};
use crate::steering::{apply_batch, multiplier_sweep, SteeringPlan, SweepResult};
use crate::synth::{LinearProbe, ProbeAccuracy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub target: Concept,
    /// Share of target samples the probe no longer recognises.
    pub ua: f64,
    /// Probe accuracy on the other concepts of the target's domain.
    pub ira: f64,
    /// Probe accuracy of the other domain on non-target samples.
    pub cra: f64,
    pub average: f64,
    pub evaluations: usize,
}

/// An encoded evaluation set with probes fit on clean reconstructions.
pub struct Evaluator {
    model: SaeParams,
    data: Dataset,
    encodings: Vec<EncodeResult>,
    object_probe: Option<LinearProbe>,
    style_probe: Option<LinearProbe>,
    clean: [Vec<Option<u16>>; 2],
}

fn slot(domain: Domain) -> usize {
    match domain {
        Domain::Object => 0,
        Domain::Style => 1,
    }
}

fn fit_probe(model: &SaeParams, data: &Dataset, domain: Domain) -> Result<Option<LinearProbe>> {
    if data.vocabulary(domain).len() < 2 {
        return Ok(None);
    }
    let picked: Vec<usize> = (0..data.len())
        .filter(|&i| data.samples[i].label(domain).is_some())
        .collect();
    let features: Vec<Vec<f32>> = picked
        .par_iter()
        .map(|&i| model.encode_unchecked(&data.samples[i].x).x_hat)
        .collect();
    let labels: Vec<u16> = picked
        .iter()
        .map(|&i| data.samples[i].label(domain).expect("filtered"))
        .collect();
    LinearProbe::fit(domain, &features, &labels, data.vocabulary(domain).len()).map(Some)
}

impl Evaluator {
    /// Fits probes on reconstructions of `probe_data` and encodes `eval_data`.
    pub fn new(model: &SaeParams, probe_data: &Dataset, eval_data: &Dataset) -> Result<Self> {
        for data in [probe_data, eval_data] {
            data.validate()?;
            if data.d != model.d() {
                return Err(Error::DimensionMismatch {
                    context: "dataset vs model",
                    expected: model.d(),
                    actual: data.d,
                });
            }
        }
        let object_probe = fit_probe(model, probe_data, Domain::Object)?;
        let style_probe = fit_probe(model, probe_data, Domain::Style)?;
        let encodings: Vec<EncodeResult> = eval_data
            .samples
            .par_iter()
            .map(|s| model.encode_unchecked(&s.x))
            .collect();
        let predict = |probe: &Option<LinearProbe>| -> Vec<Option<u16>> {
            encodings
                .par_iter()
                .map(|e| probe.as_ref().map(|p| p.predict(&e.x_hat)))
                .collect()
        };
        let clean = [predict(&object_probe), predict(&style_probe)];
        Ok(Self {
            model: model.clone(),
            data: eval_data.clone(),
            encodings,
            object_probe,
            style_probe,
            clean,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn model(&self) -> &SaeParams {
        &self.model
    }

    fn probe(&self, domain: Domain) -> Result<&LinearProbe> {
        match domain {
            Domain::Object => self.object_probe.as_ref(),
            Domain::Style => self.style_probe.as_ref(),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("no {domain:?} probe: fewer than two classes")))
    }

    /// Probe predictions for both domains with `active` steered.
    fn predictions(&self, plan: &SteeringPlan, active: &[Concept]) -> Result<[Vec<Option<u16>>; 2]> {
        if active.is_empty() {
            return Ok(self.clean.clone());
        }
        let timesteps: Vec<u16> = self.data.samples.iter().map(|s| s.timestep).collect();
        let steered = apply_batch(plan, &self.encodings, &timesteps, active)?;
        let rows: Vec<(Option<u16>, Option<u16>)> = steered
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.intervened.is_empty() {
                    return (self.clean[0][i], self.clean[1][i]);
                }
                let x_hat = s.decode(&self.model);
                (
                    self.object_probe.as_ref().map(|p| p.predict(&x_hat)),
                    self.style_probe.as_ref().map(|p| p.predict(&x_hat)),
                )
            })
            .collect();
        Ok([
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
        ])
    }

    /// Accuracy of `domain` predictions on the samples picked by `keep`.
    fn accuracy(&self, preds: &[Vec<Option<u16>>; 2], domain: Domain, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, s) in self.data.samples.iter().enumerate() {
            if let Some(label) = s.label(domain) {
                if keep(i) {
                    total += 1;
                    hits += usize::from(preds[slot(domain)][i] == Some(label));
                }
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    /// Clean probe accuracy per class of `domain`.
    pub fn clean_accuracy(&self, domain: Domain) -> Result<ProbeAccuracy> {
        let probe = self.probe(domain)?;
        let (f, l): (Vec<Vec<f32>>, Vec<u16>) = self
            .data
            .samples
            .iter()
            .zip(&self.encodings)
            .filter_map(|(s, e)| s.label(domain).map(|l| (e.x_hat.clone(), l)))
            .unzip();
        Ok(probe.accuracy(&f, &l))
    }

    /// Metrics with only `target` steered.
    pub fn evaluate_unlearning(&self, plan: &SteeringPlan, target: Concept) -> Result<UnlearnReport> {
        self.evaluate_with_active(plan, target, &[target])
    }

    /// Metrics for `target` with `active` steered; `active` may be empty.
    pub fn evaluate_with_active(&self, plan: &SteeringPlan, target: Concept, active: &[Concept]) -> Result<UnlearnReport> {
        let own = target.domain;
        let other = match own {
            Domain::Object => Domain::Style,
            Domain::Style => Domain::Object,
        };
        self.probe(own)?;
        let preds = self.predictions(plan, active)?;
        let is_target = |i: usize| self.data.samples[i].has(target);
        let ua = 1.0
            - self
                .accuracy(&preds, own, is_target)
                .ok_or_else(|| Error::EmptyStratum(format!("no evaluation samples of {target}")))?;
        let ira = self.accuracy(&preds, own, |i| !is_target(i)).unwrap_or(0.0);
        let cra = match self.probe(other) {
            Ok(_) => self.accuracy(&preds, other, |i| !is_target(i)).unwrap_or(0.0),
            Err(_) => 0.0,
        };
        Ok(UnlearnReport {
            target,
            ua,
            ira,
            cra,
            average: (ua + ira + cra) / 3.0,
            evaluations: 1,
        })
    }

    /// Tries every candidate multiplier per concept of `template` and keeps
    /// the one with the best average metric.
    pub fn tune_multipliers(&self, template: &SteeringPlan, candidates: &[f64]) -> Result<SweepResult> {
        multiplier_sweep(template, candidates, |plan, c| {
            Ok(self.evaluate_unlearning(plan, c)?.average)
        })
    }

    /// One curve point per candidate: each concept of `template` is erased
    /// on its own with the common multiplier, and the reports are averaged.
    pub fn uniform_sweep(&self, template: &SteeringPlan, candidates: &[f64]) -> Result<SweepCurve> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("no candidate multipliers".into()));
        }
        let points = candidates
            .par_iter()
            .map(|&g| {
                let plan = template.with_uniform(g)?;
                let concepts = plan.concepts();
                if concepts.is_empty() {
                    let ira = match self.probe(Domain::Object) {
                        Ok(_) => self.accuracy(&self.clean, Domain::Object, |_| true).unwrap_or(0.0),
                        Err(_) => 0.0,
                    };
                    let cra = match self.probe(Domain::Style) {
                        Ok(_) => self.accuracy(&self.clean, Domain::Style, |_| true).unwrap_or(0.0),
                        Err(_) => 0.0,
                    };
                    return Ok(SweepPoint {
                        multiplier: g,
                        ua: 0.0,
                        ira,
                        cra,
                        average: (ira + cra) / 3.0,
                    });
                }
                let reports: Vec<UnlearnReport> = concepts
                    .iter()
                    .map(|&c| self.evaluate_unlearning(&plan, c))
                    .collect::<Result<_>>()?;
                let mean = |f: fn(&UnlearnReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
                Ok(SweepPoint {
                    multiplier: g,
                    ua: mean(|r| r.ua),
                    ira: mean(|r| r.ira),
                    cra: mean(|r| r.cra),
                    average: mean(|r| r.average),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepCurve { points })
    }

    /// Erases `order[..=j]` at task `j`.
    pub fn sequential_unlearning(&self, plan: &SteeringPlan, order: &[Concept]) -> Result<SequentialReport> {
        if order.is_empty() {
            return Err(Error::InvalidArgument("empty erase order".into()));
        }
        for (j, c) in order.iter().enumerate() {
            if plan.entry(*c).is_none() {
                return Err(Error::InvalidArgument(format!("{c} is not in the plan")));
            }
            if order[..j].contains(c) {
                return Err(Error::InvalidArgument(format!("{c} appears twice in the order")));
            }
        }
        let domain = order[0].domain;
        if order.iter().any(|c| c.domain != domain) {
            return Err(Error::InvalidArgument("erase order mixes domains".into()));
        }
        if self.data.vocabulary(domain).len() < order.len() {
            return Err(Error::InvalidArgument(format!(
                "erase order of {} needs as many {domain:?} concepts",
                order.len()
            )));
        }
        self.probe(domain)?;
        let tasks = (0..order.len())
            .into_par_iter()
            .map(|j| {
                let erased: Vec<Concept> = order[..=j].to_vec();
                let preds = self.predictions(plan, &erased)?;
                let per_concept: Vec<f64> = erased
                    .iter()
                    .map(|&c| {
                        self.accuracy(&preds, domain, |i| self.data.samples[i].has(c))
                            .map(|a| 1.0 - a)
                            .ok_or_else(|| Error::EmptyStratum(format!("no evaluation samples of {c}")))
                    })
                    .collect::<Result<_>>()?;
                let retained: Vec<f64> = (0..self.data.vocabulary(domain).len() as u16)
                    .map(|id| Concept { domain, id })
                    .filter(|c| !erased.contains(c))
                    .filter_map(|c| self.accuracy(&preds, domain, |i| self.data.samples[i].has(c)))
                    .collect();
                Ok(SequentialTask {
                    task: j,
                    ua: per_concept.iter().sum::<f64>() / per_concept.len() as f64,
                    ua_per_concept: per_concept,
                    ra: if retained.is_empty() {
                        0.0
                    } else {
                        retained.iter().sum::<f64>() / retained.len() as f64
                    },
                    erased,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SequentialReport { tasks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub multiplier: f64,
    pub ua: f64,
    pub ira: f64,
    pub cra: f64,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialTask {
    pub task: usize,
    pub erased: Vec<Concept>,
    /// Mean over the erased concepts.
    pub ua: f64,
    pub ua_per_concept: Vec<f64>,
    /// Macro accuracy over the concepts not yet erased.
    pub ra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialReport {
    pub tasks: Vec<SequentialTask>,
}

impl SequentialReport {
    pub fn min_ua(&self) -> f64 {
        self.tasks.iter().map(|t| t.ua).fold(f64::INFINITY, f64::min)
    }

    pub fn final_ra(&self) -> f64 {
        self.tasks.last().map_or(0.0, |t| t.ra)
    }

    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            task: usize,
            erased: usize,
            last: String,
            ua: f64,
            ra: f64,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.tasks {
            w.serialize(Row {
                task: t.task,
                erased: t.erased.len(),
                last: t.erased.last().map(|c| c.to_string()).unwrap_or_default(),
                ua: t.ua,
                ra: t.ra,
            })
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// One latent per concept; only the multiplier is searched.
    SingleLatent,
    /// Multiplier crossed with the number of steered features.
    BaselineGrid,
}

pub const BASELINE_FEATURE_COUNTS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchCost {
    pub mode: SearchMode,
    pub evaluations: usize,
    pub baseline_evaluations: usize,
    /// Percentage saved against the baseline grid, rounded to two decimals.
    pub reduction_pct: f64,
}

/// Evaluations per concept for `mode` with `multipliers` candidate values
/// and `feature_counts` baseline feature-count settings.
pub fn search_cost(mode: SearchMode, multipliers: usize, feature_counts: usize) -> SearchCost {
    let baseline = multipliers * feature_counts;
    let evaluations = match mode {
        SearchMode::SingleLatent => multipliers,
        SearchMode::BaselineGrid => baseline,
    };
    let fraction = if baseline == 0 {
        0.0
    } else {
        1.0 - evaluations as f64 / baseline as f64
    };
    SearchCost {
        mode,
        evaluations,
        baseline_evaluations: baseline,
        reduction_pct: (fraction * 10_000.0).round() / 100.0,
    }
}

/// Aggregated score of every latent for `concept`, one row per latent.
pub fn score_profile_csv(table: &ScoreTable, concept: Concept) -> Result<String> {
    let scores = table.aggregate(concept, Aggregation::Mean)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["latent", "score"]).map_err(csv_err)?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()]).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_cost_accounting() {
        let single = search_cost(SearchMode::SingleLatent, 7, BASELINE_FEATURE_COUNTS);
        let grid = search_cost(SearchMode::BaselineGrid, 7, BASELINE_FEATURE_COUNTS);
        assert_eq!(single.evaluations, 7);
        assert_eq!(grid.evaluations, 210);
        assert_eq!(single.reduction_pct, 96.67);
        assert_eq!(grid.reduction_pct, 0.0);
    }

    #[test]
    fn csv_shapes() {
        let curve = SweepCurve {
            points: vec![SweepPoint {
                multiplier: -5.0,
                ua: 1.0,
                ira: 0.5,
                cra: 0.25,
                average: 0.5833,
            }],
        };
        let text = curve.to_csv().unwrap();
        assert_eq!(text.lines().next(), Some("multiplier,ua,ira,cra,average"));
        assert_eq!(text.lines().count(), 2);
    }
}
