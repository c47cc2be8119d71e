// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-latent steering.
//!
//! For an active concept `c` with assigned latent `i`, multiplier `g < 0`,
//! population mean `mu(i, t)` and concept mean `mu_c(i, t)`:
//! `z_i <- g * mu_c(i, t) * z_i` whenever `z_i > mu(i, t)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{ActivationStats, ConceptAssignment};
use crate::dataset::Concept;
use crate::error::{Error, Result};
use crate::sae::{EncodeResult, SaeParams};

/// Multipliers tried per concept by default.
pub const DEFAULT_MULTIPLIERS: [f64; 7] = [-1.0, -5.0, -10.0, -15.0, -20.0, -25.0, -30.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub concept: Concept,
    /// The single steered latent.
    pub latent: usize,
    pub multiplier: f64,
    /// Per-timestep population mean of the latent.
    pub gate: Vec<f64>,
    /// Per-timestep mean of the latent over samples carrying the concept.
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub n: usize,
    pub timesteps: usize,
    pub entries: Vec<PlanEntry>,
}

fn check_multiplier(c: Concept, g: f64) -> Result<()> {
    if !(g.is_finite() && g < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "multiplier for {c} must be negative, got {g}"
        )));
    }
    Ok(())
}

/// Builds a plan for `concepts` using statistics of the model being steered.
pub fn build_plan(
    stats: &ActivationStats,
    assignment: &ConceptAssignment,
    concepts: &[Concept],
    multipliers: &BTreeMap<Concept, f64>,
) -> Result<SteeringPlan> {
    let mut entries = Vec::with_capacity(concepts.len());
    for &c in concepts {
        let latent = assignment
            .latent(c)
            .ok_or_else(|| Error::InvalidArgument(format!("{c} is not assigned")))?;
        if latent >= stats.n() {
            return Err(Error::IndexOutOfRange {
                context: "assigned latent",
                index: latent,
                len: stats.n(),
            });
        }
        let multiplier = *multipliers
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("no multiplier for {c}")))?;
        check_multiplier(c, multiplier)?;
        let mut gate = Vec::with_capacity(stats.timesteps());
        let mut scale = Vec::with_capacity(stats.timesteps());
        for t in 0..stats.timesteps() {
            gate.push(stats.mu_all(t)?[latent]);
            scale.push(stats.mu_concept(c, t)?[latent]);
        }
        entries.push(PlanEntry {
            concept: c,
            latent,
            multiplier,
            gate,
            scale,
        });
    }
    Ok(SteeringPlan {
        n: stats.n(),
        timesteps: stats.timesteps(),
        entries,
    })
}

/// Same multiplier `g` for every concept.
pub fn uniform_multipliers(concepts: &[Concept], g: f64) -> BTreeMap<Concept, f64> {
    concepts.iter().map(|&c| (c, g)).collect()
}

/// Encoding before and after steering.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeredEncodeResult {
    pub support: Vec<usize>,
    pub original: Vec<f32>,
    pub modified: Vec<f32>,
    /// Latents whose gate fired.
    pub intervened: Vec<usize>,
}

impl SteeredEncodeResult {
    pub fn dense(&self, n: usize, modified: bool) -> Vec<f32> {
        let mut z = vec![0.0; n];
        let vals = if modified { &self.modified } else { &self.original };
        for (&i, &v) in self.support.iter().zip(vals) {
            z[i] = v;
        }
        z
    }

    /// Steered reconstruction.
    pub fn decode(&self, model: &SaeParams) -> Vec<f32> {
        model.decode_unchecked(&self.support, &self.modified)
    }
}

impl SteeringPlan {
    pub fn empty(n: usize, timesteps: usize) -> Self {
        Self {
            n,
            timesteps,
            entries: Vec::new(),
        }
    }

    pub fn concepts(&self) -> Vec<Concept> {
        self.entries.iter().map(|e| e.concept).collect()
    }

    pub fn entry(&self, c: Concept) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.concept == c)
    }

    pub fn multiplier(&self, c: Concept) -> Option<f64> {
        self.entry(c).map(|e| e.multiplier)
    }

    pub fn with_multiplier(&self, c: Concept, g: f64) -> Result<Self> {
        check_multiplier(c, g)?;
        let mut out = self.clone();
        let e = out
            .entries
            .iter_mut()
            .find(|e| e.concept == c)
            .ok_or_else(|| Error::InvalidArgument(format!("{c} is not in the plan")))?;
        e.multiplier = g;
        Ok(out)
    }

    pub fn with_uniform(&self, g: f64) -> Result<Self> {
        let mut out = self.clone();
        for e in &mut out.entries {
            check_multiplier(e.concept, g)?;
            e.multiplier = g;
        }
        Ok(out)
    }

    fn active_entries(&self, active: &[Concept]) -> Result<Vec<&PlanEntry>> {
        active
            .iter()
            .map(|&c| {
                self.entry(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("{c} is not in the plan")))
            })
            .collect()
    }

    /// Applies the rule for every concept in `active`. Gates compare against
    /// the unsteered value, so the result does not depend on the order of
    /// `active`.
    pub fn apply(&self, enc: &EncodeResult, t: usize, active: &[Concept]) -> Result<SteeredEncodeResult> {
        if t >= self.timesteps {
            return Err(Error::IndexOutOfRange {
                context: "steering timestep",
                index: t,
                len: self.timesteps,
            });
        }
        let entries = self.active_entries(active)?;
        Ok(self.apply_entries(enc, t, &entries))
    }

    fn apply_entries(&self, enc: &EncodeResult, t: usize, entries: &[&PlanEntry]) -> SteeredEncodeResult {
        let mut modified = enc.values.clone();
        let mut intervened = Vec::new();
        for e in entries {
            if let Some(pos) = enc.support.iter().position(|&i| i == e.latent) {
                let z = f64::from(enc.values[pos]);
                if z > e.gate[t] {
                    modified[pos] = (f64::from(modified[pos]) * e.multiplier * e.scale[t]) as f32;
                    if !intervened.contains(&e.latent) {
                        intervened.push(e.latent);
                    }
                }
            }
        }
        intervened.sort_unstable();
        SteeredEncodeResult {
            support: enc.support.clone(),
            original: enc.values.clone(),
            modified,
            intervened,
        }
    }

    /// Encodes `x`, steers it and returns the steered reconstruction.
    pub fn steer_reconstruct(&self, model: &SaeParams, x: &[f32], t: usize, active: &[Concept]) -> Result<Vec<f32>> {
        let enc = model.encode(x)?;
        Ok(self.apply(&enc, t, active)?.decode(model))
    }
}

/// Metric values of every candidate for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSweep {
    pub concept: Concept,
    pub candidates: Vec<f64>,
    pub metrics: Vec<f64>,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub concepts: Vec<ConceptSweep>,
    /// Total evaluator calls.
    pub evaluations: usize,
}

impl SweepResult {
    pub fn best_multipliers(&self) -> BTreeMap<Concept, f64> {
        self.concepts.iter().map(|c| (c.concept, c.best)).collect()
    }

    pub fn evaluations_per_concept(&self) -> usize {
        self.evaluations / self.concepts.len().max(1)
    }
}

/// Tries every candidate multiplier on each concept of `template` and keeps
/// the one with the highest `evaluate(plan, concept)`; ties keep the earlier
/// candidate.
pub fn multiplier_sweep<F>(template: &SteeringPlan, candidates: &[f64], evaluate: F) -> Result<SweepResult>
where
    F: Fn(&SteeringPlan, Concept) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate multipliers".into()));
    }
    for &g in candidates {
        if !(g.is_finite() && g < 0.0) {
            return Err(Error::InvalidArgument(format!("candidate multiplier {g} must be negative")));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..template.entries.len())
        .flat_map(|ci| (0..candidates.len()).map(move |gi| (ci, gi)))
        .collect();
    let metrics: Vec<f64> = jobs
        .par_iter()
        .map(|&(ci, gi)| {
            let c = template.entries[ci].concept;
            evaluate(&template.with_multiplier(c, candidates[gi])?, c)
        })
        .collect::<Result<_>>()?;
    let concepts = template
        .entries
        .iter()
        .enumerate()
        .map(|(ci, e)| {
            let m = metrics[ci * candidates.len()..(ci + 1) * candidates.len()].to_vec();
            let mut best = 0;
            for (gi, &v) in m.iter().enumerate() {
                if v > m[best] {
                    best = gi;
                }
            }
            ConceptSweep {
                concept: e.concept,
                candidates: candidates.to_vec(),
                best: candidates[best],
                metrics: m,
            }
        })
        .collect();
    Ok(SweepResult {
        concepts,
        evaluations: jobs.len(),
    })
}

/// Steers the encodings of many samples at once.
pub fn apply_batch(
    plan: &SteeringPlan,
    encodings: &[EncodeResult],
    timesteps: &[u16],
    active: &[Concept],
) -> Result<Vec<SteeredEncodeResult>> {
    if encodings.len() != timesteps.len() {
        return Err(Error::DimensionMismatch {
            context: "steering batch timesteps",
            expected: encodings.len(),
            actual: timesteps.len(),
        });
    }
    let entries = plan.active_entries(active)?;
    if let Some(&t) = timesteps.iter().find(|&&t| usize::from(t) >= plan.timesteps) {
        return Err(Error::IndexOutOfRange {
            context: "steering timestep",
            index: usize::from(t),
            len: plan.timesteps,
        });
    }
    Ok(encodings
        .par_iter()
        .zip(timesteps)
        .map(|(e, &t)| plan.apply_entries(e, usize::from(t), &entries))
        .collect())
}
