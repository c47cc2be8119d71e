// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-phase training: unsupervised pretraining, then supervised
//! fine-tuning against a frozen concept assignment.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::concepts::{assign, Aggregation, ConceptAssignment, ScoreTable, DEFAULT_DELTA};
use crate::dataset::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::losses::{weighted_loss_and_grads_fwd, Batch, LossReport, LossWeights, ParamGrads};
use crate::numerics::{Matrix, RngState};
use crate::sae::{init_params, DeadLatentTracker, SaeParams, SaeShape};
use crate::store::StoreError;

// Stream ids of the trainer live in their own half of the id space so they
// never coincide with the data generator's streams under a shared seed.
const STREAM_INIT: u64 = 1 << 63;
const STREAM_SHUFFLE_UNSUP: u64 = STREAM_INIT + 1;
const STREAM_SHUFFLE_SUP: u64 = STREAM_INIT + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Unsupervised,
    Supervised,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Unsupervised => "unsupervised",
            Phase::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub dead_window: u64,
    pub seed: u64,
    /// Destination of the per-epoch JSON-lines log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn unsupervised() -> Self {
        Self {
            phase: Phase::Unsupervised,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            weights: LossWeights::unsupervised(1.0 / 32.0),
            dead_window: 1000,
            seed: 0,
            log_path: None,
        }
    }

    pub fn supervised() -> Self {
        Self {
            phase: Phase::Supervised,
            epochs: 30,
            learning_rate: 3e-4,
            weights: LossWeights::default(),
            ..Self::unsupervised()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let oc_active = self.phase == Phase::Supervised && self.weights.beta * self.weights.gamma > 0.0;
        if oc_active && self.batch_size < 2 {
            return bad("batch_size must be at least 2 when the orthogonality term is active".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        if self.dead_window == 0 {
            return bad("dead_window must be positive".into());
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state, laid out like [`ParamGrads`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl OptState {
    pub fn new(p: &SaeParams) -> Self {
        Self {
            m: ParamGrads::zeros_like(p),
            v: ParamGrads::zeros_like(p),
            step: 0,
        }
    }

    /// One update of `p` from gradients `g`.
    pub fn step(&mut self, p: &mut SaeParams, g: &ParamGrads, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps);
        let update = |w: &mut [f32], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = (f64::from(*w) - step) as f32;
            }
        };
        update(p.w_enc.as_mut_slice(), &g.w_enc, &mut self.m.w_enc, &mut self.v.w_enc);
        update(&mut p.b_enc, &g.b_enc, &mut self.m.b_enc, &mut self.v.b_enc);
        update(p.w_dec.as_mut_slice(), &g.w_dec, &mut self.m.w_dec, &mut self.v.w_dec);
        update(&mut p.b_pre, &g.b_pre, &mut self.m.b_pre, &mut self.v.b_pre);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    pub dead: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Supervision targets derived once per phase from the assignment.
struct Targets {
    per_sample: Vec<Vec<usize>>,
    class: Vec<Option<usize>>,
    objects: Vec<usize>,
    styles: Vec<usize>,
}

impl Targets {
    fn none(len: usize) -> Self {
        Self {
            per_sample: vec![Vec::new(); len],
            class: vec![None; len],
            objects: Vec::new(),
            styles: Vec::new(),
        }
    }

    fn from_assignment(data: &Dataset, a: &ConceptAssignment, n: usize) -> Result<Self> {
        if let Some(e) = a.entries.iter().find(|e| e.latent >= n) {
            return Err(Error::IndexOutOfRange {
                context: "assigned latent",
                index: e.latent,
                len: n,
            });
        }
        let per_sample = data
            .samples
            .iter()
            .map(|s| s.concepts().filter_map(|c| a.latent(c)).collect())
            .collect();
        let class = data
            .samples
            .iter()
            .map(|s| s.object.and_then(|o| a.latent(crate::dataset::Concept::object(o))))
            .collect();
        Ok(Self {
            per_sample,
            class,
            objects: a.latents_of(Domain::Object),
            styles: a.latents_of(Domain::Style),
        })
    }

    fn batch(&self, data: &Dataset, idx: &[usize]) -> Batch {
        Batch {
            x: data.matrix_of(idx),
            targets: idx.iter().map(|&i| self.per_sample[i].clone()).collect(),
            object_latents: self.objects.clone(),
            style_latents: self.styles.clone(),
            class_latents: idx.iter().map(|&i| self.class[i]).collect(),
            timesteps: idx.iter().map(|&i| data.samples[i].timestep).collect(),
        }
    }
}

fn open_log(cfg: &TrainConfig) -> Result<Option<BufWriter<File>>> {
    match &cfg.log_path {
        None => Ok(None),
        Some(path) => Ok(Some(BufWriter::new(
            File::create(path).map_err(StoreError::from)?,
        ))),
    }
}

/// Runs one training phase and returns the updated parameters.
///
/// The supervised phase needs `assignment`; the unsupervised phase ignores
/// it. Each epoch visits a fresh permutation of the data; a final batch
/// smaller than two samples is skipped.
pub fn train_phase(
    params: &SaeParams,
    data: &Dataset,
    cfg: &TrainConfig,
    assignment: Option<&ConceptAssignment>,
) -> Result<(SaeParams, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    if data.d != params.d() {
        return Err(Error::DimensionMismatch {
            context: "dataset vs model",
            expected: params.d(),
            actual: data.d,
        });
    }
    let targets = match (cfg.phase, assignment) {
        (Phase::Supervised, None) => {
            return Err(Error::InvalidArgument(
                "supervised phase requires a concept assignment".into(),
            ))
        }
        (Phase::Supervised, Some(a)) => {
            if !a.is_injective() {
                return Err(Error::InvalidArgument(
                    "assignment maps two concepts to one latent".into(),
                ));
            }
            Targets::from_assignment(data, a, params.n())?
        }
        (Phase::Unsupervised, _) => Targets::none(data.len()),
    };
    let coeffs = match cfg.phase {
        Phase::Unsupervised => LossWeights {
            beta: 0.0,
            lambda: 0.0,
            ..cfg.weights
        }
        .coefficients(),
        Phase::Supervised => cfg.weights.coefficients(),
    };

    let mut p = params.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((p, log));
    }
    let mut writer = open_log(cfg)?;
    let mut opt = OptState::new(&p);
    let mut dead = DeadLatentTracker::new(p.n(), cfg.dead_window);
    let mut rng = RngState::new(cfg.seed).derive(match cfg.phase {
        Phase::Unsupervised => STREAM_SHUFFLE_UNSUP,
        Phase::Supervised => STREAM_SHUFFLE_SUP,
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut global_step = 0;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossReport::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 && data.len() >= 2 {
                continue;
            }
            let batch = targets.batch(data, idx);
            let dead_now = dead.dead_latents();
            // finite but huge parameters overflow inside the forward pass
            let (report, mut grads, fwd) = match weighted_loss_and_grads_fwd(&p, &batch, &coeffs, &dead_now) {
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step: global_step,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            };
            if !report.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: global_step,
                    loss: report.total,
                });
            }
            for f in &fwd {
                dead.update(&f.enc.support, &f.enc.values);
            }
            if cfg.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            opt.step(&mut p, &grads, cfg);
            p.normalize_decoder();
            if !p.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: global_step,
                    loss: f64::NAN,
                });
            }
            sum.recon += report.recon;
            sum.aux += report.aux;
            sum.ca += report.ca;
            sum.oc += report.oc;
            sum.l1 += report.l1;
            sum.total += report.total;
            steps += 1;
            global_step += 1;
        }
        let s = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            steps,
            losses: LossReport {
                recon: sum.recon / s,
                aux: sum.aux / s,
                ca: sum.ca / s,
                oc: sum.oc / s,
                l1: sum.l1 / s,
                total: sum.total / s,
            },
            dead: dead.dead_count(),
        };
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&record).expect("plain record");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(StoreError::from)?;
        }
        log.epochs.push(record);
    }
    Ok((p, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Model after the unsupervised phase.
    pub pretrained: SaeParams,
    pub model: SaeParams,
    /// Computed from `pretrained` and held fixed while fine-tuning.
    pub assignment: ConceptAssignment,
    pub unsupervised_log: TrainLog,
    pub supervised_log: TrainLog,
}

/// Scores the concepts of `data` on `model` and assigns each its latent.
pub fn assign_concepts(model: &SaeParams, data: &Dataset) -> Result<ConceptAssignment> {
    let table = ScoreTable::from_model(model, data, DEFAULT_DELTA)?;
    let present: Vec<_> = data
        .concepts()
        .into_iter()
        .filter(|&c| (0..table.timesteps).any(|t| table.is_present(c, t)))
        .collect();
    assign(&table, &present, Aggregation::Mean)
}

/// Fresh parameters for `data`, seeded the same way as [`run_pipeline`].
pub fn init_model(shape: SaeShape, data: &Dataset, seed: u64) -> Result<SaeParams> {
    init_params(shape, &data.mean(), &mut RngState::new(seed).derive(STREAM_INIT))
}

/// Initializes a model from `shape`, pretrains it, assigns concepts and
/// fine-tunes against that assignment.
pub fn run_pipeline(
    data: &Dataset,
    shape: SaeShape,
    cfg_unsup: &TrainConfig,
    cfg_sup: &TrainConfig,
) -> Result<PipelineOutput> {
    shape.validate()?;
    if cfg_unsup.phase != Phase::Unsupervised || cfg_sup.phase != Phase::Supervised {
        return Err(Error::InvalidArgument(
            "pipeline needs an unsupervised then a supervised config".into(),
        ));
    }
    if data.d != shape.d {
        return Err(Error::DimensionMismatch {
            context: "dataset vs model",
            expected: shape.d,
            actual: data.d,
        });
    }
    let init = init_model(shape, data, cfg_unsup.seed)?;
    let (pretrained, unsupervised_log) = train_phase(&init, data, cfg_unsup, None)?;
    let assignment = assign_concepts(&pretrained, data)?;
    let (model, supervised_log) = train_phase(&pretrained, data, cfg_sup, Some(&assignment))?;
    Ok(PipelineOutput {
        pretrained,
        model,
        assignment,
        unsupervised_log,
        supervised_log,
    })
}

/// Mean of the orthogonality term over `data` evaluated as a single batch.
pub fn dataset_oc(model: &SaeParams, data: &Dataset, assignment: &ConceptAssignment) -> Result<f64> {
    let v: Vec<f32> = data
        .samples
        .iter()
        .flat_map(|s| model.preactivations_unchecked(&s.x))
        .collect();
    let v = Matrix::from_vec(data.len(), model.n(), v)?;
    crate::losses::oc_loss(
        &v,
        &assignment.latents_of(Domain::Object),
        &assignment.latents_of(Domain::Style),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivationSample;
    use crate::synth::{generate, SynthSpec};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            d: 16,
            num_objects: 4,
            num_styles: 3,
            timesteps: 4,
            samples_per_pair: 16,
            ..SynthSpec::default()
        }
    }

    fn small_shape() -> SaeShape {
        SaeShape {
            d: 16,
            n: 32,
            k: 4,
            k_aux: 8,
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = generate(&small_spec()).unwrap();
        let p = init_params(small_shape(), &data.mean(), &mut RngState::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::unsupervised()
        };
        let (q, log) = train_phase(&p, &data, &cfg, None).unwrap();
        assert_eq!(q, p);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn supervised_needs_assignment() {
        let data = generate(&small_spec()).unwrap();
        let p = init_params(small_shape(), &data.mean(), &mut RngState::new(1)).unwrap();
        assert!(train_phase(&p, &data, &TrainConfig::supervised(), None).is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::supervised()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn runaway_learning_rate_is_divergence() {
        let data = generate(&small_spec()).unwrap();
        let p = init_params(small_shape(), &data.mean(), &mut RngState::new(1)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            clip_norm: 0.0,
            ..TrainConfig::unsupervised()
        };
        let err = train_phase(&p, &data, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn subspace_data_is_recovered() {
        // rank-3 data, k = 4 active latents
        let d = 12;
        let mut rng = RngState::new(5);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| rng.unit_vector(d)).collect();
        let samples = (0..600)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let x = (0..d)
                    .map(|r| (0..3).map(|j| c[j] * basis[j][r]).sum::<f64>() as f32)
                    .collect();
                ActivationSample {
                    x,
                    timestep: 0,
                    object: None,
                    style: None,
                }
            })
            .collect();
        let data = Dataset {
            d,
            timesteps: 1,
            objects: vec![],
            styles: vec![],
            samples,
        };
        let shape = SaeShape {
            d,
            n: 24,
            k: 4,
            k_aux: 8,
        };
        let p = init_params(shape, &data.mean(), &mut RngState::new(2)).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 3e-3,
            ..TrainConfig::unsupervised()
        };
        let (q, _) = train_phase(&p, &data, &cfg, None).unwrap();
        let x = data.matrix_of(&(0..data.len()).collect::<Vec<_>>());
        let mse = crate::losses::batch_recon_loss(&q, &x).unwrap();
        assert!(mse < 0.01 * data.variance(), "mse {mse} vs var {}", data.variance());
        for norm in q.decoder_column_norms() {
            assert!((norm - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_binds_toy_concepts() {
        let spec = SynthSpec {
            num_objects: 1,
            num_styles: 1,
            ..small_spec()
        };
        let data = generate(&spec).unwrap();
        let unsup = TrainConfig {
            epochs: 3,
            ..TrainConfig::unsupervised()
        };
        let sup = TrainConfig {
            epochs: 3,
            ..TrainConfig::supervised()
        };
        let a = run_pipeline(&data, small_shape(), &unsup, &sup).unwrap();
        let b = run_pipeline(&data, small_shape(), &unsup, &sup).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.assignment.entries.len(), 2);
        assert!(a.assignment.is_injective());
    }

    #[test]
    fn log_lines_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let data = generate(&small_spec()).unwrap();
        let p = init_params(small_shape(), &data.mean(), &mut RngState::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            log_path: Some(path.clone()),
            ..TrainConfig::unsupervised()
        };
        train_phase(&p, &data, &cfg, None).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].epoch, 1);
    }
}
