// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loss terms of the supervised SAE objective and their analytic gradients.
//!
//! The composite objective is
//!
//! ```text
//! total = recon + alpha * aux + beta * (ca + gamma * oc) + lambda * l1
//! ```
//!
//! Backward passes hold the TopK/ReLU support fixed: gradients flow through
//! the selected latents only for the reconstruction path, while the
//! concept-assignment, orthogonality, L1 and global cross-entropy terms act
//! on the pre-TopK activations `v` and reach every latent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, stable_log_sigmoid, topk_unchecked, Matrix};
use crate::sae::{EncodeResult, SaeParams};

/// Which term binds concepts to their latents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLoss {
    /// Per-target log-sigmoid on the assigned latent.
    #[default]
    Assignment,
    /// Softmax cross-entropy over all latents, target = the object latent.
    GlobalCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(default)]
    pub concept_loss: ConceptLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 32.0,
            beta: 3.0,
            gamma: 0.1,
            lambda: 0.01,
            concept_loss: ConceptLoss::Assignment,
        }
    }
}

impl LossWeights {
    pub fn unsupervised(alpha: f64) -> Self {
        Self {
            alpha,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            concept_loss: ConceptLoss::Assignment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name}={v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Final multiplier of every term.
    pub fn coefficients(&self) -> TermWeights {
        let (ca, gce) = match self.concept_loss {
            ConceptLoss::Assignment => (self.beta, 0.0),
            ConceptLoss::GlobalCrossEntropy => (0.0, self.beta),
        };
        TermWeights {
            recon: 1.0,
            aux: self.alpha,
            ca,
            oc: self.beta * self.gamma,
            l1: self.lambda,
            gce,
        }
    }
}

/// Direct multiplier for each loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermWeights {
    pub recon: f64,
    pub aux: f64,
    pub ca: f64,
    pub oc: f64,
    pub l1: f64,
    pub gce: f64,
}

/// One training mini-batch with its supervision targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x d` inputs.
    pub x: Matrix,
    /// Assigned latents of the concepts present in each sample.
    pub targets: Vec<Vec<usize>>,
    pub object_latents: Vec<usize>,
    pub style_latents: Vec<usize>,
    /// Target latent of each sample for the global cross-entropy term.
    pub class_latents: Vec<Option<usize>>,
    pub timesteps: Vec<u16>,
}

impl Batch {
    /// A batch without supervision.
    pub fn unlabeled(x: Matrix) -> Self {
        let b = x.rows();
        Self {
            x,
            targets: vec![Vec::new(); b],
            object_latents: Vec::new(),
            style_latents: Vec::new(),
            class_latents: vec![None; b],
            timesteps: vec![0; b],
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    fn validate(&self, p: &SaeParams) -> Result<()> {
        let (b, n) = (self.len(), p.n());
        if self.x.cols() != p.d() {
            return Err(Error::DimensionMismatch {
                context: "batch inputs",
                expected: p.d(),
                actual: self.x.cols(),
            });
        }
        for (context, len) in [
            ("batch targets", self.targets.len()),
            ("batch class latents", self.class_latents.len()),
            ("batch timesteps", self.timesteps.len()),
        ] {
            if len != b {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: b,
                    actual: len,
                });
            }
        }
        let all = self
            .targets
            .iter()
            .flatten()
            .chain(&self.object_latents)
            .chain(&self.style_latents)
            .chain(self.class_latents.iter().flatten());
        for &j in all {
            if j >= n {
                return Err(Error::IndexOutOfRange {
                    context: "batch latent index",
                    index: j,
                    len: n,
                });
            }
        }
        if self
            .object_latents
            .iter()
            .any(|o| self.style_latents.contains(o))
        {
            return Err(Error::InvalidArgument(
                "object and style latent sets must be disjoint".into(),
            ));
        }
        Ok(())
    }
}

/// Batch-mean value of every term plus the weighted total.
///
/// `ca` holds whichever concept-binding term is active (see [`ConceptLoss`]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub aux: f64,
    pub ca: f64,
    pub oc: f64,
    pub l1: f64,
    pub total: f64,
}

/// Gradients of the total loss, laid out like [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_pre: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &SaeParams) -> Self {
        let (n, d) = (p.n(), p.d());
        Self {
            w_enc: vec![0.0; n * d],
            b_enc: vec![0.0; n],
            w_dec: vec![0.0; d * n],
            b_pre: vec![0.0; d],
        }
    }

    pub fn global_norm(&self) -> f64 {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_pre]
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in [
            &mut self.w_enc,
            &mut self.b_enc,
            &mut self.w_dec,
            &mut self.b_pre,
        ] {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Squared L2 norm of `x - x_hat`.
pub fn recon_loss(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::DimensionMismatch {
            context: "recon loss",
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    Ok(x.iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let r = f64::from(a) - f64::from(b);
            r * r
        })
        .sum())
}

/// The `k_aux` dead latents with the largest `ReLU(v)`, and those values.
pub fn aux_selection(p: &SaeParams, enc: &EncodeResult, dead: &[usize]) -> (Vec<usize>, Vec<f32>) {
    if dead.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let relu: Vec<f32> = dead.iter().map(|&i| enc.v[i].max(0.0)).collect();
    let take = p.k_aux.min(dead.len());
    let picked = topk_unchecked(&relu, take);
    let idx = picked.iter().map(|&q| dead[q]).collect();
    let vals = picked.iter().map(|&q| relu[q]).collect();
    (idx, vals)
}

/// Residual of `x - x_hat - W_dec z_dead`.
fn aux_residual(p: &SaeParams, x: &[f32], enc: &EncodeResult, sel: &[usize], vals: &[f32]) -> Vec<f64> {
    let n = p.n();
    let w = p.w_dec.as_slice();
    (0..p.d())
        .map(|r| {
            let row = &w[r * n..(r + 1) * n];
            let fit: f64 = sel
                .iter()
                .zip(vals)
                .map(|(&j, &z)| f64::from(row[j]) * f64::from(z))
                .sum();
            f64::from(x[r]) - f64::from(enc.x_hat[r]) - fit
        })
        .collect()
}

/// Dead-latent auxiliary loss: how well the top `k_aux` dead latents fit
/// the reconstruction residual. Zero without dead latents.
pub fn aux_loss(p: &SaeParams, x: &[f32], enc: &EncodeResult, dead: &[usize]) -> f64 {
    let (sel, vals) = aux_selection(p, enc, dead);
    if sel.is_empty() {
        return 0.0;
    }
    aux_residual(p, x, enc, &sel, &vals)
        .iter()
        .map(|q| q * q)
        .sum()
}

fn check_index(context: &'static str, j: usize, n: usize) -> Result<()> {
    if j >= n {
        Err(Error::IndexOutOfRange {
            context,
            index: j,
            len: n,
        })
    } else {
        Ok(())
    }
}

/// Mean of `-log sigmoid(v[i][j])` over all `(sample, target)` pairs.
pub fn ca_loss(v_batch: &Matrix, targets: &[Vec<usize>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, ts) in targets.iter().enumerate() {
        for &j in ts {
            check_index("ca target", j, v_batch.cols())?;
            sum -= stable_log_sigmoid(f64::from(v_batch.get(i, j)));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn ca_grad(v_batch: &Matrix, targets: &[Vec<usize>], coeff: f64, g: &mut [f64]) -> f64 {
    let n = v_batch.cols();
    let count: usize = targets.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    let scale = coeff / count as f64;
    let mut sum = 0.0;
    for (i, ts) in targets.iter().enumerate() {
        for &j in ts {
            let v = f64::from(v_batch.get(i, j));
            sum -= stable_log_sigmoid(v);
            g[i * n + j] -= scale * sigmoid(-v);
        }
    }
    sum / count as f64
}

/// Centered column with its squared norm.
struct Column {
    centered: Vec<f64>,
    sq_norm: f64,
}

fn centered_column(v_batch: &Matrix, j: usize) -> Column {
    let b = v_batch.rows();
    let col: Vec<f64> = (0..b).map(|i| f64::from(v_batch.get(i, j))).collect();
    let mean = col.iter().sum::<f64>() / b as f64;
    let centered: Vec<f64> = col.into_iter().map(|a| a - mean).collect();
    let sq_norm = centered.iter().map(|a| a * a).sum();
    Column { centered, sq_norm }
}

fn column_correlation(a: &Column, b: &Column) -> Option<f64> {
    let denom = (a.sq_norm * b.sq_norm).sqrt();
    if denom <= f64::MIN_POSITIVE || !denom.is_finite() {
        return None;
    }
    let cov: f64 = a.centered.iter().zip(&b.centered).map(|(x, y)| x * y).sum();
    Some(cov / denom)
}

/// Mean squared Pearson correlation between every object latent column and
/// every style latent column across the batch.
pub fn oc_loss(v_batch: &Matrix, objects: &[usize], styles: &[usize]) -> Result<f64> {
    for &j in objects.iter().chain(styles) {
        check_index("oc latent", j, v_batch.cols())?;
    }
    Ok(oc_impl(v_batch, objects, styles, 0.0, None))
}

fn oc_impl(v_batch: &Matrix, objects: &[usize], styles: &[usize], coeff: f64, mut g: Option<&mut [f64]>) -> f64 {
    if v_batch.rows() < 2 || objects.is_empty() || styles.is_empty() {
        return 0.0;
    }
    let n = v_batch.cols();
    let obj_cols: Vec<Column> = objects.iter().map(|&o| centered_column(v_batch, o)).collect();
    let sty_cols: Vec<Column> = styles.iter().map(|&s| centered_column(v_batch, s)).collect();
    let pairs = (objects.len() * styles.len()) as f64;
    let mut sum = 0.0;
    for (oc, &o) in obj_cols.iter().zip(objects) {
        for (sc, &s) in sty_cols.iter().zip(styles) {
            let Some(rho) = column_correlation(oc, sc) else {
                continue;
            };
            sum += rho * rho;
            if let Some(g) = g.as_deref_mut() {
                // d rho / d a = b_c / (|a_c||b_c|) - rho * a_c / |a_c|^2
                let inv = 1.0 / (oc.sq_norm * sc.sq_norm).sqrt();
                let w = coeff * 2.0 * rho / pairs;
                for i in 0..v_batch.rows() {
                    let (a, b) = (oc.centered[i], sc.centered[i]);
                    g[i * n + o] += w * (b * inv - rho * a / oc.sq_norm);
                    g[i * n + s] += w * (a * inv - rho * b / sc.sq_norm);
                }
            }
        }
    }
    sum / pairs
}

/// Batch mean of the per-latent mean absolute pre-activation.
pub fn l1_loss(v_batch: &Matrix) -> f64 {
    let (b, n) = (v_batch.rows(), v_batch.cols());
    if b == 0 || n == 0 {
        return 0.0;
    }
    let s: f64 = v_batch.as_slice().iter().map(|&v| f64::from(v).abs()).sum();
    s / (b * n) as f64
}

fn l1_grad(v_batch: &Matrix, coeff: f64, g: &mut [f64]) -> f64 {
    let (b, n) = (v_batch.rows(), v_batch.cols());
    if b == 0 || n == 0 {
        return 0.0;
    }
    let scale = coeff / (b * n) as f64;
    for (gv, &v) in g.iter_mut().zip(v_batch.as_slice()) {
        if v > 0.0 {
            *gv += scale;
        } else if v < 0.0 {
            *gv -= scale;
        }
    }
    l1_loss(v_batch)
}

fn log_softmax_row(row: &[f32]) -> (f64, Vec<f64>) {
    let max = row
        .iter()
        .map(|&v| f64::from(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Mean softmax cross-entropy of each labeled sample's class latent.
/// Samples without a class are skipped.
pub fn global_ce_loss(v_batch: &Matrix, class_latent: &[Option<usize>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, c) in class_latent.iter().enumerate() {
        let Some(c) = *c else { continue };
        check_index("class latent", c, v_batch.cols())?;
        let row = v_batch.row(i);
        let (lse, _) = log_softmax_row(row);
        sum += lse - f64::from(row[c]);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn gce_grad(v_batch: &Matrix, class_latent: &[Option<usize>], coeff: f64, g: &mut [f64]) -> f64 {
    let n = v_batch.cols();
    let count = class_latent.iter().flatten().count();
    if count == 0 {
        return 0.0;
    }
    let scale = coeff / count as f64;
    let mut sum = 0.0;
    for (i, c) in class_latent.iter().enumerate() {
        let Some(c) = *c else { continue };
        let row = v_batch.row(i);
        let (lse, probs) = log_softmax_row(row);
        sum += lse - f64::from(row[c]);
        let gi = &mut g[i * n..(i + 1) * n];
        for (gv, p) in gi.iter_mut().zip(probs) {
            *gv += scale * p;
        }
        gi[c] -= scale;
    }
    sum / count as f64
}

/// Forward state kept for the backward pass.
pub(crate) struct SampleForward {
    pub enc: EncodeResult,
    centered: Vec<f32>,
    aux_sel: Vec<usize>,
    aux_vals: Vec<f32>,
}

pub(crate) fn forward_batch(p: &SaeParams, x: &Matrix, dead: &[usize]) -> Vec<SampleForward> {
    (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let enc = p.encode_unchecked(xi);
            let centered = xi.iter().zip(&p.b_pre).map(|(a, b)| a - b).collect();
            let (aux_sel, aux_vals) = aux_selection(p, &enc, dead);
            SampleForward {
                enc,
                centered,
                aux_sel,
                aux_vals,
            }
        })
        .collect()
}

/// Loss report and gradients of the weighted SAEmnesia objective.
pub fn total_loss_and_grads(
    p: &SaeParams,
    batch: &Batch,
    w: &LossWeights,
    dead: &[usize],
) -> Result<(LossReport, ParamGrads)> {
    w.validate()?;
    let (report, grads) = weighted_loss_and_grads(p, batch, &w.coefficients(), dead)?;
    Ok((
        LossReport {
            total: report.recon
                + w.alpha * report.aux
                + w.beta * (report.ca + w.gamma * report.oc)
                + w.lambda * report.l1,
            ..report
        },
        grads,
    ))
}

/// Same as [`total_loss_and_grads`] with an explicit coefficient per term.
/// `total` is the coefficient-weighted sum.
pub fn weighted_loss_and_grads(
    p: &SaeParams,
    batch: &Batch,
    c: &TermWeights,
    dead: &[usize],
) -> Result<(LossReport, ParamGrads)> {
    weighted_loss_and_grads_fwd(p, batch, c, dead).map(|(r, g, _)| (r, g))
}

pub(crate) fn weighted_loss_and_grads_fwd(
    p: &SaeParams,
    batch: &Batch,
    c: &TermWeights,
    dead: &[usize],
) -> Result<(LossReport, ParamGrads, Vec<SampleForward>)> {
    batch.validate(p)?;
    let (b, n, d) = (batch.len(), p.n(), p.d());
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let fwd = forward_batch(p, &batch.x, dead);
    let inv_b = 1.0 / b as f64;
    let mut grads = ParamGrads::zeros_like(p);
    // upstream gradient on the pre-activations, B x n
    let mut g_v = vec![0.0f64; b * n];
    let mut g_xhat_sum = vec![0.0f64; d];
    let mut recon_sum = 0.0;
    let mut aux_sum = 0.0;
    let w_dec = p.w_dec.as_slice();

    for (i, f) in fwd.iter().enumerate() {
        let x = batch.x.row(i);
        let mut g_xhat: Vec<f64> = x
            .iter()
            .zip(&f.enc.x_hat)
            .map(|(&a, &h)| {
                let e = f64::from(h) - f64::from(a);
                recon_sum += e * e;
                2.0 * c.recon * inv_b * e
            })
            .collect();
        if !f.aux_sel.is_empty() {
            let q = aux_residual(p, x, &f.enc, &f.aux_sel, &f.aux_vals);
            aux_sum += q.iter().map(|q| q * q).sum::<f64>();
            if c.aux != 0.0 {
                let gq: Vec<f64> = q.iter().map(|q| -2.0 * c.aux * inv_b * q).collect();
                for (gx, &g) in g_xhat.iter_mut().zip(&gq) {
                    *gx += g;
                }
                for (&j, &z) in f.aux_sel.iter().zip(&f.aux_vals) {
                    let mut gz = 0.0;
                    for r in 0..d {
                        gz += f64::from(w_dec[r * n + j]) * gq[r];
                        grads.w_dec[r * n + j] += gq[r] * f64::from(z);
                    }
                    if f.enc.v[j] > 0.0 {
                        g_v[i * n + j] += gz;
                    }
                }
            }
        }
        for (&j, &z) in f.enc.support.iter().zip(&f.enc.values) {
            let mut gz = 0.0;
            for r in 0..d {
                gz += f64::from(w_dec[r * n + j]) * g_xhat[r];
                grads.w_dec[r * n + j] += g_xhat[r] * f64::from(z);
            }
            if f.enc.v[j] > 0.0 {
                g_v[i * n + j] += gz;
            }
        }
        for (acc, g) in g_xhat_sum.iter_mut().zip(&g_xhat) {
            *acc += g;
        }
    }

    let v_batch = Matrix::from_vec(
        b,
        n,
        fwd.iter().flat_map(|f| f.enc.v.iter().copied()).collect(),
    )?;
    let ca = match c.ca {
        0.0 => ca_loss(&v_batch, &batch.targets)?,
        coeff => ca_grad(&v_batch, &batch.targets, coeff, &mut g_v),
    };
    let oc = if c.oc != 0.0 {
        oc_impl(&v_batch, &batch.object_latents, &batch.style_latents, c.oc, Some(&mut g_v))
    } else {
        oc_impl(&v_batch, &batch.object_latents, &batch.style_latents, 0.0, None)
    };
    let l1 = match c.l1 {
        0.0 => l1_loss(&v_batch),
        coeff => l1_grad(&v_batch, coeff, &mut g_v),
    };
    let gce = match c.gce {
        0.0 => 0.0,
        coeff => gce_grad(&v_batch, &batch.class_latents, coeff, &mut g_v),
    };

    // dW_enc[j, :] = sum_i g_v[i, j] * (x_i - b_pre); row-parallel keeps the order fixed
    grads
        .w_enc
        .par_chunks_mut(d)
        .zip(grads.b_enc.par_iter_mut())
        .enumerate()
        .for_each(|(j, (row, gb))| {
            for (i, f) in fwd.iter().enumerate() {
                let g = g_v[i * n + j];
                if g != 0.0 {
                    *gb += g;
                    for (w, &u) in row.iter_mut().zip(&f.centered) {
                        *w += g * f64::from(u);
                    }
                }
            }
        });
    // b_pre enters x_hat directly and the encoder through -W_enc^T g_v
    for r in 0..d {
        let back: f64 = (0..n)
            .map(|j| f64::from(p.w_enc.get(j, r)) * grads.b_enc[j])
            .sum();
        grads.b_pre[r] = g_xhat_sum[r] - back;
    }

    let concept = if c.gce != 0.0 { gce } else { ca };
    let report = LossReport {
        recon: recon_sum * inv_b,
        aux: aux_sum * inv_b,
        ca: concept,
        oc,
        l1,
        total: 0.0,
    };
    let total = c.recon * report.recon
        + c.aux * report.aux
        + c.ca * ca
        + c.gce * gce
        + c.oc * report.oc
        + c.l1 * report.l1;
    Ok((LossReport { total, ..report }, grads, fwd))
}

/// Sum of squared errors of `x_hat` against `x`, averaged over rows.
pub fn batch_recon_loss(p: &SaeParams, x: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..x.rows() {
        let e = p.encode(x.row(i))?;
        sum += recon_loss(x.row(i), &e.x_hat)?;
    }
    Ok(sum / x.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::SaeShape;
    use std::f64::consts::LN_2;

    fn m(rows: &[Vec<f32>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn recon_examples() {
        assert_eq!(recon_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(recon_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 5.0);
        assert!(recon_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn one_latent_model(col: [f32; 2]) -> SaeParams {
        let w_enc = m(&[vec![1.0, 0.0]]);
        let w_dec = m(&[vec![col[0]], vec![col[1]]]);
        SaeParams::from_parts(w_enc, vec![0.0], w_dec, vec![0.0; 2], 1, 1).unwrap()
    }

    #[test]
    fn aux_examples() {
        let p = one_latent_model([1.0, 0.0]);
        let enc = EncodeResult {
            v: vec![1.0],
            support: vec![0],
            values: vec![0.0],
            x_hat: vec![0.0, 0.0],
        };
        assert_eq!(aux_loss(&p, &[1.0, 0.0], &enc, &[]), 0.0);
        // r = [1, 0] is exactly the dead latent's decoder column
        assert!(aux_loss(&p, &[1.0, 0.0], &enc, &[0]).abs() < 1e-12);
        // r = [0, 1]: residual after the fit is [-1, 1]
        assert!((aux_loss(&p, &[0.0, 1.0], &enc, &[0]) - 2.0).abs() < 1e-12);
        // perfect reconstruction and a non-positive dead pre-activation
        let quiet = EncodeResult {
            v: vec![-0.5],
            x_hat: vec![0.3, 0.1],
            ..enc
        };
        assert_eq!(aux_loss(&p, &[0.3, 0.1], &quiet, &[0]), 0.0);
    }

    #[test]
    fn ca_examples() {
        let v = m(&[vec![0.0, 0.0]]);
        assert!((ca_loss(&v, &[vec![0]]).unwrap() - LN_2).abs() < 1e-12);
        assert!((ca_loss(&v, &[vec![0, 1]]).unwrap() - LN_2).abs() < 1e-12);
        let big = m(&[vec![1e4]]);
        assert!(ca_loss(&big, &[vec![0]]).unwrap() < 1e-12);
        assert_eq!(ca_loss(&v, &[vec![]]).unwrap(), 0.0);
        assert!(ca_loss(&v, &[vec![5]]).is_err());
    }

    #[test]
    fn ca_decreases_in_target() {
        let mut prev = f64::INFINITY;
        for k in -20..20 {
            let v = m(&[vec![k as f32 * 0.5]]);
            let l = ca_loss(&v, &[vec![0]]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn oc_examples() {
        let same = m(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![4.0, 4.0]]);
        assert!((oc_loss(&same, &[0], &[1]).unwrap() - 1.0).abs() < 1e-12);
        let flat = m(&[vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 4.0]]);
        assert_eq!(oc_loss(&flat, &[0], &[1]).unwrap(), 0.0);
        let paper = m(&[
            vec![1.0, 1.0],
            vec![2.0, 3.0],
            vec![3.0, 2.0],
            vec![4.0, 4.0],
        ]);
        assert!((oc_loss(&paper, &[0], &[1]).unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(oc_loss(&paper, &[], &[1]).unwrap(), 0.0);
        assert_eq!(oc_loss(&m(&[vec![1.0, 2.0]]), &[0], &[1]).unwrap(), 0.0);
    }

    #[test]
    fn oc_affine_invariance() {
        let a = m(&[vec![0.3, 1.0], vec![-1.0, 2.5], vec![2.0, -0.4], vec![0.5, 0.9]]);
        let scaled = m(&[
            vec![0.3 * 4.0 + 1.0, 1.0],
            vec![-1.0 * 4.0 + 1.0, 2.5],
            vec![2.0 * 4.0 + 1.0, -0.4],
            vec![0.5 * 4.0 + 1.0, 0.9],
        ]);
        let l0 = oc_loss(&a, &[0], &[1]).unwrap();
        let l1 = oc_loss(&scaled, &[0], &[1]).unwrap();
        assert!((l0 - l1).abs() < 1e-6);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&Matrix::zeros(3, 4)), 0.0);
        assert_eq!(l1_loss(&m(&[vec![3.0, -1.0]])), 2.0);
        let v = m(&[vec![0.5, -2.0], vec![1.0, 4.0]]);
        let v3 = m(&[vec![1.5, -6.0], vec![3.0, 12.0]]);
        assert!((l1_loss(&v3) - 3.0 * l1_loss(&v)).abs() < 1e-12);
    }

    #[test]
    fn gce_examples() {
        assert!((global_ce_loss(&m(&[vec![0.0, 0.0]]), &[Some(0)]).unwrap() - LN_2).abs() < 1e-12);
        let big = m(&[vec![1e4, 0.0]]);
        assert!(global_ce_loss(&big, &[Some(0)]).unwrap() < 1e-12);
        let v = m(&[vec![1.0, 2.0, 3.0]]);
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let got = global_ce_loss(&v, &[Some(2)]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.40761).abs() < 1e-5);
        assert!(global_ce_loss(&v, &[Some(3)]).is_err());
        assert_eq!(global_ce_loss(&v, &[None]).unwrap(), 0.0);
    }

    fn small_model() -> SaeParams {
        let shape = SaeShape { d: 3, n: 6, k: 2, k_aux: 2 };
        crate::sae::init_params(shape, &[0.1, -0.2, 0.0], &mut crate::numerics::RngState::new(3)).unwrap()
    }

    fn small_batch() -> Batch {
        let x = m(&[
            vec![1.0, 0.5, -0.3],
            vec![-0.2, 0.8, 0.4],
            vec![0.6, -0.9, 0.1],
        ]);
        Batch {
            targets: vec![vec![0, 3], vec![1], vec![]],
            object_latents: vec![0, 1],
            style_latents: vec![3],
            class_latents: vec![Some(0), Some(1), None],
            ..Batch::unlabeled(x)
        }
    }

    #[test]
    fn zero_weights_give_recon_only() {
        let p = small_model();
        let b = small_batch();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            concept_loss: ConceptLoss::Assignment,
        };
        let (r, _) = total_loss_and_grads(&p, &b, &w, &[4, 5]).unwrap();
        let expected = batch_recon_loss(&p, &b.x).unwrap();
        assert!((r.total - expected).abs() < 1e-6);
        assert!((r.recon - expected).abs() < 1e-6);
    }

    #[test]
    fn report_decomposes() {
        let p = small_model();
        let b = small_batch();
        let w = LossWeights::default();
        let (r, _) = total_loss_and_grads(&p, &b, &w, &[4, 5]).unwrap();
        let again = r.recon + w.alpha * r.aux + w.beta * (r.ca + w.gamma * r.oc) + w.lambda * r.l1;
        assert!((r.total - again).abs() < 1e-6);
        assert!(r.aux > 0.0 && r.ca > 0.0 && r.l1 > 0.0);
        // the report's total reflects the beta=3, lambda=0.01, gamma=0.1 weighting
        assert_eq!((w.beta, w.lambda, w.gamma), (3.0, 0.01, 0.1));
    }

    #[test]
    fn batch_validation() {
        let p = small_model();
        let mut b = small_batch();
        b.targets[0].push(99);
        assert!(matches!(
            total_loss_and_grads(&p, &b, &LossWeights::default(), &[]),
            Err(Error::IndexOutOfRange { .. })
        ));
        let mut b = small_batch();
        b.style_latents.push(0);
        assert!(total_loss_and_grads(&p, &b, &LossWeights::default(), &[]).is_err());
        let b = Batch::unlabeled(Matrix::zeros(2, 4));
        assert!(matches!(
            total_loss_and_grads(&p, &b, &LossWeights::default(), &[]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
