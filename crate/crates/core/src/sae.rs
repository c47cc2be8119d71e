// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder: parameters, encoder/decoder and dead-latent
//! bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, topk_unchecked, Matrix, RngState};

/// Complete trainable state of a TopK SAE.
///
/// `w_enc` is `n x d`, `w_dec` is `d x n`; both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    pub w_dec: Matrix,
    pub b_pre: Vec<f32>,
    pub k: usize,
    pub k_aux: usize,
}

/// Shape and sparsity settings of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeShape {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub k_aux: usize,
}

impl Default for SaeShape {
    fn default() -> Self {
        Self {
            d: 64,
            n: 256,
            k: 2,
            k_aux: 32,
        }
    }
}

impl SaeShape {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("d and n must be positive".into()));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::InvalidArgument(format!(
                "k={} must lie in 1..={}",
                self.k, self.n
            )));
        }
        if self.k_aux == 0 || self.k_aux > self.n {
            return Err(Error::InvalidArgument(format!(
                "k_aux={} must lie in 1..={}",
                self.k_aux, self.n
            )));
        }
        Ok(())
    }
}

/// Output of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeResult {
    /// Pre-TopK pre-activations `W_enc (x - b_pre) + b_enc`.
    pub v: Vec<f32>,
    /// Exactly `k` latent indices, by descending activation.
    pub support: Vec<usize>,
    /// `ReLU(v)` on `support`; may contain zeros.
    pub values: Vec<f32>,
    pub x_hat: Vec<f32>,
}

impl EncodeResult {
    pub fn dense_z(&self) -> Vec<f32> {
        let mut z = vec![0.0; self.v.len()];
        for (&i, &val) in self.support.iter().zip(&self.values) {
            z[i] = val;
        }
        z
    }
}

impl SaeParams {
    /// Builds parameters from raw parts, checking every shape.
    pub fn from_parts(
        w_enc: Matrix,
        b_enc: Vec<f32>,
        w_dec: Matrix,
        b_pre: Vec<f32>,
        k: usize,
        k_aux: usize,
    ) -> Result<Self> {
        let (n, d) = (w_enc.rows(), w_enc.cols());
        let check = |context, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                })
            }
        };
        check("b_enc", n, b_enc.len())?;
        check("w_dec rows", d, w_dec.rows())?;
        check("w_dec cols", n, w_dec.cols())?;
        check("b_pre", d, b_pre.len())?;
        SaeShape { d, n, k, k_aux }.validate()?;
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
            k,
            k_aux,
        })
    }

    /// All-zero parameters; mostly useful in tests.
    pub fn zeros(shape: SaeShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            w_enc: Matrix::zeros(shape.n, shape.d),
            b_enc: vec![0.0; shape.n],
            w_dec: Matrix::zeros(shape.d, shape.n),
            b_pre: vec![0.0; shape.d],
            k: shape.k,
            k_aux: shape.k_aux,
        })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.w_enc.cols()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn shape(&self) -> SaeShape {
        SaeShape {
            d: self.d(),
            n: self.n(),
            k: self.k,
            k_aux: self.k_aux,
        }
    }

    /// Pre-activations `W_enc (x - b_pre) + b_enc`.
    pub fn preactivations(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input(x)?;
        Ok(self.preactivations_unchecked(x))
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "sae input",
                expected: self.d(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn preactivations_unchecked(&self, x: &[f32]) -> Vec<f32> {
        let centered: Vec<f32> = x.iter().zip(&self.b_pre).map(|(a, b)| a - b).collect();
        (0..self.n())
            .map(|i| (dot(self.w_enc.row(i), &centered) + f64::from(self.b_enc[i])) as f32)
            .collect()
    }

    pub fn encode(&self, x: &[f32]) -> Result<EncodeResult> {
        self.check_input(x)?;
        Ok(self.encode_unchecked(x))
    }

    pub(crate) fn encode_unchecked(&self, x: &[f32]) -> EncodeResult {
        let v = self.preactivations_unchecked(x);
        let relu: Vec<f32> = v.iter().map(|&a| a.max(0.0)).collect();
        let support = topk_unchecked(&relu, self.k);
        let values: Vec<f32> = support.iter().map(|&i| relu[i]).collect();
        let x_hat = self.decode_unchecked(&support, &values);
        EncodeResult {
            v,
            support,
            values,
            x_hat,
        }
    }

    /// `sum_i values_i * W_dec[:, i] + b_pre`.
    pub fn decode(&self, support: &[usize], values: &[f32]) -> Result<Vec<f32>> {
        if support.len() != values.len() {
            return Err(Error::DimensionMismatch {
                context: "decode values",
                expected: support.len(),
                actual: values.len(),
            });
        }
        if let Some(&bad) = support.iter().find(|&&i| i >= self.n()) {
            return Err(Error::IndexOutOfRange {
                context: "decode support",
                index: bad,
                len: self.n(),
            });
        }
        Ok(self.decode_unchecked(support, values))
    }

    pub(crate) fn decode_unchecked(&self, support: &[usize], values: &[f32]) -> Vec<f32> {
        let n = self.n();
        let w = self.w_dec.as_slice();
        (0..self.d())
            .map(|r| {
                let row = &w[r * n..(r + 1) * n];
                let acc: f64 = support
                    .iter()
                    .zip(values)
                    .map(|(&i, &z)| f64::from(row[i]) * f64::from(z))
                    .sum();
                (acc + f64::from(self.b_pre[r])) as f32
            })
            .collect()
    }

    pub fn decoder_column(&self, i: usize) -> Vec<f32> {
        self.w_dec.column(i)
    }

    /// Rescales every decoder column to unit L2 norm (zero columns are left alone).
    pub fn normalize_decoder(&mut self) {
        let (d, n) = (self.d(), self.n());
        let mut norms = vec![0.0f64; n];
        for r in 0..d {
            for (acc, &w) in norms.iter_mut().zip(self.w_dec.row(r)) {
                *acc += f64::from(w) * f64::from(w);
            }
        }
        let inv: Vec<f64> = norms
            .iter()
            .map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 1.0 })
            .collect();
        for r in 0..d {
            for (w, &s) in self.w_dec.row_mut(r).iter_mut().zip(&inv) {
                *w = (f64::from(*w) * s) as f32;
            }
        }
    }

    pub fn decoder_column_norms(&self) -> Vec<f64> {
        let n = self.n();
        let mut norms = vec![0.0f64; n];
        for r in 0..self.d() {
            for (acc, &w) in norms.iter_mut().zip(self.w_dec.row(r)) {
                *acc += f64::from(w) * f64::from(w);
            }
        }
        norms.into_iter().map(f64::sqrt).collect()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.w_enc.as_slice(),
            &self.b_enc,
            self.w_dec.as_slice(),
            &self.b_pre,
        ]
        .iter()
        .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Random unit-norm decoder columns, tied encoder, zero encoder bias and
/// `b_pre` at the data mean.
pub fn init_params(shape: SaeShape, data_mean: &[f32], rng: &mut RngState) -> Result<SaeParams> {
    shape.validate()?;
    if data_mean.len() != shape.d {
        return Err(Error::DimensionMismatch {
            context: "data mean",
            expected: shape.d,
            actual: data_mean.len(),
        });
    }
    let mut w_enc = Matrix::zeros(shape.n, shape.d);
    for i in 0..shape.n {
        let dir = rng.unit_vector(shape.d);
        for (w, u) in w_enc.row_mut(i).iter_mut().zip(dir) {
            *w = u as f32;
        }
    }
    let mut params = SaeParams {
        w_dec: w_enc.transpose(),
        w_enc,
        b_enc: vec![0.0; shape.n],
        b_pre: data_mean.to_vec(),
        k: shape.k,
        k_aux: shape.k_aux,
    };
    params.normalize_decoder();
    params.w_enc = params.w_dec.transpose();
    Ok(params)
}

/// Per-latent count of samples since the latent last produced a nonzero
/// post-TopK activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLatentTracker {
    last_fired: Vec<u64>,
    window: u64,
}

impl DeadLatentTracker {
    pub fn new(n: usize, window: u64) -> Self {
        Self {
            last_fired: vec![0; n],
            window,
        }
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn counters(&self) -> &[u64] {
        &self.last_fired
    }

    /// Record one sample: latents with a nonzero value on `support` reset,
    /// everything else ages by one.
    pub fn update(&mut self, support: &[usize], values: &[f32]) {
        for c in &mut self.last_fired {
            *c = c.saturating_add(1);
        }
        for (&i, &z) in support.iter().zip(values) {
            if z != 0.0 {
                self.last_fired[i] = 0;
            }
        }
    }

    pub fn is_dead(&self, i: usize) -> bool {
        self.last_fired[i] >= self.window
    }

    pub fn dead_latents(&self) -> Vec<usize> {
        (0..self.last_fired.len())
            .filter(|&i| self.is_dead(i))
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.last_fired.iter().filter(|&&c| c >= self.window).count()
    }
}
