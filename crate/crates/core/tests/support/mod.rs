// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent double-precision reference of the training objective and a
//! central-difference gradient checker built on it.

use saemnesia::losses::{weighted_loss_and_grads, Batch, ParamGrads, TermWeights};
use saemnesia::numerics::{Matrix, RngState};
use saemnesia::sae::SaeParams;

/// Parameters flattened to f64 in the order w_enc, b_enc, w_dec, b_pre.
#[derive(Clone)]
pub struct Flat {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub k_aux: usize,
    pub theta: Vec<f64>,
}

impl Flat {
    pub fn of(p: &SaeParams) -> Self {
        let theta = p
            .w_enc
            .as_slice()
            .iter()
            .chain(&p.b_enc)
            .chain(p.w_dec.as_slice())
            .chain(&p.b_pre)
            .map(|&v| f64::from(v))
            .collect();
        Self {
            d: p.d(),
            n: p.n(),
            k: p.k,
            k_aux: p.k_aux,
            theta,
        }
    }

    fn w_enc(&self, j: usize, r: usize) -> f64 {
        self.theta[j * self.d + r]
    }
    fn b_enc(&self, j: usize) -> f64 {
        self.theta[self.n * self.d + j]
    }
    fn w_dec(&self, r: usize, j: usize) -> f64 {
        self.theta[self.n * self.d + self.n + r * self.n + j]
    }
    fn b_pre(&self, r: usize) -> f64 {
        self.theta[2 * self.n * self.d + self.n + r]
    }
}

pub fn flatten_grads(g: &ParamGrads) -> Vec<f64> {
    g.w_enc
        .iter()
        .chain(&g.b_enc)
        .chain(&g.w_dec)
        .chain(&g.b_pre)
        .copied()
        .collect()
}

/// Indices of the `k` largest values, lower index first on ties.
fn top(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa * sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Discrete choices made by the forward pass; a finite difference is only
/// meaningful when both probes see the same pattern.
#[derive(PartialEq, Eq, Debug)]
pub struct Pattern(Vec<Vec<i64>>);

/// Reference objective: `sum_t coeff_t * term_t` for the batch.
pub fn reference(f: &Flat, batch: &Batch, c: &TermWeights, dead: &[usize]) -> (f64, Pattern) {
    let (d, n, b) = (f.d, f.n, batch.len());
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(b);
    let (mut recon, mut aux) = (0.0, 0.0);
    let mut pattern = Vec::new();
    for i in 0..b {
        let x: Vec<f64> = batch.x.row(i).iter().map(|&v| f64::from(v)).collect();
        let v: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|r| f.w_enc(j, r) * (x[r] - f.b_pre(r))).sum::<f64>() + f.b_enc(j))
            .collect();
        let relu: Vec<f64> = v.iter().map(|&a| a.max(0.0)).collect();
        let mut support = top(&relu, f.k);
        let x_hat: Vec<f64> = (0..d)
            .map(|r| support.iter().map(|&j| f.w_dec(r, j) * relu[j]).sum::<f64>() + f.b_pre(r))
            .collect();
        recon += (0..d).map(|r| (x[r] - x_hat[r]).powi(2)).sum::<f64>();
        let dead_relu: Vec<f64> = dead.iter().map(|&j| relu[j]).collect();
        let mut sel: Vec<usize> = top(&dead_relu, f.k_aux.min(dead.len()))
            .into_iter()
            .map(|q| dead[q])
            .collect();
        if !dead.is_empty() {
            aux += (0..d)
                .map(|r| {
                    let fit: f64 = sel.iter().map(|&j| f.w_dec(r, j) * relu[j]).sum();
                    (x[r] - x_hat[r] - fit).powi(2)
                })
                .sum::<f64>();
        }
        support.sort_unstable();
        sel.sort_unstable();
        let signs = v.iter().map(|&a| (a > 0.0) as i64 - (a < 0.0) as i64);
        pattern.push(
            support
                .iter()
                .map(|&j| j as i64)
                .chain([-1])
                .chain(sel.iter().map(|&j| j as i64))
                .chain([-1])
                .chain(signs)
                .collect(),
        );
        vs.push(v);
    }
    let bf = b as f64;
    recon /= bf;
    aux /= bf;

    let pairs: Vec<(usize, usize)> = batch
        .targets
        .iter()
        .enumerate()
        .flat_map(|(i, ts)| ts.iter().map(move |&j| (i, j)))
        .collect();
    let ca = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|&(i, j)| (1.0 + (-vs[i][j]).exp()).ln())
            .sum::<f64>()
            / pairs.len() as f64
    };

    let (o, s) = (&batch.object_latents, &batch.style_latents);
    let oc = if o.is_empty() || s.is_empty() || b < 2 {
        0.0
    } else {
        let col = |j: usize| -> Vec<f64> { vs.iter().map(|v| v[j]).collect() };
        let mut sum = 0.0;
        for &a in o {
            for &bb in s {
                sum += pearson(&col(a), &col(bb)).powi(2);
            }
        }
        sum / (o.len() * s.len()) as f64
    };

    let l1 = vs.iter().flatten().map(|a| a.abs()).sum::<f64>() / (b * n) as f64;

    let labeled: Vec<(usize, usize)> = batch
        .class_latents
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .collect();
    let gce = if labeled.is_empty() {
        0.0
    } else {
        labeled
            .iter()
            .map(|&(i, cls)| {
                let lse = vs[i].iter().map(|a| a.exp()).sum::<f64>().ln();
                lse - vs[i][cls]
            })
            .sum::<f64>()
            / labeled.len() as f64
    };

    let total = c.recon * recon + c.aux * aux + c.ca * ca + c.oc * oc + c.l1 * l1 + c.gce * gce;
    (total, Pattern(pattern))
}

/// One random instance: parameters, a supervised batch and a dead set.
pub struct Instance {
    pub params: SaeParams,
    pub batch: Batch,
    pub dead: Vec<usize>,
}

pub fn random_instance(seed: u64, d: usize, n: usize, k: usize, b: usize) -> Instance {
    let mut rng = RngState::new(seed);
    let mat = |rows: usize, cols: usize, scale: f64, rng: &mut RngState| {
        let data = (0..rows * cols).map(|_| (scale * rng.normal()) as f32).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    };
    let w_enc = mat(n, d, 0.6, &mut rng);
    let w_dec = mat(d, n, 0.6, &mut rng);
    let b_enc: Vec<f32> = (0..n).map(|_| (0.3 * rng.normal()) as f32).collect();
    let b_pre: Vec<f32> = (0..d).map(|_| (0.3 * rng.normal()) as f32).collect();
    let x = mat(b, d, 1.0, &mut rng);
    let params = SaeParams::from_parts(w_enc, b_enc, w_dec, b_pre, k, 4).unwrap();

    let mut latents: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut latents);
    let objects = latents[..3].to_vec();
    let styles = latents[3..5].to_vec();
    let mut dead = latents[5..11].to_vec();
    dead.sort_unstable();
    let mut targets = Vec::with_capacity(b);
    let mut class = Vec::with_capacity(b);
    for _ in 0..b {
        let o = objects[rng.below(objects.len())];
        let s = styles[rng.below(styles.len())];
        targets.push(vec![o, s]);
        class.push(Some(o));
    }
    let batch = Batch {
        x,
        targets,
        object_latents: objects,
        style_latents: styles,
        class_latents: class,
        timesteps: vec![0; b],
    };
    Instance { params, batch, dead }
}

pub struct CheckOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    /// Coordinates where the plain step-`STEP` difference alone misses the
    /// tolerance but the extrapolated estimate does not.
    pub truncation_only: usize,
    pub failures: Vec<String>,
}

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

fn central(base: &Flat, q: usize, h: f64, inst: &Instance, c: &TermWeights, pattern0: &Pattern) -> Option<f64> {
    let mut plus = base.clone();
    plus.theta[q] += h;
    let mut minus = base.clone();
    minus.theta[q] -= h;
    let (lp, pp) = reference(&plus, &inst.batch, c, &inst.dead);
    let (lm, pm) = reference(&minus, &inst.batch, c, &inst.dead);
    (pp == *pattern0 && pm == *pattern0).then(|| (lp - lm) / (2.0 * h))
}

fn mismatch(a: f64, fd: f64) -> bool {
    let err = (a - fd).abs();
    err > ABS_FLOOR && err > REL_TOL * a.abs().max(fd.abs())
}

/// Compares library gradients with central differences of the reference.
/// The estimate is the Richardson combination of steps `STEP` and `STEP/2`,
/// which removes the second-order truncation term.
pub fn check(inst: &Instance, c: &TermWeights) -> CheckOutcome {
    let (_, grads) = weighted_loss_and_grads(&inst.params, &inst.batch, c, &inst.dead).unwrap();
    let analytic = flatten_grads(&grads);
    let base = Flat::of(&inst.params);
    let (_, pattern0) = reference(&base, &inst.batch, c, &inst.dead);
    let mut out = CheckOutcome {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
        truncation_only: 0,
        failures: Vec::new(),
    };
    for q in 0..base.theta.len() {
        let (Some(d1), Some(d2)) = (
            central(&base, q, STEP, inst, c, &pattern0),
            central(&base, q, STEP / 2.0, inst, c, &pattern0),
        ) else {
            out.skipped += 1;
            continue;
        };
        out.checked += 1;
        let fd = (4.0 * d2 - d1) / 3.0;
        let a = analytic[q];
        let err = (a - fd).abs();
        if err > ABS_FLOOR {
            out.worst_rel = out.worst_rel.max(err / a.abs().max(fd.abs()));
        }
        if mismatch(a, fd) {
            out.failures.push(format!("coord {q}: analytic {a:.8e} fd {fd:.8e} (step {STEP}: {d1:.8e})"));
        } else if mismatch(a, d1) {
            out.truncation_only += 1;
        }
    }
    out
}
