//! Multiscale category-aware contrastive loss.
//!
//! Per anchor `i` with class `y_i`:
//!
//! ```text
//! w_c[i]  = (1 / n_c[y_i]) · (1 − softmax(logits_i)[y_i])          (logits detached)
//! τ       = τ0 · mean_k (1 + n_c[k] / max n_c)
//! S_ij    = cos(x_i, x_j) / τ
//! L_scale = −(1/B) Σ_i w_c[i] · Σ_{j∈P(i)} exp S_ij / Σ_{k≠i} exp S_ik
//! L_MC    = mean over scales of L_scale,   X_s = Proj_s(Pool_s(x_bag))
//! ```
//!
//! `P(i)` holds the other batch members sharing the anchor's class; anchors
//! without positives contribute zero. With `log_form` the per-anchor term
//! becomes `−w_c[i] · log(ratio)` instead of `−w_c[i] · ratio`.
//!
//! The classification term is mean cross-entropy, and the total is the plain sum.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{softmax_values, ReduceKind, Tape, Var};
use crate::tensor::Tensor;

/// Norms below this are rejected by [`similarity_matrix`].
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    counts: Vec<usize>,
    tau0: f64,
}

impl ClassStats {
    pub fn new(counts: Vec<usize>, tau0: f64) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("class {c} has no samples")));
        }
        if !(tau0 > 0.0 && tau0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau0 must be positive, got {tau0}"
            )));
        }
        Ok(ClassStats { counts, tau0 })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }
}

/// Per-scale projection weights, `Proj_s: [s × E]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub scales: Vec<usize>,
    pub proj: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ScaleVars {
    pub scales: Vec<usize>,
    pub proj: Vec<Var>,
}

impl ScaleSet {
    /// Projections uniform in `[-1/√s, 1/√s]`.
    pub fn init(scales: &[usize], width: usize, embed: usize, rng: &mut Rng) -> Result<Self> {
        check_scales(scales, width)?;
        let proj = scales
            .iter()
            .map(|&s| {
                let bound = 1.0 / (s as f64).sqrt();
                let data = (0..s * embed)
                    .map(|_| rng.uniform_in(-bound, bound))
                    .collect();
                Tensor::new(vec![s, embed], data).expect("init shape")
            })
            .collect();
        Ok(ScaleSet {
            scales: scales.to_vec(),
            proj,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ScaleVars {
        ScaleVars {
            scales: self.scales.clone(),
            proj: self.proj.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.scales
            .iter()
            .zip(&self.proj)
            .map(|(s, p)| (format!("mccl.proj_s{s}"), p))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.proj.iter_mut().collect()
    }
}

fn check_scales(scales: &[usize], width: usize) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("scale set is empty".into()));
    }
    if let Some(&s) = scales.iter().find(|&&s| s == 0 || s > width) {
        return Err(Error::Config(format!(
            "scale {s} must lie in [1, {width}] (embedding width)"
        )));
    }
    Ok(())
}

/// Category-aware anchor weights. Computed from logit values; no gradient flows through them.
pub fn class_weights(stats: &ClassStats, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = stats.num_classes();
    if logits.rank() != 2 || logits.shape()[1] != k || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "class_weights",
            logits.shape(),
            &[labels.len(), k],
        ));
    }
    let probs = softmax_values(logits, 1)?;
    let mut out = Vec::with_capacity(labels.len());
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        out.push((1.0 - probs.at(&[b, y])) / stats.counts[y] as f64);
    }
    Ok(Tensor::vector(out))
}

pub fn dynamic_temperature(stats: &ClassStats) -> f64 {
    let max = *stats.counts.iter().max().expect("non-empty") as f64;
    let mean = stats
        .counts
        .iter()
        .map(|&n| 1.0 + n as f64 / max)
        .sum::<f64>()
        / stats.counts.len() as f64;
    stats.tau0 * mean
}

/// `Proj_s(Pool_s(x_bag))` for every scale, each `[B × E]`.
pub fn multiscale_project(tape: &mut Tape, x_bag: Var, scales: &ScaleVars) -> Result<Vec<Var>> {
    let width = *tape.shape(x_bag).last().unwrap_or(&0);
    check_scales(&scales.scales, width)?;
    scales
        .scales
        .iter()
        .zip(&scales.proj)
        .map(|(&s, &p)| {
            let pooled = tape.adaptive_avg_pool(x_bag, s)?;
            tape.matmul(pooled, p)
        })
        .collect()
}

/// `S_ij = x_i·x_j / (τ ‖x_i‖ ‖x_j‖)`.
pub fn similarity_matrix(tape: &mut Tape, x: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let shape = tape.shape(x).to_vec();
    let [rows, _] = shape[..] else {
        return Err(Error::shape("similarity_matrix", &shape, &[]));
    };
    let sq = tape.mul(x, x)?;
    let ss = tape.reduce(sq, 1, ReduceKind::Sum)?;
    let norms = tape.sqrt(ss);
    if let Some((row, &norm)) = tape
        .value(norms)
        .data()
        .iter()
        .enumerate()
        .find(|(_, n)| n.is_nan() || **n < MIN_EMBEDDING_NORM)
    {
        return Err(Error::DegenerateEmbedding { row, norm });
    }
    let norms = tape.reshape(norms, &[rows, 1])?;
    let unit = tape.div(x, norms)?;
    let ut = tape.transpose(unit)?;
    let cos = tape.matmul(unit, ut)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// One scale's contrastive term over a `[B × B]` similarity matrix.
pub fn contrastive_loss_scale(
    tape: &mut Tape,
    s_mat: Var,
    labels: &[usize],
    weights: &Tensor,
    log_form: bool,
) -> Result<Var> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if tape.shape(s_mat) != [b, b] || weights.shape() != [b] {
        return Err(Error::shape(
            "contrastive_loss_scale",
            tape.shape(s_mat),
            weights.shape(),
        ));
    }
    let mut pos = vec![0.0; b * b];
    let mut off = vec![0.0; b * b];
    let mut has_pos = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            if i != j {
                off[i * b + j] = 1.0;
                if labels[i] == labels[j] {
                    pos[i * b + j] = 1.0;
                    has_pos[i] = 1.0;
                }
            }
        }
    }
    let pos = tape.constant(Tensor::new(vec![b, b], pos)?);
    let off = tape.constant(Tensor::new(vec![b, b], off)?);

    // ratio is invariant to a per-row shift
    let row_max = tape.reduce(s_mat, 1, ReduceKind::Max)?;
    let row_max = tape.detach(row_max);
    let row_max = tape.reshape(row_max, &[b, 1])?;
    let shifted = tape.sub(s_mat, row_max)?;
    let e = tape.exp(shifted);
    let e_pos = tape.mul(e, pos)?;
    let num = tape.reduce(e_pos, 1, ReduceKind::Sum)?;
    let e_off = tape.mul(e, off)?;
    let den = tape.reduce(e_off, 1, ReduceKind::Sum)?;
    let ratio = tape.div(num, den)?;

    let per_anchor = if log_form {
        let missing: Vec<f64> = has_pos.iter().map(|h| 1.0 - h).collect();
        let missing = tape.constant(Tensor::vector(missing));
        let safe = tape.add(ratio, missing)?;
        let logr = tape.log(safe);
        let coef: Vec<f64> = weights
            .data()
            .iter()
            .zip(&has_pos)
            .map(|(w, h)| w * h)
            .collect();
        let coef = tape.constant(Tensor::vector(coef));
        tape.mul(logr, coef)?
    } else {
        let w = tape.constant(weights.clone());
        tape.mul(ratio, w)?
    };
    let total = tape.sum_all(per_anchor);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Average of the per-scale contrastive terms.
#[allow(clippy::too_many_arguments)]
pub fn mccl_loss(
    tape: &mut Tape,
    x_bag: Var,
    labels: &[usize],
    stats: &ClassStats,
    logits: &Tensor,
    scales: &ScaleVars,
    log_form: bool,
) -> Result<Var> {
    let weights = class_weights(stats, logits, labels)?;
    let tau = dynamic_temperature(stats);
    let projected = multiscale_project(tape, x_bag, scales)?;
    let mut terms = Vec::with_capacity(projected.len());
    for xs in projected {
        let s = similarity_matrix(tape, xs, tau)?;
        terms.push(contrastive_loss_scale(tape, s, labels, &weights, log_form)?);
    }
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

/// Mean cross-entropy with a stable log-softmax.
pub fn cet_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::shape("cet_loss", &shape, &[]));
    };
    if b != labels.len() {
        return Err(Error::shape("cet_loss", &shape, &[labels.len()]));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot[i * k + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![b, k], onehot)?);
    let lsm = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(lsm, onehot)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

pub fn total_loss(tape: &mut Tape, l_mc: Var, l_cet: Var) -> Result<Var> {
    tape.add(l_mc, l_cet)
}
