//! Supervised label loss with kernel MMD alignment between source and target
//! representations.

use serde::{Deserialize, Serialize};

use crate::datagen::PatientRecord;
use crate::diffcore::{Bound, Graph, NodeId, Tensor};
use crate::encoder::{encode_batch, label_logits, LabelHeadParams};
use crate::error::{Error, Result};
use crate::model::Model;

/// Probability clamp applied before the logarithms of the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-9;
/// Stabilizer of the alignment denominator.
pub const NORM_STABILIZER: f64 = 1e-12;

/// Written as `"median"` or a positive number in config files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median off-diagonal pairwise squared distance of the pooled batch.
    Median,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median"),
            Bandwidth::Fixed(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "median" => Ok(Bandwidth::Median),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "bandwidth must be \"median\" or a number, got {n:?}"
            ))),
            Raw::Value(h) => Ok(Bandwidth::Fixed(h)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub kernel_mul: f64,
    pub kernel_num: usize,
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { kernel_mul: 2.0, kernel_num: 5, bandwidth: Bandwidth::Median }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_num < 1 {
            return Err(Error::Config("mmd.kernel_num must be at least 1".into()));
        }
        if !(self.kernel_mul > 1.0) {
            return Err(Error::Config(format!("mmd.kernel_mul must exceed 1, got {}", self.kernel_mul)));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config(format!("mmd bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }

    /// Kernel bandwidths `base · mul^(i − num/2)` for `i` in `0..num`, integer halving.
    pub fn bandwidths(&self, base: f64) -> Vec<f64> {
        let half = (self.kernel_num / 2) as i32;
        (0..self.kernel_num as i32)
            .map(|i| base * self.kernel_mul.powi(i - half))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Alignment weight inside the label objective.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
    /// Domain-classification weight.
    pub lambda3: f64,
    /// Sparsity weight of the reconstruction objective.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.003, lambda2: 5e-3, lambda3: 0.3, gamma: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// One-hot (or half-half) weights selecting the median of the strict upper triangle,
/// with the gap to the nearest value whose overtaking would change the selection.
fn median_mask(d: &Tensor) -> Option<(f64, Tensor, f64)> {
    let n = d.rows();
    let mut vals: Vec<(f64, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            vals.push((d.at(i, j), i * n + j));
        }
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = vals.len();
    if k == 0 {
        return None;
    }
    let mut mask = vec![0.0; n * n];
    let (lo, hi) = if k % 2 == 1 { (k / 2, k / 2) } else { (k / 2 - 1, k / 2) };
    let below = if lo > 0 { vals[lo].0 - vals[lo - 1].0 } else { f64::INFINITY };
    let above = if hi + 1 < k { vals[hi + 1].0 - vals[hi].0 } else { f64::INFINITY };
    let median = if k % 2 == 1 {
        mask[vals[k / 2].1] = 1.0;
        vals[k / 2].0
    } else {
        mask[vals[k / 2 - 1].1] += 0.5;
        mask[vals[k / 2].1] += 0.5;
        0.5 * (vals[k / 2 - 1].0 + vals[k / 2].0)
    };
    Some((median, Tensor::matrix(n, n, mask), below.min(above)))
}

fn canonical_first(a: &Tensor, b: &Tensor) -> bool {
    match a.rows().cmp(&b.rows()) {
        std::cmp::Ordering::Equal => {
            for (x, y) in a.data().iter().zip(b.data()) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o == std::cmp::Ordering::Less,
                }
            }
            true
        }
        o => o == std::cmp::Ordering::Less,
    }
}

/// Biased MMD² between two row sets under a sum of Gaussian kernels `exp(−‖x−y‖²/h)`.
///
/// The median bandwidth is taken from the live distance matrix, so it is part of the
/// differentiated function; a degenerate median falls back to a constant 1.
pub fn mmd(g: &mut Graph, a: NodeId, b: NodeId, cfg: &MmdConfig) -> Result<NodeId> {
    cfg.validate()?;
    let na = g.value(a).rows();
    let nb = g.value(b).rows();
    if na < 2 || nb < 2 {
        return Err(Error::Input(format!("mmd needs at least 2 samples per set, got {na} and {nb}")));
    }
    // A fixed operand order makes the estimator bitwise symmetric.
    let (a, b, na, nb) = if canonical_first(g.value(a), g.value(b)) {
        (a, b, na, nb)
    } else {
        (b, a, nb, na)
    };
    let n = na + nb;
    let x = g.concat(&[a, b])?;
    let dist = g.pairwise_sq_dist(x)?;
    let base = match cfg.bandwidth {
        Bandwidth::Fixed(h) => g.constant(Tensor::scalar(h)),
        Bandwidth::Median => match median_mask(g.value(dist)) {
            Some((m, mask, gap)) if m > 0.0 && m.is_finite() => {
                g.note_breakpoint(gap);
                let mask = g.constant(mask);
                let picked = g.mul(dist, mask)?;
                g.sum(picked)
            }
            _ => g.constant(Tensor::scalar(1.0)),
        },
    };
    let one = g.constant(Tensor::scalar(1.0));
    let inv_base = g.div(one, base)?;
    let inv_base = g.reshape(inv_base, &[1, 1])?;
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let spread = g.matmul(ones, inv_base)?;
    let spread = g.reshape(spread, &[n])?;

    let mut kernel: Option<NodeId> = None;
    for mult in cfg.bandwidths(1.0) {
        let factors = g.scale(spread, -1.0 / mult);
        let scaled = g.scale_rows(dist, factors)?;
        let k = g.exp(scaled);
        kernel = Some(match kernel {
            None => k,
            Some(acc) => g.add(acc, k)?,
        });
    }
    let kernel = kernel.expect("kernel_num >= 1");

    let (wa, wb, wab) = (1.0 / (na * na) as f64, 1.0 / (nb * nb) as f64, -1.0 / (na * nb) as f64);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = match (i < na, j < na) {
                (true, true) => wa,
                (false, false) => wb,
                _ => wab,
            };
        }
    }
    let w = g.constant(Tensor::matrix(n, n, w));
    let weighted = g.mul(kernel, w)?;
    Ok(g.sum(weighted))
}

/// [`mmd`] on plain matrices.
pub fn mmd_value(a: &Tensor, b: &Tensor, cfg: &MmdConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = mmd(&mut g, an, bn, cfg)?;
    Ok(g.value(out).item())
}

/// Mean binary cross-entropy of `n x o` logits against 0/1 targets, probabilities
/// clamped to `[1e-9, 1 − 1e-9]`.
pub fn bce_from_logits(g: &mut Graph, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    if g.value(logits).shape() != targets.shape() {
        return Err(Error::Input(format!(
            "label shape {:?} does not match prediction shape {:?}",
            targets.shape(),
            g.value(logits).shape()
        )));
    }
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.ln(p)?;
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let lq = g.ln(q)?;
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|t| 1.0 - t));
    let pos = g.mul(y, lp)?;
    let negs = g.mul(not_y, lq)?;
    let ll = g.add(pos, negs)?;
    let m = g.mean(ll)?;
    Ok(g.scale(m, -1.0))
}

/// Components of the label objective.
#[derive(Clone, Copy, Debug)]
pub struct LabelTerms {
    pub bce: NodeId,
    /// `mmd / (‖sg(mean source v)‖² + 1e-12)`, before weighting.
    pub alignment: NodeId,
    /// `bce + lambda1 · alignment`.
    pub total: NodeId,
}

/// Label objective on already-encoded batches. The alignment term is skipped (kept as
/// a zero constant) when `lambda1` is zero.
pub fn label_objective(
    g: &mut Graph,
    bound: &Bound,
    head: &LabelHeadParams,
    v_source: NodeId,
    v_target: NodeId,
    labels: &Tensor,
    lambda1: f64,
    cfg: &MmdConfig,
) -> Result<LabelTerms> {
    let logits = label_logits(g, bound, head, v_source)?;
    let bce = bce_from_logits(g, logits, labels)?;
    if lambda1 == 0.0 {
        let alignment = g.constant(Tensor::scalar(0.0));
        return Ok(LabelTerms { bce, alignment, total: bce });
    }
    let disc = mmd(g, v_target, v_source, cfg)?;
    let mean = g.mean_rows(v_source)?;
    let mean = g.stop_gradient(mean);
    let norm = g.sq_norm(mean);
    let den = g.add_scalar(norm, NORM_STABILIZER);
    let alignment = g.div(disc, den)?;
    let weighted = g.scale(alignment, lambda1);
    let total = g.add(bce, weighted)?;
    Ok(LabelTerms { bce, alignment, total })
}

/// Multi-hot label matrix of a batch.
pub fn label_matrix(records: &[&PatientRecord]) -> Result<Tensor> {
    let o = records.first().map(|r| r.label.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(records.len() * o);
    for r in records {
        if r.label.len() != o {
            return Err(Error::Input("records disagree on label length".into()));
        }
        data.extend(r.label.iter().map(|&y| y as f64));
    }
    Ok(Tensor::matrix(records.len(), o, data))
}

/// Encodes both batches and evaluates the label objective.
pub fn label_loss(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    source: &[&PatientRecord],
    target: &[&PatientRecord],
    lambda1: f64,
    cfg: &MmdConfig,
) -> Result<LabelTerms> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input("label loss needs nonempty source and target batches".into()));
    }
    let n_codes = model.config.n_codes;
    let vs = encode_batch(g, bound, &model.encoder, source, n_codes)?;
    let vt = encode_batch(g, bound, &model.encoder, target, n_codes)?;
    let labels = label_matrix(source)?;
    label_objective(g, bound, &model.label_head, vs, vt, &labels, lambda1, cfg)
}
