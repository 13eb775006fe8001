//! Task metrics and linear-probe diagnostics of learned representations.

use serde::{Deserialize, Serialize};

use crate::alignment::bce_from_logits;
use crate::datagen::PatientRecord;
use crate::diffcore::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::encoder::{encode_all, linear};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::orthoinfer::project;
use crate::saecore::{metric, sae_decode, sae_encode, DictionaryMetric, MetricMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cutoff of the top-k recall.
    pub k: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 3, threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 500, learning_rate: 0.1, l2: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub w_f1: f64,
    pub recall_at_k: f64,
    pub auroc: f64,
    /// Micro-averaged F1; the plain binary F1 when there is one label.
    pub f1: f64,
}

impl Metrics {
    fn fields(&self) -> [f64; 4] {
        [self.w_f1, self.recall_at_k, self.auroc, self.f1]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Metrics { w_f1: f[0], recall_at_k: f[1], auroc: f[2], f1: f[3] }
    }
}

/// Metrics over several seeds with their mean and standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
    pub std_error: Metrics,
}

impl MetricReport {
    pub fn aggregate(k: usize, seeds: Vec<u64>, per_seed: Vec<Metrics>) -> Self {
        let n = per_seed.len() as f64;
        let mut mean = [0.0; 4];
        let mut se = [0.0; 4];
        if !per_seed.is_empty() {
            for m in &per_seed {
                for (acc, x) in mean.iter_mut().zip(m.fields()) {
                    *acc += x / n;
                }
            }
            if per_seed.len() > 1 {
                for i in 0..4 {
                    let var = per_seed.iter().map(|m| (m.fields()[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
                    se[i] = (var / n).sqrt();
                }
            }
        }
        MetricReport {
            k,
            seeds,
            per_seed,
            mean: Metrics::from_fields(mean),
            std_error: Metrics::from_fields(se),
        }
    }
}

fn f1_from(tp: f64, fp: f64, fneg: f64) -> f64 {
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Area under the ROC curve by the rank-sum statistic with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::Input("AUROC is undefined without positive labels".into()));
    }
    if neg == 0 {
        return Err(Error::Input("AUROC is undefined without negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Indices of the `k` largest scores, ties broken by lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Support-weighted F1, top-k recall, micro AUROC, and micro F1.
pub fn compute_metrics(probs: &[Vec<f64>], labels: &[Vec<u8>], cfg: &EvalConfig) -> Result<Metrics> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Input(format!(
            "{} prediction rows for {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let o = labels[0].len();
    if probs.iter().any(|p| p.len() != o) || labels.iter().any(|l| l.len() != o) {
        return Err(Error::Input("prediction and label widths differ".into()));
    }
    let mut tp = vec![0.0; o];
    let mut fp = vec![0.0; o];
    let mut fneg = vec![0.0; o];
    for (p, y) in probs.iter().zip(labels) {
        for j in 0..o {
            match (p[j] >= cfg.threshold, y[j] == 1) {
                (true, true) => tp[j] += 1.0,
                (true, false) => fp[j] += 1.0,
                (false, true) => fneg[j] += 1.0,
                _ => {}
            }
        }
    }
    let support: Vec<f64> = (0..o).map(|j| tp[j] + fneg[j]).collect();
    let total: f64 = support.iter().sum();
    let w_f1 = if total > 0.0 {
        (0..o).map(|j| support[j] * f1_from(tp[j], fp[j], fneg[j])).sum::<f64>() / total
    } else {
        0.0
    };
    let f1 = f1_from(tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());

    let mut recall_sum = 0.0;
    let mut counted = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        let positives = y.iter().filter(|&&v| v == 1).count();
        if positives == 0 {
            continue;
        }
        let hits = top_k(p, cfg.k).into_iter().filter(|&j| y[j] == 1).count();
        recall_sum += hits as f64 / positives as f64;
        counted += 1;
    }
    let recall_at_k = if counted > 0 { recall_sum / counted as f64 } else { 0.0 };

    let flat_scores: Vec<f64> = probs.iter().flatten().copied().collect();
    let flat_labels: Vec<bool> = labels.iter().flatten().map(|&y| y == 1).collect();
    let auroc = auroc(&flat_scores, &flat_labels)?;
    Ok(Metrics { w_f1, recall_at_k, auroc, f1 })
}

/// A fitted multi-output logistic probe: `sigmoid(x Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    /// `outputs x features`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub final_loss: f64,
}

impl ProbeFit {
    /// Fraction of entries whose thresholded prediction matches the target.
    pub fn accuracy(&self, features: &Tensor, targets: &Tensor) -> f64 {
        let (n, o) = (targets.rows(), targets.cols());
        let mut correct = 0usize;
        for i in 0..n {
            for j in 0..o {
                let z: f64 = self.weight.row(j).iter().zip(features.row(i)).map(|(a, b)| a * b).sum::<f64>() + self.bias[j];
                if (z >= 0.0) == (targets.at(i, j) >= 0.5) {
                    correct += 1;
                }
            }
        }
        correct as f64 / (n * o) as f64
    }
}

/// Logistic regression per target column on frozen features, zero-initialized and
/// trained full-batch with Adam for a fixed step budget and an L2 penalty on weights.
pub fn linear_probe(features: &Tensor, targets: &Tensor, cfg: &ProbeConfig) -> Result<ProbeFit> {
    if features.ndim() != 2 || targets.ndim() != 2 || features.rows() != targets.rows() {
        return Err(Error::Input("probe features and targets must be matrices with equal rows".into()));
    }
    let (n, d, o) = (features.rows(), features.cols(), targets.cols());
    for j in 0..o {
        let pos = (0..n).filter(|&i| targets.at(i, j) >= 0.5).count();
        if pos == 0 || pos == n {
            return Err(Error::Input(format!("probe target column {j} has a single class")));
        }
    }
    let mut store = ParamStore::new();
    let w = store.add("probe.weight", Tensor::zeros(&[o, d]));
    let b = store.add("probe.bias", Tensor::zeros(&[o]));
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        store.zero_grad();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(features.clone());
        let logits = linear(&mut g, x, bound.node(w), bound.node(b))?;
        let bce = bce_from_logits(&mut g, logits, targets)?;
        let reg = g.sq_norm(bound.node(w));
        let reg = g.scale(reg, cfg.l2);
        let loss = g.add(bce, reg)?;
        final_loss = g.value(loss).item();
        g.backward(loss)?;
        store.accumulate(&g, &bound);
        opt.step(&mut store, cfg.learning_rate);
    }
    Ok(ProbeFit {
        weight: store.value(w).clone(),
        bias: store.value(b).data().to_vec(),
        final_loss,
    })
}

/// Mean over rows of `|cos(a_i, b_i)|`; a single-row `b` is compared with every row of `a`.
pub fn mean_abs_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() || (b.rows() != 1 && b.rows() != a.rows()) {
        return Err(Error::Input(format!(
            "cannot compare weight shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        let x = a.row(i);
        let y = b.row(if b.rows() == 1 { 0 } else { i });
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
        total += if nx == 0.0 || ny == 0.0 { 0.0 } else { (dot / (nx * ny)).abs() };
    }
    Ok(total / a.rows() as f64)
}

/// Representations `v` and residuals `z` of a trained model for many records.
pub struct Features {
    pub v: Tensor,
    pub z: Tensor,
}

/// Encodes records and projects each representation onto its reconstruction.
pub fn features(model: &Model, records: &[PatientRecord], mode: MetricMode, epsilon: f64) -> Result<Features> {
    let v = encode_all(&model.store, &model.encoder, records)?;
    let w = model.store.value(model.sae.dictionary);
    let m = match mode {
        MetricMode::Identity => DictionaryMetric::identity(w.cols()),
        _ => metric(w),
    };
    let d = v.cols();
    let mut z = Vec::with_capacity(v.len());
    for i in 0..v.rows() {
        let vi = Tensor::vector(v.row(i).to_vec());
        let s = sae_encode(w, &vi)?;
        let vh = sae_decode(w, &s)?;
        z.extend_from_slice(project(&vi, &vh, &m, epsilon)?.z.data());
    }
    Ok(Features { z: Tensor::matrix(v.rows(), d, z), v })
}

fn label_tensor(records: &[PatientRecord]) -> Tensor {
    let o = records.first().map(|r| r.label.len()).unwrap_or(0);
    Tensor::matrix(
        records.len(),
        o,
        records.iter().flat_map(|r| r.label.iter().map(|&y| y as f64)).collect(),
    )
}

fn domain_tensor(records: &[PatientRecord]) -> Tensor {
    Tensor::matrix(records.len(), 1, records.iter().map(|r| r.domain as f64).collect())
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// Cosines for one domain's class probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCosines {
    /// `cos(W_c(v0), W_d(v0))`
    pub class_vs_domain_base: f64,
    /// `cos(W_c(v0), W_c(z))`
    pub base_vs_residual: f64,
    /// `cos(W_c(v0), W_c(v))`
    pub base_vs_adapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub source: DomainCosines,
    pub target: DomainCosines,
    /// Mean of the two domain columns.
    pub mean: DomainCosines,
    /// Held-out domain-probe accuracy from the adapted representation.
    pub domain_accuracy_v: f64,
    /// Held-out domain-probe accuracy from the residual.
    pub domain_accuracy_z: f64,
}

/// Records used by the probe analysis, split by domain.
pub struct ProbeData<'a> {
    pub source_train: &'a [PatientRecord],
    pub target_train: &'a [PatientRecord],
    pub source_heldout: &'a [PatientRecord],
    pub target_heldout: &'a [PatientRecord],
}

/// Trains class probes per domain on the unadapted features `v0` (from `base`), the
/// adapted `v`, and the residual `z` (from `full`), a domain probe on merged `v0`, and
/// domain probes on merged `v` and `z` scored on held-out records.
pub fn probe_cosines(
    base: &Model,
    full: &Model,
    data: &ProbeData,
    mode: MetricMode,
    epsilon: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if base.config.n_codes != full.config.n_codes {
        return Err(Error::Input(format!(
            "vocabulary mismatch: {} vs {} codes",
            base.config.n_codes, full.config.n_codes
        )));
    }
    let v0_s = encode_all(&base.store, &base.encoder, data.source_train)?;
    let v0_t = encode_all(&base.store, &base.encoder, data.target_train)?;
    let fs = features(full, data.source_train, mode, epsilon)?;
    let ft = features(full, data.target_train, mode, epsilon)?;

    let merged: Vec<PatientRecord> = data.source_train.iter().chain(data.target_train).cloned().collect();
    let dom = domain_tensor(&merged);
    let w_d_base = linear_probe(&stack(&v0_s, &v0_t), &dom, cfg)?.weight;

    let column = |v0: &Tensor, f: &Features, recs: &[PatientRecord]| -> Result<DomainCosines> {
        let y = label_tensor(recs);
        let c_base = linear_probe(v0, &y, cfg)?.weight;
        let c_z = linear_probe(&f.z, &y, cfg)?.weight;
        let c_v = linear_probe(&f.v, &y, cfg)?.weight;
        Ok(DomainCosines {
            class_vs_domain_base: mean_abs_cosine(&c_base, &w_d_base)?,
            base_vs_residual: mean_abs_cosine(&c_base, &c_z)?,
            base_vs_adapted: mean_abs_cosine(&c_base, &c_v)?,
        })
    };
    let source = column(&v0_s, &fs, data.source_train)?;
    let target = column(&v0_t, &ft, data.target_train)?;
    let mean = DomainCosines {
        class_vs_domain_base: 0.5 * (source.class_vs_domain_base + target.class_vs_domain_base),
        base_vs_residual: 0.5 * (source.base_vs_residual + target.base_vs_residual),
        base_vs_adapted: 0.5 * (source.base_vs_adapted + target.base_vs_adapted),
    };

    let held: Vec<PatientRecord> = data.source_heldout.iter().chain(data.target_heldout).cloned().collect();
    let fh = features(full, &held, mode, epsilon)?;
    let dom_held = domain_tensor(&held);
    let pv = linear_probe(&stack(&fs.v, &ft.v), &dom, cfg)?;
    let pz = linear_probe(&stack(&fs.z, &ft.z), &dom, cfg)?;
    Ok(ProbeResult {
        source,
        target,
        mean,
        domain_accuracy_v: pv.accuracy(&fh.v, &dom_held),
        domain_accuracy_z: pz.accuracy(&fh.z, &dom_held),
    })
}
