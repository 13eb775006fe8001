//! Sparse-dimension ablation, probability-change attribution, and the four-quadrant
//! report of label impact against domain impact.
//!
//! Output label `j` stands for the input code `label_codes[j]` of the data config, so a
//! label that a dimension moves can be traced back to a code that can be removed from
//! the record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::PatientRecord;
use crate::diffcore::Tensor;
use crate::encoder::{encode, predict};
use crate::error::{Error, Result};
use crate::orthoinfer::{domain_target_prob, project};
use crate::saecore::{metric, sae_decode, sae_encode, DictionaryMetric, MetricMode, SparseCode};
use crate::trainer::Checkpoint;

/// Report schema version written into every JSON report.
pub const REPORT_VERSION: u32 = 1;
/// At most this many codes are reported per dimension.
pub const MAX_CODES_PER_DIM: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub top_k: usize,
    pub label_threshold: f64,
    /// Codes annotated at each end of the domain-impact ranking.
    pub domain_rank_n: usize,
    /// Target test patients explained by the command-line report.
    pub patients: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { top_k: 3, label_threshold: 0.05, domain_rank_n: 5, patients: 10 }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("interpret.top_k must be at least 1".into()));
        }
        if !(self.label_threshold > 0.0 && self.label_threshold < 1.0) {
            return Err(Error::Config(format!(
                "interpret.label_threshold must lie in (0, 1), got {}",
                self.label_threshold
            )));
        }
        if self.domain_rank_n < 1 {
            return Err(Error::Config("interpret.domain_rank_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Label impact first, domain impact second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    /// Shift-sensitive evidence.
    HH,
    /// Transferable evidence.
    HL,
    LH,
    LL,
}

impl Quadrant {
    pub fn from_axes(high_label: bool, domain_sensitive: bool) -> Quadrant {
        match (high_label, domain_sensitive) {
            (true, true) => Quadrant::HH,
            (true, false) => Quadrant::HL,
            (false, true) => Quadrant::LH,
            (false, false) => Quadrant::LL,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub hh: usize,
    pub hl: usize,
    pub lh: usize,
    pub ll: usize,
    pub unannotated: usize,
}

impl QuadrantCounts {
    pub fn annotated(&self) -> usize {
        self.hh + self.hl + self.lh + self.ll
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    /// Output label index.
    pub label: usize,
    /// Input code the label stands for.
    pub code: u32,
    pub label_delta: f64,
    pub domain_impact: f64,
    pub quadrant: Option<Quadrant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub dim: usize,
    pub activation: f64,
    /// Domain-probability change from ablating the dimension itself.
    pub domain_delta: f64,
    /// Codes with a positive label change, largest first.
    pub codes: Vec<CodeEntry>,
    pub counts: QuadrantCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub record: usize,
    pub active_dims: usize,
    pub dims: Vec<DimensionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub version: u32,
    pub config: AblationConfig,
    pub patients: Vec<PatientReport>,
}

impl InterpretationReport {
    pub fn codes(&self) -> impl Iterator<Item = &CodeEntry> {
        self.patients.iter().flat_map(|p| p.dims.iter().flat_map(|d| d.codes.iter()))
    }
}

/// Indices of the `k` largest strictly positive entries, descending, lower index first
/// among ties.
pub fn top_k_dims(s: &SparseCode, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).filter(|&i| s.0[i] > 0.0).collect();
    idx.sort_by(|&a, &b| s.0[b].abs().total_cmp(&s.0[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Copy of `s` with coordinate `dim` set to zero.
pub fn ablate(s: &SparseCode, dim: usize) -> Result<SparseCode> {
    if dim >= s.len() {
        return Err(Error::Input(format!("dimension {dim} is outside a code of length {}", s.len())));
    }
    let mut out = s.clone();
    out.0[dim] = 0.0;
    Ok(out)
}

/// Read-only view of a checkpoint for attribution.
struct Explainer<'a> {
    ckpt: &'a Checkpoint,
    dictionary: &'a Tensor,
    metric: DictionaryMetric,
    epsilon: f64,
}

impl<'a> Explainer<'a> {
    fn new(ckpt: &'a Checkpoint, need_domain: bool) -> Result<Self> {
        let train = &ckpt.config.train;
        let weights = train.variant.effective_weights(ckpt.config.loss);
        let sae_trained = ckpt.stage >= 2 && weights.lambda2 > 0.0;
        if !sae_trained {
            return Err(Error::Input(format!(
                "checkpoint (variant {}, epoch {}, stage {}) has no trained sparse autoencoder",
                train.variant.name(),
                ckpt.epoch,
                ckpt.stage
            )));
        }
        if need_domain && !(ckpt.stage >= 3 && weights.lambda3 > 0.0) {
            return Err(Error::Input(format!(
                "checkpoint (variant {}, stage {}) has no trained domain head",
                train.variant.name(),
                ckpt.stage
            )));
        }
        let dictionary = ckpt.model.store.value(ckpt.model.sae.dictionary);
        let metric = match train.variant.metric_modes(train.freeze_metric_in_recon).1 {
            MetricMode::Identity => DictionaryMetric::identity(dictionary.cols()),
            _ => metric(dictionary),
        };
        Ok(Explainer { ckpt, dictionary, metric, epsilon: train.epsilon })
    }

    fn check_record(&self, record: &PatientRecord) -> Result<()> {
        record
            .validate(self.ckpt.model.config.n_codes, None)
            .map_err(|e| Error::Input(format!("record does not fit the checkpoint vocabulary: {e}")))
    }

    fn represent(&self, record: &PatientRecord) -> Result<(Tensor, SparseCode)> {
        let v = encode(&self.ckpt.model.store, &self.ckpt.model.encoder, record)?;
        let s = sae_encode(self.dictionary, &v)?;
        Ok((v, s))
    }

    /// Label probabilities read off the decoded code.
    fn label_probs(&self, s: &SparseCode) -> Result<Vec<f64>> {
        let v_hat = sae_decode(self.dictionary, s)?;
        Ok(predict(&self.ckpt.model.store, &self.ckpt.model.label_head, &v_hat)?.into_data())
    }

    fn domain_prob(&self, v: &Tensor, s: &SparseCode) -> Result<f64> {
        let v_hat = sae_decode(self.dictionary, s)?;
        let z = project(v, &v_hat, &self.metric, self.epsilon)?.z;
        let d = z.len();
        let probs = domain_target_prob(
            &self.ckpt.model.store,
            &self.ckpt.model.domain_head,
            &z.reshaped(&[1, d])?,
        )?;
        Ok(probs[0])
    }

    fn label_delta(&self, s: &SparseCode, dim: usize) -> Result<Vec<f64>> {
        let ablated = ablate(s, dim)?;
        if ablated == *s {
            return Ok(vec![0.0; self.ckpt.model.config.n_labels]);
        }
        let p = self.label_probs(s)?;
        let q = self.label_probs(&ablated)?;
        Ok(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).collect())
    }

    fn code_impact(&self, record: &PatientRecord, base: f64, code: u32) -> Result<f64> {
        if !record.contains_code(code) {
            return Ok(0.0);
        }
        let reduced = record.without_code(code);
        if reduced.visits.is_empty() {
            // Nothing remains to encode; the code carries no separable impact.
            return Ok(0.0);
        }
        let (v, s) = self.represent(&reduced)?;
        Ok((self.domain_prob(&v, &s)? - base).abs())
    }
}

/// `|p(Wᵀs) − p(Wᵀs̃)|` per output label, where `s̃` has dimension `dim` ablated.
pub fn delta_prob_label(ckpt: &Checkpoint, record: &PatientRecord, dim: usize) -> Result<Vec<f64>> {
    let ex = Explainer::new(ckpt, false)?;
    ex.check_record(record)?;
    let (_, s) = ex.represent(record)?;
    ex.label_delta(&s, dim)
}

/// Domain-probability changes of one dimension ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDelta {
    /// `|d(z) − d(z̃)|` with `z̃` projected against the ablated reconstruction.
    pub dimension: f64,
    /// `(input code, impact)` for every code the dimension maps, in label order.
    pub per_code: Vec<(u32, f64)>,
}

pub fn delta_prob_domain(ckpt: &Checkpoint, record: &PatientRecord, dim: usize) -> Result<DomainDelta> {
    let ex = Explainer::new(ckpt, true)?;
    ex.check_record(record)?;
    let (v, s) = ex.represent(record)?;
    let ablated = ablate(&s, dim)?;
    let base = ex.domain_prob(&v, &s)?;
    let dimension = if ablated == s { 0.0 } else { (base - ex.domain_prob(&v, &ablated)?).abs() };
    let label_codes = ckpt.config.data.label_codes();
    let deltas = ex.label_delta(&s, dim)?;
    let mut per_code = Vec::new();
    for (j, &d) in deltas.iter().enumerate() {
        if d > 0.0 {
            let code = label_codes[j];
            per_code.push((code, ex.code_impact(record, base, code)?));
        }
    }
    Ok(DomainDelta { dimension, per_code })
}

/// Marks the `n` highest-impact entries as domain-sensitive and the `n` lowest as
/// insensitive. With fewer than `2n` entries the upper half (rounded up) is sensitive.
fn rank_annotations(impacts: &[f64], n: usize) -> Vec<Option<bool>> {
    let m = impacts.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| impacts[b].total_cmp(&impacts[a]).then(a.cmp(&b)));
    let (high, low) = if m >= 2 * n { (n, n) } else { (m.div_ceil(2), m / 2) };
    let mut out = vec![None; m];
    for (rank, &i) in order.iter().enumerate() {
        if rank < high {
            out[i] = Some(true);
        } else if rank >= m - low {
            out[i] = Some(false);
        }
    }
    out
}

fn dimension_report(
    ex: &Explainer,
    cfg: &AblationConfig,
    label_codes: &[u32],
    record: &PatientRecord,
    v: &Tensor,
    s: &SparseCode,
    base: f64,
    dim: usize,
) -> Result<DimensionReport> {
    let deltas = ex.label_delta(s, dim)?;
    let ablated = ablate(s, dim)?;
    let domain_delta = (base - ex.domain_prob(v, &ablated)?).abs();

    let mut mapped: Vec<usize> = (0..deltas.len()).filter(|&j| deltas[j] > 0.0).collect();
    mapped.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
    mapped.truncate(MAX_CODES_PER_DIM);

    let impacts = mapped
        .iter()
        .map(|&j| ex.code_impact(record, base, label_codes[j]))
        .collect::<Result<Vec<_>>>()?;
    let annotations = rank_annotations(&impacts, cfg.domain_rank_n);
    let mut counts = QuadrantCounts::default();
    let codes = mapped
        .iter()
        .zip(impacts.iter().zip(&annotations))
        .map(|(&j, (&impact, &ann))| {
            let quadrant = ann.map(|sensitive| Quadrant::from_axes(deltas[j] > cfg.label_threshold, sensitive));
            match quadrant {
                Some(Quadrant::HH) => counts.hh += 1,
                Some(Quadrant::HL) => counts.hl += 1,
                Some(Quadrant::LH) => counts.lh += 1,
                Some(Quadrant::LL) => counts.ll += 1,
                None => counts.unannotated += 1,
            }
            CodeEntry { label: j, code: label_codes[j], label_delta: deltas[j], domain_impact: impact, quadrant }
        })
        .collect();
    Ok(DimensionReport { dim, activation: s.0[dim], domain_delta, codes, counts })
}

/// Full report over `records`; each patient contributes its `top_k` most active
/// dimensions.
pub fn quadrant_report(
    ckpt: &Checkpoint,
    records: &[PatientRecord],
    cfg: &AblationConfig,
) -> Result<InterpretationReport> {
    cfg.validate()?;
    let ex = Explainer::new(ckpt, true)?;
    let label_codes = ckpt.config.data.label_codes();
    let mut patients = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        ex.check_record(record).map_err(|e| Error::Input(format!("record {i}: {e}")))?;
        let (v, s) = ex.represent(record)?;
        let base = ex.domain_prob(&v, &s)?;
        let dims = top_k_dims(&s, cfg.top_k)
            .into_iter()
            .map(|dim| dimension_report(&ex, cfg, &label_codes, record, &v, &s, base, dim))
            .collect::<Result<Vec<_>>>()?;
        patients.push(PatientReport { record: i, active_dims: s.active_count(), dims });
    }
    Ok(InterpretationReport { version: REPORT_VERSION, config: *cfg, patients })
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let (x0, y0, x1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN);
    let _ = writeln!(s, r##"<path class="axis" d="M {x0} {MARGIN} V {y0} H {x1}" fill="none" stroke="#000000"/>"##);
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn y_pixel(value: f64, max: f64) -> f64 {
    HEIGHT - MARGIN - value / max * (HEIGHT - 2.0 * MARGIN)
}

fn quadrant_color(q: Option<Quadrant>) -> &'static str {
    match q {
        Some(Quadrant::HH) => "#d62728",
        Some(Quadrant::HL) => "#2ca02c",
        Some(Quadrant::LH) => "#ff7f0e",
        Some(Quadrant::LL) => "#1f77b4",
        None => "#7f7f7f",
    }
}

/// Label impact against domain impact, with the label threshold and the median domain
/// impact drawn as reference lines.
pub fn scatter_svg(title: &str, codes: &[&CodeEntry], label_threshold: f64) -> String {
    let mut s = svg_open(title);
    let x_max = codes.iter().map(|c| c.domain_impact).fold(0.0, f64::max).max(1e-6) * 1.05;
    let y_max = codes.iter().map(|c| c.label_delta).fold(label_threshold, f64::max) * 1.05;
    let x_pixel = |v: f64| MARGIN + v / x_max * (WIDTH - 2.0 * MARGIN);
    let ty = y_pixel(label_threshold, y_max);
    let _ = writeln!(
        s,
        r##"<line class="threshold" data-value="{label_threshold}" x1="{MARGIN}" y1="{ty}" x2="{}" y2="{ty}" stroke="#555555" stroke-dasharray="4 3"/>"##,
        WIDTH - MARGIN
    );
    if !codes.is_empty() {
        let mut impacts: Vec<f64> = codes.iter().map(|c| c.domain_impact).collect();
        impacts.sort_by(f64::total_cmp);
        let median = impacts[impacts.len() / 2];
        let mx = x_pixel(median);
        let _ = writeln!(
            s,
            r##"<line class="domain-split" data-value="{median}" x1="{mx}" y1="{MARGIN}" x2="{mx}" y2="{}" stroke="#555555" stroke-dasharray="2 2"/>"##,
            HEIGHT - MARGIN
        );
    }
    for c in codes {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="4" fill="{}"><title>code {} label {}</title></circle>"#,
            x_pixel(c.domain_impact),
            y_pixel(c.label_delta, y_max),
            quadrant_color(c.quadrant),
            c.code,
            c.label
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">domain impact</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="11" transform="rotate(-90 14 {})" text-anchor="middle">label impact</text>"#, HEIGHT / 2.0, HEIGHT / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Per-code label change with one dashed horizontal rule at the threshold.
pub fn bar_svg(title: &str, codes: &[(String, f64)], label_threshold: f64) -> String {
    let mut s = svg_open(title);
    let y_max = codes.iter().map(|c| c.1).fold(label_threshold, f64::max) * 1.05;
    let slot = (WIDTH - 2.0 * MARGIN) / codes.len().max(1) as f64;
    for (i, (name, value)) in codes.iter().enumerate() {
        let top = y_pixel(*value, y_max);
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="#4c72b0"><title>{}: {value}</title></rect>"##,
            MARGIN + i as f64 * slot + slot * 0.1,
            slot * 0.8,
            HEIGHT - MARGIN - top,
            escape(name)
        );
    }
    let ty = y_pixel(label_threshold, y_max);
    let _ = writeln!(
        s,
        r##"<line class="threshold" data-value="{label_threshold}" x1="{MARGIN}" y1="{ty}" x2="{}" y2="{ty}" stroke="#d62728" stroke-dasharray="6 4"/>"##,
        WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">code</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, pooled `scatter.svg` and `bars.svg`, and one scatter and bar
/// chart per analyzed patient. Returns the written paths.
pub fn emit_plots(report: &InterpretationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let threshold = report.config.label_threshold;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: Vec<u8>| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    emit("report.json".into(), json)?;

    let bars_of = |codes: &[&CodeEntry], with_dim: Option<&PatientReport>| -> Vec<(String, f64)> {
        match with_dim {
            Some(p) => p
                .dims
                .iter()
                .flat_map(|d| d.codes.iter().map(move |c| (format!("dim {} code {}", d.dim, c.code), c.label_delta)))
                .collect(),
            None => codes.iter().map(|c| (format!("code {}", c.code), c.label_delta)).collect(),
        }
    };
    let all: Vec<&CodeEntry> = report.codes().collect();
    emit("scatter.svg".into(), scatter_svg("all patients", &all, threshold).into_bytes())?;
    emit("bars.svg".into(), bar_svg("all patients", &bars_of(&all, None), threshold).into_bytes())?;
    for p in &report.patients {
        let codes: Vec<&CodeEntry> = p.dims.iter().flat_map(|d| d.codes.iter()).collect();
        let title = format!("record {}", p.record);
        emit(format!("patient_{}_scatter.svg", p.record), scatter_svg(&title, &codes, threshold).into_bytes())?;
        emit(format!("patient_{}_bars.svg", p.record), bar_svg(&title, &bars_of(&codes, Some(p)), threshold).into_bytes())?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_dims(&SparseCode(vec![0.0, 3.0, 1.0, 3.0]), 2), vec![1, 3]);
        assert!(top_k_dims(&SparseCode(vec![0.0; 4]), 3).is_empty());
        assert_eq!(top_k_dims(&SparseCode(vec![0.1, 0.5, 0.2]), 5), vec![1, 2, 0]);
    }

    #[test]
    fn ablate_examples() {
        assert_eq!(ablate(&SparseCode(vec![1.0, 2.0]), 0).unwrap(), SparseCode(vec![0.0, 2.0]));
        let s = SparseCode(vec![0.0, 2.0]);
        assert_eq!(ablate(&s, 0).unwrap(), s);
        assert!(ablate(&s, 2).is_err());
        let t = SparseCode(vec![0.5, 1.5, 2.5]);
        let a = ablate(&t, 1).unwrap();
        assert_eq!(t.0.iter().zip(&a.0).filter(|(x, y)| x != y).count(), 1);
    }

    #[test]
    fn rank_annotations_cover_ten_codes() {
        let impacts: Vec<f64> = (0..10).map(|i| i as f64 * 0.01).collect();
        let ann = rank_annotations(&impacts, 5);
        assert!(ann.iter().all(|a| a.is_some()));
        assert_eq!(ann.iter().filter(|a| **a == Some(true)).count(), 5);
        assert_eq!(ann[9], Some(true));
        assert_eq!(ann[0], Some(false));
    }

    #[test]
    fn rank_annotations_leave_middle_unannotated() {
        let impacts: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let ann = rank_annotations(&impacts, 5);
        assert_eq!(ann.iter().filter(|a| a.is_none()).count(), 4);
        assert_eq!(ann[13], Some(true));
        assert_eq!(ann[0], Some(false));
        assert_eq!(ann[7], None);
        let short = rank_annotations(&[0.3, 0.1, 0.2], 5);
        assert_eq!(short, vec![Some(true), Some(false), Some(true)]);
    }

    #[test]
    fn quadrant_axes() {
        assert_eq!(Quadrant::from_axes(true, true), Quadrant::HH);
        assert_eq!(Quadrant::from_axes(true, false), Quadrant::HL);
        assert_eq!(Quadrant::from_axes(false, true), Quadrant::LH);
        assert_eq!(Quadrant::from_axes(false, false), Quadrant::LL);
    }

    #[test]
    fn config_validation() {
        assert!(AblationConfig::default().validate().is_ok());
        assert!(AblationConfig { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(AblationConfig { label_threshold: 1.0, ..Default::default() }.validate().is_err());
    }
}
