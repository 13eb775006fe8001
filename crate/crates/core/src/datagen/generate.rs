use rand::Rng as _;

use super::{DataError, Dataset, Domain, PatientRecord, Split, SyntheticConfig};
use crate::rng::{self, Rng};

/// Binary latent concept activations of one patient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentPatient {
    pub invariant: Vec<bool>,
    pub covariate: Vec<bool>,
}

/// Thresholded linear rule from invariant activations to labels.
///
/// Label `j < n_inv` fires when concept `j` is active. Each later label fires when both
/// concepts `j mod n_inv` and `(j + 1) mod n_inv` are active (weights 1 + 1, threshold 2).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRule {
    weights: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
}

impl LabelRule {
    pub fn new(n_invariant: usize, n_labels: usize) -> Self {
        let mut weights = Vec::with_capacity(n_labels);
        let mut thresholds = Vec::with_capacity(n_labels);
        for j in 0..n_labels {
            let mut w = vec![0.0; n_invariant];
            if j < n_invariant {
                w[j] = 1.0;
                thresholds.push(1.0);
            } else {
                w[j % n_invariant] += 1.0;
                w[(j + 1) % n_invariant] += 1.0;
                thresholds.push(2.0);
            }
            weights.push(w);
        }
        LabelRule { weights, thresholds }
    }

    pub fn labels(&self, invariant: &[bool]) -> Vec<u8> {
        self.weights
            .iter()
            .zip(&self.thresholds)
            .map(|(w, &t)| {
                let score: f64 = w
                    .iter()
                    .zip(invariant)
                    .map(|(wi, &a)| if a { *wi } else { 0.0 })
                    .sum();
                u8::from(score >= t)
            })
            .collect()
    }
}

/// Samples patients for one configuration. The label rule is shared by both domains.
pub struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    rule: LabelRule,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a SyntheticConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        Ok(Generator {
            cfg,
            rule: LabelRule::new(cfg.n_invariant_concepts, cfg.n_labels),
        })
    }

    pub fn rule(&self) -> &LabelRule {
        &self.rule
    }

    pub fn sample_latent(&self, domain: Domain, rng: &mut Rng) -> LatentPatient {
        let invariant = (0..self.cfg.n_invariant_concepts)
            .map(|_| rng.gen_bool(self.cfg.invariant_prevalence))
            .collect();
        let covariate = (0..self.cfg.n_covariate_concepts)
            .map(|j| rng.gen_bool(self.cfg.covariate_prevalence(j, domain)))
            .collect();
        LatentPatient { invariant, covariate }
    }

    /// Emits visits and labels for a latent draw. The label depends on `latent.invariant`
    /// and the noise flips only.
    pub fn emit(&self, latent: &LatentPatient, domain: Domain, rng: &mut Rng) -> PatientRecord {
        let cfg = self.cfg;
        let active: Vec<usize> = latent
            .invariant
            .iter()
            .chain(&latent.covariate)
            .enumerate()
            .filter_map(|(k, &a)| a.then_some(k))
            .collect();
        let n_background = cfg.n_codes - cfg.concept_codes();
        let first_background = cfg.concept_codes() as u32;

        let n_visits = rng.gen_range(cfg.visits_per_patient.0..=cfg.visits_per_patient.1);
        let mut visits = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let n = rng.gen_range(cfg.codes_per_visit.0..=cfg.codes_per_visit.1);
            let mut visit = Vec::with_capacity(n);
            for _ in 0..n {
                let background = n_background > 0
                    && (active.is_empty() || rng.gen_bool(cfg.background_rate));
                let code = if background {
                    first_background + rng.gen_range(0..n_background) as u32
                } else if active.is_empty() {
                    rng.gen_range(0..cfg.n_codes) as u32
                } else {
                    let concept = active[rng.gen_range(0..active.len())];
                    cfg.block_start(concept) + rng.gen_range(0..cfg.codes_per_concept) as u32
                };
                visit.push(code);
            }
            visit.sort_unstable();
            visit.dedup();
            visits.push(visit);
        }

        let mut label = self.rule.labels(&latent.invariant);
        for y in &mut label {
            if rng.gen_bool(cfg.label_noise) {
                *y = 1 - *y;
            }
        }
        PatientRecord {
            visits,
            label,
            domain: domain.indicator(),
        }
    }

    /// `n` patients for `domain`, a pure function of (config, domain, seed).
    pub fn patients(&self, domain: Domain, n: usize) -> Vec<PatientRecord> {
        let mut rng = rng::indexed_stream(self.cfg.seed, "data", domain.indicator() as u64);
        (0..n)
            .map(|_| {
                let latent = self.sample_latent(domain, &mut rng);
                self.emit(&latent, domain, &mut rng)
            })
            .collect()
    }
}

/// One domain's records split 70/10/20 into train/valid/test.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domain: Domain,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl DomainData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn from_records(domain: Domain, records: Vec<PatientRecord>) -> Self {
        let n = records.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_valid = (0.1 * n as f64).round() as usize;
        let mut it = records.into_iter();
        let train = it.by_ref().take(n_train).collect();
        let valid = it.by_ref().take(n_valid).collect();
        let test = it.collect();
        DomainData {
            domain,
            train: Dataset { records: train, split: Split::Train },
            valid: Dataset { records: valid, split: Split::Valid },
            test: Dataset { records: test, split: Split::Test },
        }
    }
}

pub fn generate_domain(cfg: &SyntheticConfig, domain: Domain) -> Result<DomainData, DataError> {
    let g = Generator::new(cfg)?;
    Ok(DomainData::from_records(domain, g.patients(domain, cfg.n_patients)))
}

/// Source and target data for one configuration.
pub fn generate(cfg: &SyntheticConfig) -> Result<(DomainData, DomainData), DataError> {
    Ok((
        generate_domain(cfg, Domain::Source)?,
        generate_domain(cfg, Domain::Target)?,
    ))
}

/// Normalized code occurrence counts over all visits.
pub fn code_frequencies(records: &[PatientRecord], n_codes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_codes];
    let mut total = 0.0;
    for r in records {
        for v in &r.visits {
            for &c in v {
                counts[c as usize] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|x| *x /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest absolute difference in per-label positive rates between two record sets.
pub fn label_marginal_gap(source: &[PatientRecord], target: &[PatientRecord]) -> f64 {
    let rates = |rs: &[PatientRecord]| -> Vec<f64> {
        let o = rs.first().map_or(0, |r| r.label.len());
        let mut acc = vec![0.0; o];
        for r in rs {
            for (a, &y) in acc.iter_mut().zip(&r.label) {
                *a += y as f64;
            }
        }
        acc.iter().map(|x| x / rs.len().max(1) as f64).collect()
    };
    let (s, t) = (rates(source), rates(target));
    s.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
