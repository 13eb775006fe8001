//! Synthetic longitudinal patient records under controlled covariate shift, and the
//! line-delimited JSON dataset format.
//!
//! Each patient carries binary latent concepts of two kinds. Invariant concepts drive the
//! labels through a fixed rule shared by both domains; covariate concepts only change how
//! often their codes show up, and their prevalence differs between the source and target
//! domains in proportion to `shift_strength`. Every concept owns a disjoint block of
//! `codes_per_concept` consecutive code indices; codes past the last block are background
//! codes emitted at a constant rate in both domains.

mod generate;
mod jsonl;

pub use generate::{
    code_frequencies, generate, generate_domain, label_marginal_gap, total_variation, DomainData,
    Generator, LabelRule, LatentPatient,
};
pub use jsonl::{load_jsonl, parse_record_line, save_jsonl};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}:{line}: {detail}")]
    Malformed {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("invalid record: {0}")]
    Record(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Source (0) or target (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn indicator(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_indicator(d: u8) -> Option<Domain> {
        match d {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One patient: visits of code sets, a multi-hot label, and a domain indicator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub visits: Vec<Vec<u32>>,
    pub label: Vec<u8>,
    pub domain: u8,
}

impl PatientRecord {
    pub fn validate(&self, n_codes: usize, n_labels: Option<usize>) -> Result<(), String> {
        if self.visits.is_empty() {
            return Err("record has no visits".into());
        }
        for (t, visit) in self.visits.iter().enumerate() {
            if visit.is_empty() {
                return Err(format!("visit {t} is empty"));
            }
            if let Some(&c) = visit.iter().find(|&&c| c as usize >= n_codes) {
                return Err(format!(
                    "code index {c} in visit {t} is outside the vocabulary of {n_codes} codes"
                ));
            }
        }
        if let Some(o) = n_labels {
            if self.label.len() != o {
                return Err(format!("label has length {} but {o} labels are expected", self.label.len()));
            }
        }
        if self.label.iter().any(|&y| y > 1) {
            return Err("label entries must be 0 or 1".into());
        }
        if self.domain > 1 {
            return Err(format!("domain indicator {} is not 0 or 1", self.domain));
        }
        Ok(())
    }

    /// Copy with every occurrence of `code` removed; visits that become empty are dropped.
    pub fn without_code(&self, code: u32) -> PatientRecord {
        let visits = self
            .visits
            .iter()
            .map(|v| v.iter().copied().filter(|&c| c != code).collect::<Vec<_>>())
            .filter(|v| !v.is_empty())
            .collect();
        PatientRecord {
            visits,
            label: self.label.clone(),
            domain: self.domain,
        }
    }

    pub fn contains_code(&self, code: u32) -> bool {
        self.visits.iter().any(|v| v.contains(&code))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Count of records per domain indicator: `[source, target]`.
    pub fn composition(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for r in &self.records {
            c[(r.domain as usize).min(1)] += 1;
        }
        c
    }

    pub fn n_labels(&self) -> Option<usize> {
        self.records.first().map(|r| r.label.len())
    }
}

/// Generator settings. All constants beyond the vocabulary and concept counts are
/// artifact choices; see the README for their rationale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_codes: usize,
    pub n_invariant_concepts: usize,
    pub n_covariate_concepts: usize,
    pub codes_per_concept: usize,
    pub shift_strength: f64,
    pub visits_per_patient: (usize, usize),
    pub codes_per_visit: (usize, usize),
    pub n_labels: usize,
    pub label_noise: f64,
    pub seed: u64,
    /// Patients generated per domain before the 70/10/20 split.
    pub n_patients: usize,
    pub invariant_prevalence: f64,
    /// Source prevalence of the covariate concepts that become more common in the target.
    pub covariate_low: f64,
    /// Magnitude of the prevalence offset at `shift_strength = 1`.
    pub covariate_offset: f64,
    /// Probability that an emitted code is a background code.
    pub background_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_codes: 200,
            n_invariant_concepts: 4,
            n_covariate_concepts: 4,
            codes_per_concept: 20,
            shift_strength: 0.8,
            visits_per_patient: (2, 6),
            codes_per_visit: (2, 6),
            n_labels: 8,
            label_noise: 0.05,
            seed: 0,
            n_patients: 3000,
            invariant_prevalence: 0.4,
            covariate_low: 0.0,
            covariate_offset: 1.0,
            background_rate: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn n_concepts(&self) -> usize {
        self.n_invariant_concepts + self.n_covariate_concepts
    }

    pub fn concept_codes(&self) -> usize {
        self.n_concepts() * self.codes_per_concept
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_invariant_concepts < 1 {
            return err("n_invariant_concepts must be at least 1".into());
        }
        if self.codes_per_concept < 1 {
            return err("codes_per_concept must be at least 1".into());
        }
        if self.n_codes < self.concept_codes() {
            return err(format!(
                "n_codes = {} is smaller than the {} codes needed by {} concept blocks of {}",
                self.n_codes,
                self.concept_codes(),
                self.n_concepts(),
                self.codes_per_concept
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return err(format!("shift_strength = {} is outside [0, 1]", self.shift_strength));
        }
        let (vmin, vmax) = self.visits_per_patient;
        if vmin < 1 || vmin > vmax {
            return err(format!("visits_per_patient range ({vmin}, {vmax}) is invalid"));
        }
        let (cmin, cmax) = self.codes_per_visit;
        if cmin < 1 || cmin > cmax {
            return err(format!("codes_per_visit range ({cmin}, {cmax}) is invalid"));
        }
        if self.n_labels < 1 {
            return err("n_labels must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return err(format!("label_noise = {} is outside [0, 0.5)", self.label_noise));
        }
        for (name, p) in [
            ("invariant_prevalence", self.invariant_prevalence),
            ("covariate_low", self.covariate_low),
            ("covariate_offset", self.covariate_offset),
            ("background_rate", self.background_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.background_rate > 0.0 && self.n_codes == self.concept_codes() {
            return err("background_rate > 0 requires background codes beyond the concept blocks".into());
        }
        if self.n_patients < 10 {
            return err("n_patients must be at least 10".into());
        }
        Ok(())
    }

    /// First code index of a concept's block. Invariant concepts come first.
    pub fn block_start(&self, concept: usize) -> u32 {
        (concept * self.codes_per_concept) as u32
    }

    /// Activation probability of covariate concept `j` in the given domain.
    ///
    /// Even-indexed concepts start rare and become common in the target; odd-indexed
    /// concepts do the opposite.
    pub fn covariate_prevalence(&self, j: usize, domain: Domain) -> f64 {
        let (base, sign) = if j % 2 == 0 {
            (self.covariate_low, 1.0)
        } else {
            (1.0 - self.covariate_low, -1.0)
        };
        match domain {
            Domain::Source => base,
            Domain::Target => {
                (base + self.shift_strength * sign * self.covariate_offset).clamp(0.0, 1.0)
            }
        }
    }

    /// The input code standing for output label `j`: the `(j / n_inv)`-th code of the
    /// block of invariant concept `j mod n_inv`, wrapping inside the block.
    pub fn label_codes(&self) -> Vec<u32> {
        let k = self.n_invariant_concepts;
        (0..self.n_labels)
            .map(|j| self.block_start(j % k) + ((j / k) % self.codes_per_concept) as u32)
            .collect()
    }
}
