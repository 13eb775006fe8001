use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::encoder::{EncoderParams, LabelHeadParams};
use crate::error::{Error, Result};
use crate::orthoinfer::DomainHeadParams;
use crate::rng::{self, Rng};
use crate::saecore::SaeParams;

/// Layer sizes of the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the data section; not a config key.
    #[serde(skip)]
    pub n_codes: usize,
    #[serde(skip)]
    pub n_labels: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Representation size `d`.
    pub repr_dim: usize,
    /// Dictionary size `d_s`.
    pub sae_dim: usize,
    pub domain_hidden: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_codes: 200,
            n_labels: 8,
            embed_dim: 128,
            hidden_dim: 128,
            repr_dim: 128,
            sae_dim: 256,
            domain_hidden: (256, 128),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_codes", self.n_codes),
            ("n_labels", self.n_labels),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("repr_dim", self.repr_dim),
            ("sae_dim", self.sae_dim),
            ("domain_hidden.0", self.domain_hidden.0),
            ("domain_hidden.1", self.domain_hidden.1),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Encoder, label head, dictionary, and domain head parameters in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub label_head: LabelHeadParams,
    pub sae: SaeParams,
    pub domain_head: DomainHeadParams,
}

/// Uniform in `±1/√fan_in`.
pub(crate) fn uniform_init(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config, &mut rng::stream(seed, "init/encoder"));
        let label_head = LabelHeadParams::init(&mut store, &config, &mut rng::stream(seed, "init/label_head"));
        let sae = SaeParams::init(&mut store, &config, &mut rng::stream(seed, "init/sae"));
        let domain_head =
            DomainHeadParams::init(&mut store, &config, &mut rng::stream(seed, "init/domain_head"));
        Ok(Model {
            config,
            store,
            encoder,
            label_head,
            sae,
            domain_head,
        })
    }

    /// Parameters of the encoder and label head.
    pub fn predictor_params(&self) -> Vec<ParamId> {
        let mut v = self.encoder.ids();
        v.extend(self.label_head.ids());
        v
    }

    pub fn value(&self, p: ParamId) -> &Tensor {
        self.store.value(p)
    }
}
