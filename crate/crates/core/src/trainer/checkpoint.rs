//! Binary checkpoint: magic, version, a JSON header, then little-endian f64 payloads.
//!
//! Layout:
//! `ORTHOCKP` | u32 version | u64 header length | header JSON | parameter values |
//! first moments | second moments. Tensors appear in header order.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diffcore::{Adam, AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ORTHOCKP";
const VERSION: u32 = 1;

/// Position of the shuffle streams: the next epoch index to be drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub streams: Vec<String>,
    pub next_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub stage: u8,
    pub rng: RngState,
    pub adam: AdamConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub stage: u8,
    pub model: Model,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, epoch: usize, stage: u8, model: Model, optimizer: Adam) -> Self {
        Checkpoint { config, epoch, stage, model, optimizer }
    }

    pub fn header(&self) -> CheckpointHeader {
        let store = &self.model.store;
        CheckpointHeader {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            stage: self.stage,
            rng: RngState {
                seed: self.config.train.seed,
                streams: vec!["shuffle/source".into(), "shuffle/target".into()],
                next_index: self.epoch as u64 + 1,
            },
            adam: self.optimizer.config,
            tensors: store
                .ids()
                .map(|p| TensorEntry {
                    name: store.name(p).to_string(),
                    shape: store.value(p).shape().to_vec(),
                    adam_steps: self.optimizer.steps[p.0],
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let store = &self.model.store;
        let mut out = Vec::with_capacity(24 + header.len() + 24 * store.total_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let sections = [
            store.ids().map(|p| store.value(p)).collect::<Vec<_>>(),
            self.optimizer.first.iter().collect(),
            self.optimizer.second.iter().collect(),
        ];
        for section in sections {
            for t in section {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| bad(format!("malformed checkpoint header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config".into()));
        }

        let mut model = Model::init(header.config.model_config(), header.config.train.seed)?;
        if model.store.len() != header.tensors.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, model expects {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let mut optimizer = Adam::new(header.adam, &model.store);
        let mut cursor = header_end;
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint payload".into()));
            }
            let data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            Ok(Tensor::new(shape.to_vec(), data)?)
        };
        let mut ids = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let p = model
                .store
                .id(&entry.name)
                .map_err(|_| Error::Checkpoint(format!("unknown tensor {:?}", entry.name)))?;
            if model.store.value(p).shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    model.store.value(p).shape()
                )));
            }
            ids.push(p);
        }
        for (entry, &p) in header.tensors.iter().zip(&ids) {
            *model.store.value_mut(p) = read(&entry.shape)?;
        }
        for (entry, &p) in header.tensors.iter().zip(&ids) {
            optimizer.first[p.0] = read(&entry.shape)?;
        }
        for (entry, &p) in header.tensors.iter().zip(&ids) {
            optimizer.second[p.0] = read(&entry.shape)?;
            optimizer.steps[p.0] = entry.adam_steps;
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after payload", bytes.len() - cursor)));
        }
        Ok(Checkpoint { config: header.config, epoch: header.epoch, stage: header.stage, model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
