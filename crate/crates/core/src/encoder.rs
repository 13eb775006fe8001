//! Patient encoder and multi-label prediction head.
//!
//! A visit is embedded as the sum of its code embeddings, visits are mean-pooled, and a
//! two-layer ReLU MLP maps the pooled vector to the representation `v`. Visit order is
//! not used.

use crate::datagen::PatientRecord;
use crate::diffcore::{sigmoid, Bound, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{uniform_init, ModelConfig};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    /// `n_codes x embed_dim`
    pub embeddings: ParamId,
    /// `hidden_dim x embed_dim`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `repr_dim x hidden_dim`
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let embeddings = store.add(
            "encoder.embeddings",
            uniform_init(rng, &[cfg.n_codes, cfg.embed_dim], cfg.embed_dim),
        );
        let w1 = store.add(
            "encoder.w1",
            uniform_init(rng, &[cfg.hidden_dim, cfg.embed_dim], cfg.embed_dim),
        );
        let b1 = store.add("encoder.b1", Tensor::zeros(&[cfg.hidden_dim]));
        let w2 = store.add(
            "encoder.w2",
            uniform_init(rng, &[cfg.repr_dim, cfg.hidden_dim], cfg.hidden_dim),
        );
        let b2 = store.add("encoder.b2", Tensor::zeros(&[cfg.repr_dim]));
        EncoderParams { embeddings, w1, b1, w2, b2 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.embeddings, self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LabelHeadParams {
    /// `n_labels x repr_dim`
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LabelHeadParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let weight = store.add(
            "label_head.weight",
            uniform_init(rng, &[cfg.n_labels, cfg.repr_dim], cfg.repr_dim),
        );
        let bias = store.add("label_head.bias", Tensor::zeros(&[cfg.n_labels]));
        LabelHeadParams { weight, bias }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Visit-sum, visit-mean pooling weights: entry `(i, c)` is the number of visits of
/// record `i` containing code `c`, divided by its visit count.
pub fn pooling_matrix(records: &[&PatientRecord], n_codes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; records.len() * n_codes];
    for (i, r) in records.iter().enumerate() {
        if r.visits.is_empty() {
            return Err(Error::Input(format!("record {i} has no visits")));
        }
        let w = 1.0 / r.visits.len() as f64;
        for (t, visit) in r.visits.iter().enumerate() {
            if visit.is_empty() {
                return Err(Error::Input(format!("record {i} has an empty visit {t}")));
            }
            for &c in visit {
                let c = c as usize;
                if c >= n_codes {
                    return Err(Error::Input(format!(
                        "record {i} uses code {c} outside the vocabulary of {n_codes}"
                    )));
                }
                data[i * n_codes + c] += w;
            }
        }
    }
    Ok(Tensor::matrix(records.len(), n_codes, data))
}

/// `x Wᵀ + b` for a row batch `x`.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let wt = g.transpose(w)?;
    let xw = g.matmul(x, wt)?;
    Ok(g.add_row(xw, b)?)
}

/// Representations `v` (one row per record).
pub fn encode_batch(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParams,
    records: &[&PatientRecord],
    n_codes: usize,
) -> Result<NodeId> {
    let pool = g.constant(pooling_matrix(records, n_codes)?);
    let pooled = g.matmul(pool, bound.node(params.embeddings))?;
    let h = linear(g, pooled, bound.node(params.w1), bound.node(params.b1))?;
    let h = g.relu(h);
    linear(g, h, bound.node(params.w2), bound.node(params.b2))
}

/// Label logits for a batch of representations.
pub fn label_logits(g: &mut Graph, bound: &Bound, head: &LabelHeadParams, v: NodeId) -> Result<NodeId> {
    let d = g.value(bound.node(head.weight)).cols();
    let vd = g.value(v).shape().last().copied().unwrap_or(0);
    if vd != d {
        return Err(Error::Input(format!(
            "representation has dimension {vd}, label head expects {d}"
        )));
    }
    linear(g, v, bound.node(head.weight), bound.node(head.bias))
}

/// Representation of a single record.
pub fn encode(store: &ParamStore, params: &EncoderParams, record: &PatientRecord) -> Result<Tensor> {
    let n_codes = store.value(params.embeddings).rows();
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let v = encode_batch(&mut g, &b, params, &[record], n_codes)?;
    Ok(g.value(v).row(0).to_vec()).map(Tensor::vector)
}

/// `sigmoid(W v + b)` for a single representation.
pub fn predict(store: &ParamStore, head: &LabelHeadParams, v: &Tensor) -> Result<Tensor> {
    let w = store.value(head.weight);
    let b = store.value(head.bias);
    if v.len() != w.cols() {
        return Err(Error::Input(format!(
            "representation has dimension {}, label head expects {}",
            v.len(),
            w.cols()
        )));
    }
    let out = (0..w.rows())
        .map(|j| sigmoid(w.row(j).iter().zip(v.data()).map(|(a, x)| a * x).sum::<f64>() + b.data()[j]))
        .collect();
    Ok(Tensor::vector(out))
}

/// Encoded representations of many records, in chunks, without gradient tracking.
pub fn encode_all(
    store: &ParamStore,
    params: &EncoderParams,
    records: &[PatientRecord],
) -> Result<Tensor> {
    let n_codes = store.value(params.embeddings).rows();
    let d = store.value(params.w2).rows();
    let mut data = Vec::with_capacity(records.len() * d);
    for chunk in records.chunks(256) {
        let refs: Vec<&PatientRecord> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let v = encode_batch(&mut g, &b, params, &refs, n_codes)?;
        data.extend_from_slice(g.value(v).data());
    }
    Ok(Tensor::matrix(records.len(), d, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn small() -> Model {
        Model::init(
            ModelConfig {
                n_codes: 12,
                n_labels: 3,
                embed_dim: 5,
                hidden_dim: 6,
                repr_dim: 4,
                sae_dim: 8,
                domain_hidden: (6, 5),
            },
            3,
        )
        .unwrap()
    }

    fn record(visits: Vec<Vec<u32>>) -> PatientRecord {
        PatientRecord { visits, label: vec![0, 1, 0], domain: 0 }
    }

    fn mlp(m: &Model, x: &[f64]) -> Vec<f64> {
        let s = &m.store;
        let (w1, b1, w2, b2) = (
            s.value(m.encoder.w1),
            s.value(m.encoder.b1),
            s.value(m.encoder.w2),
            s.value(m.encoder.b2),
        );
        let h: Vec<f64> = (0..w1.rows())
            .map(|j| {
                let z: f64 = w1.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1.data()[j];
                z.max(0.0)
            })
            .collect();
        (0..w2.rows())
            .map(|j| w2.row(j).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b2.data()[j])
            .collect()
    }

    #[test]
    fn singleton_record_is_mlp_of_embedding_row() {
        let m = small();
        let v = encode(&m.store, &m.encoder, &record(vec![vec![7]])).unwrap();
        let expected = mlp(&m, m.store.value(m.encoder.embeddings).row(7));
        for (a, b) in v.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn order_and_duplication_invariance() {
        let m = small();
        let base = encode(&m.store, &m.encoder, &record(vec![vec![1, 4, 9], vec![2]])).unwrap();
        let permuted = encode(&m.store, &m.encoder, &record(vec![vec![9, 1, 4], vec![2]])).unwrap();
        let doubled =
            encode(&m.store, &m.encoder, &record(vec![vec![1, 4, 9], vec![2], vec![1, 4, 9], vec![2]])).unwrap();
        assert!(base.max_abs_diff(&permuted) < 1e-14);
        assert!(base.max_abs_diff(&doubled) < 1e-14);
    }

    #[test]
    fn input_errors() {
        let m = small();
        assert!(encode(&m.store, &m.encoder, &record(vec![])).is_err());
        assert!(encode(&m.store, &m.encoder, &record(vec![vec![]])).is_err());
        assert!(encode(&m.store, &m.encoder, &record(vec![vec![12]])).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut m = small();
        m.store.value_mut(m.label_head.weight).fill(0.0);
        let v = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        let p = predict(&m.store, &m.label_head, &v).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.5));

        m.store.value_mut(m.label_head.bias).fill(30.0);
        let p = predict(&m.store, &m.label_head, &v).unwrap();
        assert!(p.data().iter().all(|&x| x > 1.0 - 1e-12 && x < 1.0));

        let bias = m.store.value_mut(m.label_head.bias).data_mut();
        bias[0] = 0.0;
        bias[1] = 3f64.ln();
        let p = predict(&m.store, &m.label_head, &v).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        assert!(predict(&m.store, &m.label_head, &Tensor::vector(vec![1.0; 3])).is_err());
    }
}
