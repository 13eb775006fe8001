//! Tied-weight sparse autoencoder and the metric it induces.
//!
//! With dictionary `W` (`d_s x d`), the code is `s = relu(W v)`, the reconstruction is
//! `v̂ = Wᵀ s`, and `M = WᵀW` defines `⟨a, b⟩_M = aᵀ M b`. No biases.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{uniform_init, ModelConfig};
use crate::rng::Rng;

/// Activations above this count as nonzero when reporting sparsity.
pub const ACTIVE_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct SaeParams {
    /// Dictionary `W`, `sae_dim x repr_dim`, shared by encoder and decoder.
    pub dictionary: ParamId,
}

impl SaeParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let dictionary = store.add(
            "sae.dictionary",
            uniform_init(rng, &[cfg.sae_dim, cfg.repr_dim], cfg.repr_dim),
        );
        SaeParams { dictionary }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.dictionary]
    }
}

/// Which metric the reconstruction error is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricMode {
    /// `M = WᵀW`, differentiated through `W`.
    Dictionary,
    /// `M = WᵀW` with `W` treated as a constant inside the metric.
    FrozenDictionary,
    /// `M = I`.
    Identity,
}

/// Nonnegative code vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode(pub Vec<f64>);

impl SparseCode {
    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&x| x > ACTIVE_THRESHOLD).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryMetric {
    pub matrix: Tensor,
}

impl DictionaryMetric {
    pub fn identity(d: usize) -> Self {
        DictionaryMetric { matrix: Tensor::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `max |M_ij − M_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((self.matrix.at(i, j) - self.matrix.at(j, i)).abs());
            }
        }
        worst
    }

    /// Eigenvalues of the symmetrized matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (self.matrix.at(i, j) + self.matrix.at(j, i)));
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Symmetric within `1e-12` and smallest eigenvalue at least `-1e-8`.
    pub fn check(&self) -> Result<()> {
        let asym = self.asymmetry();
        if asym >= 1e-12 {
            return Err(Error::Input(format!("metric asymmetry {asym:e} exceeds 1e-12")));
        }
        let min = self.min_eigenvalue();
        if min < -1e-8 {
            return Err(Error::Input(format!("metric smallest eigenvalue {min:e} below -1e-8")));
        }
        Ok(())
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Input(format!("{what} has dimension {got}, expected {want}")));
    }
    Ok(())
}

/// `s = relu(W v)`.
pub fn sae_encode(dictionary: &Tensor, v: &Tensor) -> Result<SparseCode> {
    check_dim("sae input", v.len(), dictionary.cols())?;
    Ok(SparseCode(
        (0..dictionary.rows())
            .map(|k| {
                let z: f64 = dictionary.row(k).iter().zip(v.data()).map(|(a, b)| a * b).sum();
                z.max(0.0)
            })
            .collect(),
    ))
}

/// `v̂ = Wᵀ s`.
pub fn sae_decode(dictionary: &Tensor, s: &SparseCode) -> Result<Tensor> {
    check_dim("sparse code", s.len(), dictionary.rows())?;
    let d = dictionary.cols();
    let mut out = vec![0.0; d];
    for (k, &sk) in s.0.iter().enumerate() {
        if sk != 0.0 {
            for (o, w) in out.iter_mut().zip(dictionary.row(k)) {
                *o += sk * w;
            }
        }
    }
    Ok(Tensor::vector(out))
}

/// `M = WᵀW`.
pub fn metric(dictionary: &Tensor) -> DictionaryMetric {
    let (ds, d) = (dictionary.rows(), dictionary.cols());
    let mut m = vec![0.0; d * d];
    for k in 0..ds {
        let row = dictionary.row(k);
        for i in 0..d {
            let wi = row[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..d {
                m[i * d + j] += wi * row[j];
            }
        }
    }
    DictionaryMetric { matrix: Tensor::matrix(d, d, m) }
}

/// `aᵀ M b`.
pub fn m_inner(a: &Tensor, b: &Tensor, m: &DictionaryMetric) -> Result<f64> {
    let d = m.dim();
    check_dim("left operand", a.len(), d)?;
    check_dim("right operand", b.len(), d)?;
    let mut s = 0.0;
    for i in 0..d {
        let mb: f64 = m.matrix.row(i).iter().zip(b.data()).map(|(x, y)| x * y).sum();
        s += a.data()[i] * mb;
    }
    Ok(s)
}

pub fn m_norm_sq(a: &Tensor, m: &DictionaryMetric) -> Result<f64> {
    m_inner(a, a, m)
}

/// `S = relu(V Wᵀ)` for a row batch `V`.
pub fn encode_rows(g: &mut Graph, dictionary: NodeId, v: NodeId) -> Result<NodeId> {
    let wt = g.transpose(dictionary)?;
    let z = g.matmul(v, wt)?;
    Ok(g.relu(z))
}

/// `V̂ = S W`.
pub fn decode_rows(g: &mut Graph, dictionary: NodeId, s: NodeId) -> Result<NodeId> {
    Ok(g.matmul(s, dictionary)?)
}

/// The metric as a graph node under the given mode.
pub fn metric_node(g: &mut Graph, dictionary: NodeId, mode: MetricMode) -> Result<NodeId> {
    match mode {
        MetricMode::Identity => {
            let d = g.value(dictionary).cols();
            Ok(g.constant(Tensor::identity(d)))
        }
        MetricMode::Dictionary | MetricMode::FrozenDictionary => {
            let w = if mode == MetricMode::FrozenDictionary {
                g.stop_gradient(dictionary)
            } else {
                dictionary
            };
            let wt = g.transpose(w)?;
            Ok(g.matmul(wt, w)?)
        }
    }
}

/// Row-wise `⟨a_i, b_i⟩_M` as a length-`n` vector.
pub fn m_inner_rows(g: &mut Graph, a: NodeId, b: NodeId, m: NodeId) -> Result<NodeId> {
    let am = g.matmul(a, m)?;
    let prod = g.mul(am, b)?;
    Ok(g.row_sum(prod)?)
}

/// Batch output of the autoencoder inside a graph.
pub struct SaeForward {
    pub codes: NodeId,
    pub recon: NodeId,
}

pub fn forward_rows(g: &mut Graph, dictionary: NodeId, v: NodeId) -> Result<SaeForward> {
    let codes = encode_rows(g, dictionary, v)?;
    let recon = decode_rows(g, dictionary, codes)?;
    Ok(SaeForward { codes, recon })
}

/// Batch mean of `‖v − v̂‖²_M + γ‖s‖₁` for an existing forward pass and metric node.
pub fn recon_loss_from(g: &mut Graph, v: NodeId, fwd: &SaeForward, m: NodeId, gamma: f64) -> Result<NodeId> {
    let n = g.value(v).rows() as f64;
    let r = g.sub(v, fwd.recon)?;
    let err = m_inner_rows(g, r, r, m)?;
    let err = g.sum(err);
    let l1 = g.l1_norm(fwd.codes);
    let l1 = g.scale(l1, gamma);
    let total = g.add(err, l1)?;
    Ok(g.scale(total, 1.0 / n))
}

/// Batch mean of `‖v − v̂‖²_M + γ‖s‖₁`.
pub fn recon_loss_rows(
    g: &mut Graph,
    dictionary: NodeId,
    v: NodeId,
    gamma: f64,
    mode: MetricMode,
) -> Result<NodeId> {
    let fwd = forward_rows(g, dictionary, v)?;
    let m = metric_node(g, dictionary, mode)?;
    recon_loss_from(g, v, &fwd, m, gamma)
}

/// Reconstruction objective of a single representation, as a graph node.
pub fn recon_loss(
    g: &mut Graph,
    bound: &Bound,
    params: &SaeParams,
    v: NodeId,
    gamma: f64,
    mode: MetricMode,
) -> Result<NodeId> {
    let d = g.value(v).len();
    let row = g.reshape(v, &[1, d])?;
    recon_loss_rows(g, bound.node(params.dictionary), row, gamma, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;
    use crate::rng;
    use rand::Rng as _;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn vec_of(rng: &mut Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn encode_decode_examples() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert_eq!(sae_encode(&w, &Tensor::vector(vec![2.0, 3.0])).unwrap().0, vec![2.0, 0.0]);
        assert_eq!(sae_encode(&w, &Tensor::vector(vec![0.0, 0.0])).unwrap().0, vec![0.0, 0.0]);
        assert_eq!(sae_decode(&w, &SparseCode(vec![0.0, 0.0])).unwrap().data(), &[0.0, 0.0]);
        assert!(sae_encode(&w, &Tensor::vector(vec![1.0])).is_err());
        assert!(sae_decode(&w, &SparseCode(vec![1.0])).is_err());
    }

    #[test]
    fn codes_are_nonnegative() {
        let mut r = rng::stream(1, "test");
        for _ in 0..1000 {
            let w = random(&mut r, 6, 4);
            let v = vec_of(&mut r, 4);
            assert!(sae_encode(&w, &v).unwrap().0.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn orthonormal_rows_reconstruct_span() {
        // Rows e1, e2 of R^3; v in their span with nonnegative coordinates.
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let v = Tensor::vector(vec![0.7, 2.5, 0.0]);
        let s = sae_encode(&w, &v).unwrap();
        assert!(sae_decode(&w, &s).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn decode_matches_naive_loop() {
        let mut r = rng::stream(2, "test");
        let w = random(&mut r, 8, 4);
        let s = SparseCode((0..8).map(|_| r.gen_range(0.0..1.0)).collect());
        let got = sae_decode(&w, &s).unwrap();
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += w.at(k, j) * s.0[k];
            }
            assert!((got.data()[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_identity_and_quadratic_form_oracle() {
        assert_eq!(metric(&Tensor::identity(3)).matrix, Tensor::identity(3));
        let mut r = rng::stream(3, "test");
        for _ in 0..100 {
            let w = random(&mut r, 7, 5);
            let a = vec_of(&mut r, 5);
            let b = vec_of(&mut r, 5);
            let m = metric(&w);
            let wa: f64 = (0..7)
                .map(|k| {
                    let x: f64 = w.row(k).iter().zip(a.data()).map(|(p, q)| p * q).sum();
                    x * x
                })
                .sum();
            assert!((m_norm_sq(&a, &m).unwrap() - wa).abs() < 1e-12);
            assert!((m_inner(&a, &b, &m).unwrap() - m_inner(&b, &a, &m).unwrap()).abs() < 1e-12);
            assert!((m_inner(&a, &b, &DictionaryMetric::identity(5)).unwrap() - a.dot(&b)).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_deficient_dictionary_gives_psd_metric() {
        let mut r = rng::stream(4, "test");
        let mut w = random(&mut r, 3, 6).into_data();
        w.extend(std::iter::repeat(0.0).take(6));
        let m = metric(&Tensor::matrix(4, 6, w));
        assert!(m.asymmetry() < 1e-12);
        assert!(m.min_eigenvalue() >= -1e-8);
        assert!(m.check().is_ok());
    }

    #[test]
    fn null_space_vectors_have_zero_norm() {
        // W = [[1, 1, 0], [0, 0, 1]] has null space spanned by (1, -1, 0).
        let w = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let m = metric(&w);
        let null = Tensor::vector(vec![2.5, -2.5, 0.0]);
        assert!(m_norm_sq(&null, &m).unwrap().abs() < 1e-10);
        let not_null = Tensor::vector(vec![1.0, -1.0, 1e-3]);
        assert!(m_norm_sq(&not_null, &m).unwrap() > 1e-10);
    }

    #[test]
    fn recon_loss_examples() {
        // Perfect reconstruction: W = I, v ≥ 0.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::identity(3));
        let params = SaeParams { dictionary: w };
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.constant(Tensor::vector(vec![0.5, 1.0, 2.0]));
        let l = recon_loss(&mut g, &b, &params, v, 0.0, MetricMode::Dictionary).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        let mut r = rng::stream(5, "test");
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut r, 4, 3));
        let params = SaeParams { dictionary: w };
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.constant(Tensor::zeros(&[3]));
        let l = recon_loss(&mut g, &b, &params, v, 0.3, MetricMode::Dictionary).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn recon_loss_gradient_matches_central_differences() {
        let mut r = rng::stream(6, "test");
        // W is 4x8: d_s = 4 codes over an 8-dimensional representation.
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut r, 4, 8));
        let v = vec_of(&mut r, 8);
        let params = SaeParams { dictionary: w };
        for mode in [MetricMode::Dictionary, MetricMode::FrozenDictionary, MetricMode::Identity] {
            let rep = finite_difference_check(&store, &[w], 1e-5, |g, b| {
                let vn = g.constant(v.clone());
                recon_loss(g, b, &params, vn, 0.01, mode).map_err(Error::into_diff)
            })
            .unwrap();
            assert!(rep.max_relative_error < 1e-4, "{mode:?}: {rep:?}");
        }
    }

    #[test]
    fn batch_metric_matches_plain_metric() {
        let mut r = rng::stream(7, "test");
        let w = random(&mut r, 6, 4);
        let a = random(&mut r, 3, 4);
        let b = random(&mut r, 3, 4);
        let mut g = Graph::new();
        let wn = g.constant(w.clone());
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let m = metric_node(&mut g, wn, MetricMode::Dictionary).unwrap();
        let rows = m_inner_rows(&mut g, an, bn, m).unwrap();
        let plain = metric(&w);
        for i in 0..3 {
            let expect = m_inner(&Tensor::vector(a.row(i).to_vec()), &Tensor::vector(b.row(i).to_vec()), &plain).unwrap();
            assert!((g.value(rows).data()[i] - expect).abs() < 1e-12);
        }
    }
}
