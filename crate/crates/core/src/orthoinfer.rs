//! Regularized metric projection of a representation onto its reconstruction, the
//! residual it leaves behind, and the domain classifier trained on that residual.

use crate::diffcore::{sigmoid, Bound, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::model::{uniform_init, ModelConfig};
use crate::rng::Rng;
use crate::saecore::{m_inner, m_inner_rows, DictionaryMetric};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub alpha: f64,
    pub v_hat: Tensor,
    /// `v − alpha · v_hat`.
    pub z: Tensor,
    pub epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

/// `alpha = ⟨v, v̂⟩_M / (‖v̂‖²_M + ε)`, `z = v − alpha v̂`.
pub fn project(v: &Tensor, v_hat: &Tensor, m: &DictionaryMetric, epsilon: f64) -> Result<ProjectionResult> {
    check_epsilon(epsilon)?;
    let num = m_inner(v, v_hat, m)?;
    let den = m_inner(v_hat, v_hat, m)? + epsilon;
    if !(den > 0.0) {
        return Err(Error::Input(format!(
            "projection denominator {den:e} is not positive; metric is not PSD"
        )));
    }
    let alpha = num / den;
    let z = Tensor::vector(v.data().iter().zip(v_hat.data()).map(|(a, b)| a - alpha * b).collect());
    Ok(ProjectionResult { alpha, v_hat: v_hat.clone(), z, epsilon })
}

/// Measured `⟨z, v̂⟩_M` next to its closed form `⟨v, v̂⟩_M · ε / (‖v̂‖²_M + ε)`.
pub fn orthogonality_deviation(
    v: &Tensor,
    v_hat: &Tensor,
    m: &DictionaryMetric,
    epsilon: f64,
) -> Result<(f64, f64)> {
    let p = project(v, v_hat, m, epsilon)?;
    let measured = m_inner(&p.z, v_hat, m)?;
    let analytic = m_inner(v, v_hat, m)? * epsilon / (m_inner(v_hat, v_hat, m)? + epsilon);
    Ok((measured, analytic))
}

fn m_norm(a: &Tensor, m: &DictionaryMetric) -> Result<f64> {
    Ok(m_inner(a, a, m)?.max(0.0).sqrt())
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::vector(a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
}

/// Both sides of the projection stability bound: the distance between the
/// projections of `v` onto `v̂` and onto `v` itself, and the perturbation
/// `‖v − v̂‖_M` scaled by the bound's constant.
pub fn stability_check(v: &Tensor, v_hat: &Tensor, m: &DictionaryMetric, epsilon: f64) -> Result<(f64, f64)> {
    let onto_hat = project(v, v_hat, m, epsilon)?;
    let onto_self = project(v, v, m, epsilon)?;
    let a = Tensor::vector(onto_hat.v_hat.data().iter().map(|x| onto_hat.alpha * x).collect());
    let b = Tensor::vector(v.data().iter().map(|x| onto_self.alpha * x).collect());
    let lhs = m_norm(&sub(&a, &b), m)?;

    let nv = m_norm(v, m)?;
    let nv2 = nv * nv;
    let nh2 = m_inner(v_hat, v_hat, m)?.max(0.0);
    let sum = Tensor::vector(v.data().iter().zip(v_hat.data()).map(|(x, y)| x + y).collect());
    let c = nv / epsilon.sqrt()
        + nv * (nv / (nh2 + epsilon) + nv2 * m_norm(&sum, m)? / ((nh2 + epsilon) * (nv2 + epsilon)));
    let rhs = c * m_norm(&sub(v, v_hat), m)?;
    Ok((lhs, rhs))
}

/// Batched projection graph output.
pub struct ProjectionNodes {
    /// Length-`n` coefficients.
    pub alpha: NodeId,
    /// `n x d` residuals.
    pub z: NodeId,
}

/// Row-wise projection of `v` onto `v̂` under `m`. With `detach_alpha` the
/// coefficients are treated as constants by backpropagation.
pub fn project_rows(
    g: &mut Graph,
    v: NodeId,
    v_hat: NodeId,
    m: NodeId,
    epsilon: f64,
    detach_alpha: bool,
) -> Result<ProjectionNodes> {
    check_epsilon(epsilon)?;
    let num = m_inner_rows(g, v, v_hat, m)?;
    let den = m_inner_rows(g, v_hat, v_hat, m)?;
    if let Some(bad) = g.value(den).data().iter().find(|&&x| x + epsilon <= 0.0) {
        return Err(Error::Input(format!(
            "projection denominator {:e} is not positive; metric is not PSD",
            bad + epsilon
        )));
    }
    let den = g.add_scalar(den, epsilon);
    let mut alpha = g.div(num, den)?;
    if detach_alpha {
        alpha = g.stop_gradient(alpha);
    }
    let scaled = g.scale_rows(v_hat, alpha)?;
    let z = g.sub(v, scaled)?;
    Ok(ProjectionNodes { alpha, z })
}

#[derive(Clone, Copy, Debug)]
pub struct DomainHeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Two output logits: source, target.
    pub w3: ParamId,
    pub b3: ParamId,
}

impl DomainHeadParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (h1, h2) = cfg.domain_hidden;
        let d = cfg.repr_dim;
        let w1 = store.add("domain_head.w1", uniform_init(rng, &[h1, d], d));
        let b1 = store.add("domain_head.b1", Tensor::zeros(&[h1]));
        let w2 = store.add("domain_head.w2", uniform_init(rng, &[h2, h1], h1));
        let b2 = store.add("domain_head.b2", Tensor::zeros(&[h2]));
        let w3 = store.add("domain_head.w3", uniform_init(rng, &[2, h2], h2));
        let b3 = store.add("domain_head.b3", Tensor::zeros(&[2]));
        DomainHeadParams { w1, b1, w2, b2, w3, b3 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// `n x 2` logits for a batch of residuals.
pub fn domain_logits(g: &mut Graph, bound: &Bound, head: &DomainHeadParams, z: NodeId) -> Result<NodeId> {
    let h = linear(g, z, bound.node(head.w1), bound.node(head.b1))?;
    let h = g.relu(h);
    let h = linear(g, h, bound.node(head.w2), bound.node(head.b2))?;
    let h = g.relu(h);
    linear(g, h, bound.node(head.w3), bound.node(head.b3))
}

/// Mean cross-entropy over the pooled batch, source rows labelled 0 and target rows 1.
pub fn domain_loss(
    g: &mut Graph,
    bound: &Bound,
    head: &DomainHeadParams,
    z_source: NodeId,
    z_target: NodeId,
) -> Result<NodeId> {
    let ns = g.value(z_source).rows();
    let z = g.concat(&[z_source, z_target])?;
    domain_loss_pooled(g, bound, head, z, ns)
}

/// [`domain_loss`] on residuals already stacked as `n_source` source rows followed by
/// target rows.
pub fn domain_loss_pooled(
    g: &mut Graph,
    bound: &Bound,
    head: &DomainHeadParams,
    z: NodeId,
    n_source: usize,
) -> Result<NodeId> {
    let n = g.value(z).rows();
    if n_source == 0 || n_source >= n {
        return Err(Error::Input("domain loss needs nonempty source and target batches".into()));
    }
    let logits = domain_logits(g, bound, head, z)?;
    let targets: Vec<usize> = (0..n).map(|i| usize::from(i >= n_source)).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Target-domain probability for each row of `z` (`n x d`).
pub fn domain_target_prob(store: &ParamStore, head: &DomainHeadParams, z: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let zn = g.constant(z.clone());
    let logits = domain_logits(&mut g, &b, head, zn)?;
    let l = g.value(logits);
    Ok((0..l.rows()).map(|i| sigmoid(l.at(i, 1) - l.at(i, 0))).collect())
}
