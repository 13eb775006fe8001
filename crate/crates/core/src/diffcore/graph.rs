use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    RowSum(NodeId),
    L1Norm(NodeId),
    SqNorm(NodeId),
    QuadForm(NodeId, NodeId),
    Inner(NodeId, NodeId),
    Concat(Vec<NodeId>),
    StopGradient,
    PairwiseSqDist(NodeId),
    SoftmaxXent(NodeId, Vec<usize>),
}

struct NodeData {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

/// A reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so every node's parents precede it and a
/// reverse sweep over the node list is a valid topological order for backpropagation.
/// A graph is built for one forward/backward pass and then dropped.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    /// Values substituted for successive `stop_gradient` outputs, if set.
    replay: Option<Vec<Tensor>>,
    replay_pos: usize,
    /// Smallest breakpoint distance reported by callers through [`Graph::note_breakpoint`].
    noted_margin: Option<f64>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    if t.ndim() != 2 {
        return Err(DiffError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.rows(), t.cols()))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, or `None` if backpropagation never reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of the node, zeros if it was never reached.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, node, ng))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, node: Op) -> NodeId {
        let out = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(out, node, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient; zero divisors are a domain error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.value(b).data().iter().any(|&x| x == 0.0) {
            return Err(DiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`m` row vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vb = self.value(bias);
        let (n, m) = require_matrix("add_row", va)?;
        if vb.len() != m || vb.ndim() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = va.data().to_vec();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[a, bias]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddRow(a, bias), ng))
    }

    /// Multiplies row `i` of an `n x m` matrix by entry `i` of a length-`n` vector.
    pub fn scale_rows(&mut self, a: NodeId, factors: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vf = self.value(factors);
        let (n, m) = require_matrix("scale_rows", va)?;
        if vf.len() != n || vf.ndim() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "scale_rows",
                left: va.shape().to_vec(),
                right: vf.shape().to_vec(),
            });
        }
        let mut out = va.data().to_vec();
        for (i, &f) in vf.data().iter().enumerate() {
            out[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= f);
        }
        let ng = self.needs(&[a, factors]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::ScaleRows(a, factors), ng))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = require_matrix("matmul", va)?;
        let (k2, n) = require_matrix("matmul", vb)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(va.data(), m, k, false, vb.data(), k, n, false, &mut out, false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transposed();
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Records a nonsmooth choice made outside the graph's own operations, such as a
    /// data-dependent selection, that flips when some input moves by `margin`.
    pub fn note_breakpoint(&mut self, margin: f64) {
        self.noted_margin = Some(self.noted_margin.map_or(margin, |m| m.min(margin)));
    }

    /// Smallest distance from any differentiable ReLU or clamp input to its breakpoint,
    /// including noted breakpoints. Finite differences with a reach below this margin
    /// never straddle a kink. Exact zeros are skipped: they only arise from inputs that
    /// are structurally zero.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = self.noted_margin.unwrap_or(f64::INFINITY);
        for node in &self.nodes {
            let (input, points) = match node.op {
                Op::Relu(a) => (a, [0.0, 0.0]),
                Op::Clamp(a, lo, hi) => (a, [lo, hi]),
                _ => continue,
            };
            if !self.nodes[input.0].needs_grad {
                continue;
            }
            for &x in self.nodes[input.0].value.data() {
                for p in points {
                    let d = (x - p).abs();
                    if d > 0.0 {
                        margin = margin.min(d);
                    }
                }
            }
        }
        margin
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural log; nonpositive inputs are a domain error.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(DiffError::Domain {
                op: "ln",
                detail: format!("nonpositive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever clamping was active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(DiffError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    /// Column means of an `n x m` matrix, as a length-`m` vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let (n, m) = require_matrix("mean_rows", v)?;
        if n == 0 {
            return Err(DiffError::Domain {
                op: "mean_rows",
                detail: "no rows".into(),
            });
        }
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= n as f64);
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), ng))
    }

    /// Row sums of an `n x m` matrix, as a length-`n` vector.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let (n, _) = require_matrix("row_sum", v)?;
        let out = (0..n).map(|i| v.row(i).iter().sum()).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::RowSum(a), ng))
    }

    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::L1Norm(a), ng)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sq_norm();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SqNorm(a), ng)
    }

    /// `aᵀ M a` for a vector `a` of length `d` (any shape) and a `d x d` matrix `M`.
    pub fn quad_form(&mut self, a: NodeId, m: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let vm = self.value(m);
        let d = va.len();
        if vm.shape() != [d, d] {
            return Err(DiffError::ShapeMismatch {
                op: "quad_form",
                left: va.shape().to_vec(),
                right: vm.shape().to_vec(),
            });
        }
        let mut s = 0.0;
        for i in 0..d {
            let row = &vm.data()[i * d..(i + 1) * d];
            let mi: f64 = row.iter().zip(va.data()).map(|(x, y)| x * y).sum();
            s += va.data()[i] * mi;
        }
        let ng = self.needs(&[a, m]);
        Ok(self.push(Tensor::scalar(s), Op::QuadForm(a, m), ng))
    }

    /// Full contraction `Σ a_i b_i` of two equally shaped tensors.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        same_shape("inner", self.value(a), self.value(b))?;
        let s = self.value(a).dot(self.value(b));
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Inner(a, b), ng))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = parts.first().ok_or(DiffError::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let head = self.value(*first).shape().to_vec();
        if head.is_empty() {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                left: head,
                right: vec![],
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != head.len() || v.shape()[1..] != head[1..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: head.clone(),
                    right: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = head;
        shape[0] = lead;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Same value as `a`; backpropagation does not pass through it.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = match &self.replay {
            Some(values) if self.replay_pos < values.len() => {
                let v = values[self.replay_pos].clone();
                self.replay_pos += 1;
                v
            }
            _ => self.value(a).clone(),
        };
        self.push(v, Op::StopGradient, false)
    }

    /// Makes the `k`-th subsequent `stop_gradient` output `values[k]` instead of its
    /// input, so a perturbed forward pass can hold stopped quantities fixed.
    pub fn replay_stopped(&mut self, values: Vec<Tensor>) {
        self.replay = Some(values);
        self.replay_pos = 0;
    }

    /// Outputs of every `stop_gradient` node in creation order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    /// `D[i, j] = ‖x_i − x_j‖²` for the rows of an `n x d` matrix.
    pub fn pairwise_sq_dist(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let (n, _) = require_matrix("pairwise_sq_dist", v)?;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = v
                    .row(i)
                    .iter()
                    .zip(v.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(n, n, out), Op::PairwiseSqDist(x), ng))
    }

    /// Mean softmax cross-entropy of `n x k` logits against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, DiffError> {
        let v = self.value(logits);
        let (n, k) = require_matrix("softmax_cross_entropy", v)?;
        if targets.len() != n || n == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(DiffError::Domain {
                op: "softmax_cross_entropy",
                detail: format!("target class {t} out of range for {k} classes"),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxXent(logits, targets.to_vec()),
            ng,
        ))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss { shape });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, &Tensor::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g);
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, id: NodeId, g: Tensor) {
        let node = &mut self.nodes[id.0];
        if node.needs_grad {
            accumulate(&mut node.grad, &g);
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.send(a, g.clone());
                self.send(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(a, g.clone());
                self.send(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = zip_map(g, self.value(b), |g, y| g * y);
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let gb = zip_map(g, self.value(a), |g, x| g * x);
                    self.send(b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    let ga = zip_map(g, self.value(b), |g, y| g / y);
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let out = &self.nodes[idx].value;
                    let gb = zip3_map(g, out, self.value(b), |g, q, y| -g * q / y);
                    self.send(b, gb);
                }
            }
            Op::AddRow(a, bias) => {
                self.send(a, g.clone());
                if self.wants(bias) {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for i in 0..g.rows() {
                        for (o, x) in gb.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.send(bias, Tensor::vector(gb));
                }
            }
            Op::ScaleRows(a, f) => {
                let (n, m) = (g.rows(), g.cols());
                if self.wants(a) {
                    let fv = self.value(f).data();
                    let mut ga = g.data().to_vec();
                    for i in 0..n {
                        ga[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= fv[i]);
                    }
                    self.send(a, Tensor::matrix(n, m, ga));
                }
                if self.wants(f) {
                    let va = self.value(a);
                    let gf = (0..n)
                        .map(|i| g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.send(f, Tensor::vector(gf));
                }
            }
            Op::Scale(a, k) => self.send(a, g.map(|x| k * x)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                let ga = Tensor::new(shape, g.data().to_vec()).expect("same element count");
                self.send(a, ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(g.data(), m, n, false, self.value(b).data(), k, n, true, &mut ga, false);
                    self.send(a, Tensor::matrix(m, k, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(self.value(a).data(), m, k, true, g.data(), m, n, false, &mut gb, false);
                    self.send(b, Tensor::matrix(k, n, gb));
                }
            }
            Op::Transpose(a) => self.send(a, g.transposed()),
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.send(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, &self.nodes[idx].value, |g, y| g * y * (1.0 - y));
                self.send(a, ga);
            }
            Op::Ln(a) => {
                let ga = zip_map(g, self.value(a), |g, x| g / x);
                self.send(a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, &self.nodes[idx].value, |g, y| g * y);
                self.send(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = zip_map(g, self.value(a), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                self.send(a, ga);
            }
            Op::Sum(a) => {
                let gs = g.item();
                let ga = self.value(a).map(|_| gs);
                self.send(a, ga);
            }
            Op::Mean(a) => {
                let gs = g.item() / self.value(a).len() as f64;
                let ga = self.value(a).map(|_| gs);
                self.send(a, ga);
            }
            Op::MeanRows(a) => {
                let (n, m) = (self.value(a).rows(), self.value(a).cols());
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for (o, x) in ga[i * m..(i + 1) * m].iter_mut().zip(g.data()) {
                        *o = x / n as f64;
                    }
                }
                self.send(a, Tensor::matrix(n, m, ga));
            }
            Op::RowSum(a) => {
                let (n, m) = (self.value(a).rows(), self.value(a).cols());
                let mut ga = vec![0.0; n * m];
                for (i, gi) in g.data().iter().enumerate() {
                    ga[i * m..(i + 1) * m].iter_mut().for_each(|x| *x = *gi);
                }
                self.send(a, Tensor::matrix(n, m, ga));
            }
            Op::L1Norm(a) => {
                let gs = g.item();
                let ga = self.value(a).map(|x| {
                    if x > 0.0 {
                        gs
                    } else if x < 0.0 {
                        -gs
                    } else {
                        0.0
                    }
                });
                self.send(a, ga);
            }
            Op::SqNorm(a) => {
                let gs = g.item();
                let ga = self.value(a).map(|x| 2.0 * gs * x);
                self.send(a, ga);
            }
            Op::QuadForm(a, mm) => {
                let gs = g.item();
                let va = self.value(a).clone();
                let vm = self.value(mm);
                let d = va.len();
                if self.wants(a) {
                    // (M + Mᵀ) a
                    let mut ga = vec![0.0; d];
                    for i in 0..d {
                        for j in 0..d {
                            let mij = vm.data()[i * d + j];
                            ga[i] += mij * va.data()[j];
                            ga[j] += mij * va.data()[i];
                        }
                    }
                    ga.iter_mut().for_each(|x| *x *= gs);
                    let ga = Tensor::new(va.shape().to_vec(), ga).expect("shape");
                    self.send(a, ga);
                }
                if self.wants(mm) {
                    let mut gm = vec![0.0; d * d];
                    for i in 0..d {
                        for j in 0..d {
                            gm[i * d + j] = gs * va.data()[i] * va.data()[j];
                        }
                    }
                    self.send(mm, Tensor::matrix(d, d, gm));
                }
            }
            Op::Inner(a, b) => {
                let gs = g.item();
                if self.wants(a) {
                    let ga = self.value(b).map(|x| gs * x);
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let gb = self.value(a).map(|x| gs * x);
                    self.send(b, gb);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let v = self.value(p);
                    let n = v.len();
                    if self.wants(p) {
                        let gp = Tensor::new(v.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                            .expect("shape");
                        self.send(p, gp);
                    }
                    offset += n;
                }
            }
            Op::PairwiseSqDist(x) => {
                let vx = self.value(x);
                let (n, d) = (vx.rows(), vx.cols());
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g.data()[i * n + j] + g.data()[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let (ri, rj) = (vx.row(i), vx.row(j));
                        for t in 0..d {
                            gx[i * d + t] += w * (ri[t] - rj[t]);
                        }
                    }
                }
                self.send(x, Tensor::matrix(n, d, gx));
            }
            Op::SoftmaxXent(l, targets) => {
                let vl = self.value(l);
                let (n, k) = (vl.rows(), vl.cols());
                let scale = g.item() / n as f64;
                let mut gl = vec![0.0; n * k];
                for (i, &t) in targets.iter().enumerate() {
                    let row = vl.row(i);
                    let lse = log_sum_exp(row);
                    for c in 0..k {
                        let p = (row[c] - lse).exp();
                        gl[i * k + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.send(l, Tensor::matrix(n, k, gl));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(existing) => existing.axpy(1.0, g),
        None => *slot = Some(g.clone()),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("zip_map shape")
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(c.shape().to_vec(), data).expect("zip3_map shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
