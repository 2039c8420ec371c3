//! Reverse-mode autodiff on a recorded operation tape, with tangent
//! (forward-over-reverse) propagation for exact Hessian-vector products.
//!
//! The primitive set is exactly what the encoders and the contrastive losses
//! need: affine maps, patch mean-pooling, `tanh`, L2 normalization, dot
//! products, scalar glue (scale/add/sub/sum/stack/index) and a stable
//! log-sum-exp. Every primitive carries value, VJP, JVP and VJP-tangent
//! rules; a primitive without a tangent rule would make [`Tape::hvp`] return
//! [`Error::UnsupportedPrimitive`] instead of a silently wrong curvature.
//!
//! Values are computed eagerly while recording. [`Tape::replay_values`]
//! recomputes the whole forward pass from the recorded ops; for identical
//! leaf values it reproduces every node bit-exactly.

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

/// Norm threshold below which L2 normalization switches to the guard branch
/// (constant denominator, zero gradient).
pub const NORMALIZE_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { marked: bool },
    /// `W·x + b` with `W: [m,n]`, `x: [n]`, `b: [m]`.
    Affine { w: usize, x: usize, b: usize },
    /// Mean over non-overlapping `patch×patch` tiles of a `[h,w]` tensor.
    PatchMean { x: usize, patch: usize },
    Tanh { x: usize },
    /// `x / max(‖x‖₂, NORMALIZE_GUARD)`; guard branch has zero derivatives.
    Normalize { x: usize },
    Dot { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    SumList { xs: Vec<usize> },
    StackScalars { xs: Vec<usize> },
    StackRows { xs: Vec<usize> },
    Index { x: usize, idx: usize },
    LogSumExp { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Affine { .. } => "affine",
            Op::PatchMean { .. } => "patch_mean",
            Op::Tanh { .. } => "tanh",
            Op::Normalize { .. } => "normalize",
            Op::Dot { .. } => "dot",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::SumList { .. } => "sum_list",
            Op::StackScalars { .. } => "stack_scalars",
            Op::StackRows { .. } => "stack_rows",
            Op::Index { .. } => "index",
            Op::LogSumExp { .. } => "log_sum_exp",
        }
    }

    fn supports_tangent(&self) -> bool {
        // The whole primitive set carries tangent rules today; the predicate
        // guards future first-order-only additions.
        true
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

fn patch_mean_forward(x: &Tensor, patch: usize) -> Tensor {
    let (h, w) = x.dims2().expect("checked at record time");
    let (nph, npw) = (h / patch, w / patch);
    let xd = x.data();
    let inv = 1.0 / (patch * patch) as f64;
    let mut out = vec![0.0; nph * npw];
    for pr in 0..nph {
        for pc in 0..npw {
            let mut acc = 0.0;
            for i in 0..patch {
                for j in 0..patch {
                    acc += xd[(pr * patch + i) * w + pc * patch + j];
                }
            }
            out[pr * npw + pc] = acc * inv;
        }
    }
    Tensor::vector(out)
}

/// Gradients of one reverse sweep, indexed by node.
pub struct Gradients {
    adj: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.adj[id.0]
    }
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_marked_input(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { marked: true })
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        value.validate_finite(op.name())?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf whose gradient the caller cares about.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { marked: true }, value)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { marked: false }, value)
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(w).dims2()?;
        if self.value(x).len() != n || self.value(b).len() != m {
            return Err(Error::ShapeMismatch {
                expected: format!("x: [{n}], b: [{m}]"),
                got: format!(
                    "x: {:?}, b: {:?}",
                    self.value(x).shape(),
                    self.value(b).shape()
                ),
                context: "affine".into(),
            });
        }
        let op = Op::Affine {
            w: w.0,
            x: x.0,
            b: b.0,
        };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn patch_mean(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let (h, w) = self.value(x).dims2()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::contract(format!(
                "patch size {patch} must divide image dims {h}x{w}"
            )));
        }
        let op = Op::PatchMean { x: x.0, patch };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let op = Op::Tanh { x: x.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let op = Op::Normalize { x: x.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", self.value(a).len()),
                got: format!("{} elements", self.value(b).len()),
                context: "tape dot".into(),
            });
        }
        let op = Op::Dot { a: a.0, b: b.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::contract(format!("scale factor must be finite, got {c}")));
        }
        let op = Op::Scale { x: x.0, c };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "add")?;
        let op = Op::Add { a: a.0, b: b.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "sub")?;
        let op = Op::Sub { a: a.0, b: b.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn sum_list(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("sum_list needs at least one node"));
        }
        for x in xs {
            self.require_same_shape(xs[0], *x, "sum_list")?;
        }
        let op = Op::SumList {
            xs: xs.iter().map(|n| n.0).collect(),
        };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("stack_scalars needs at least one node"));
        }
        for x in xs {
            if !self.value(*x).is_scalar() {
                return Err(Error::contract("stack_scalars expects scalar nodes"));
            }
        }
        let op = Op::StackScalars {
            xs: xs.iter().map(|n| n.0).collect(),
        };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn stack_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("stack_rows needs at least one node"));
        }
        let d = self.value(xs[0]).len();
        for x in xs {
            let v = self.value(*x);
            if v.shape().len() != 1 || v.len() != d {
                return Err(Error::contract(
                    "stack_rows expects rank-1 nodes of equal length",
                ));
            }
        }
        let op = Op::StackRows {
            xs: xs.iter().map(|n| n.0).collect(),
        };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn index(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        if idx >= self.value(x).len() {
            return Err(Error::contract(format!(
                "index {idx} out of bounds for node of length {}",
                self.value(x).len()
            )));
        }
        let op = Op::Index { x: x.0, idx };
        let value = self.eval(&op);
        self.push(op, value)
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).is_empty() {
            return Err(Error::contract("log_sum_exp of empty vector"));
        }
        let op = Op::LogSumExp { x: x.0 };
        let value = self.eval(&op);
        self.push(op, value)
    }

    fn require_same_shape(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        if self.value(a).same_shape(self.value(b)) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.value(a).shape()),
                got: format!("{:?}", self.value(b).shape()),
                context: context.into(),
            })
        }
    }

    /// Forward evaluation of one op from current node values.
    fn eval(&self, op: &Op) -> Tensor {
        let v = |i: usize| &self.nodes[i].value;
        match *op {
            Op::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
            Op::Affine { w, x, b } => {
                let (m, n) = v(w).dims2().expect("checked at record time");
                let wd = v(w).data();
                let xd = v(x).data();
                let bd = v(b).data();
                let mut out = vec![0.0; m];
                for r in 0..m {
                    let row = &wd[r * n..(r + 1) * n];
                    let mut acc = bd[r];
                    for c in 0..n {
                        acc += row[c] * xd[c];
                    }
                    out[r] = acc;
                }
                Tensor::vector(out)
            }
            Op::PatchMean { x, patch } => patch_mean_forward(v(x), patch),
            Op::Tanh { x } => v(x).map(f64::tanh),
            Op::Normalize { x } => {
                let r = v(x).norm_l2();
                let denom = r.max(NORMALIZE_GUARD);
                v(x).scale(1.0 / denom)
            }
            Op::Dot { a, b } => Tensor::scalar(
                v(a).data()
                    .iter()
                    .zip(v(b).data())
                    .map(|(p, q)| p * q)
                    .sum(),
            ),
            Op::Scale { x, c } => v(x).scale(c),
            Op::Add { a, b } => v(a).add(v(b)).expect("checked at record time"),
            Op::Sub { a, b } => v(a).sub(v(b)).expect("checked at record time"),
            Op::SumList { ref xs } => {
                let mut out = Tensor::zeros_like(v(xs[0]));
                for &x in xs {
                    out.add_scaled_assign(v(x), 1.0).expect("same shape");
                }
                out
            }
            Op::StackScalars { ref xs } => {
                Tensor::vector(xs.iter().map(|&x| v(x).data()[0]).collect())
            }
            Op::StackRows { ref xs } => {
                let d = v(xs[0]).len();
                let mut data = Vec::with_capacity(xs.len() * d);
                for &x in xs {
                    data.extend_from_slice(v(x).data());
                }
                Tensor::matrix(xs.len(), d, data).expect("checked at record time")
            }
            Op::Index { x, idx } => Tensor::scalar(v(x).data()[idx]),
            Op::LogSumExp { x } => {
                let xd = v(x).data();
                let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = xd.iter().map(|&v| (v - m).exp()).sum();
                Tensor::scalar(m + s.ln())
            }
        }
    }

    /// Recomputes every non-leaf value from the recorded ops.
    ///
    /// With unchanged leaf values the result is bit-identical to the values
    /// stored during recording.
    pub fn replay_values(&self) -> Vec<Tensor> {
        let mut replayed = Tape::new();
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                _ => replayed.eval(&node.op),
            };
            replayed.nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        replayed.nodes.into_iter().map(|n| n.value).collect()
    }

    /// Reverse-mode gradients of a scalar output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::contract(format!(
                "backward output must be scalar, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut seed = Tensor::zeros_like(out_val);
        seed.data_mut()[0] = 1.0;
        self.vjp(output, &seed)
    }

    /// Vector-Jacobian product: reverse sweep from `node` seeded with `seed`.
    pub fn vjp(&self, node: NodeId, seed: &Tensor) -> Result<Gradients> {
        if !seed.same_shape(self.value(node)) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.value(node).shape()),
                got: format!("{:?}", seed.shape()),
                context: "vjp seed".into(),
            });
        }
        let mut adj: Vec<Tensor> = self.nodes.iter().map(|n| Tensor::zeros_like(&n.value)).collect();
        adj[node.0] = seed.clone();
        for i in (0..self.nodes.len()).rev() {
            self.scatter_adjoint(i, &mut adj, None)?;
        }
        Ok(Gradients { adj })
    }

    /// Hessian-vector product `(∂²output/∂input²)·direction` via tangent
    /// propagation through the reverse pass. `input` must be a leaf.
    pub fn hvp(&self, output: NodeId, input: NodeId, direction: &Tensor) -> Result<Tensor> {
        if !self.value(output).is_scalar() {
            return Err(Error::contract(format!(
                "hvp output must be scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        if !matches!(self.nodes[input.0].op, Op::Leaf { .. }) {
            return Err(Error::contract("hvp input must be a leaf node"));
        }
        if !direction.same_shape(self.value(input)) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.value(input).shape()),
                got: format!("{:?}", direction.shape()),
                context: "hvp direction".into(),
            });
        }
        for node in &self.nodes {
            if !node.op.supports_tangent() {
                return Err(Error::UnsupportedPrimitive(node.op.name()));
            }
        }

        // Forward tangent sweep.
        let mut tangents: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = match node.op {
                Op::Leaf { .. } => {
                    if i == input.0 {
                        direction.clone()
                    } else {
                        Tensor::zeros_like(&node.value)
                    }
                }
                _ => self.eval_tangent(i, &tangents),
            };
            tangents.push(t);
        }

        // Reverse sweep carrying (adjoint, adjoint-tangent).
        let mut adj: Vec<Tensor> = self.nodes.iter().map(|n| Tensor::zeros_like(&n.value)).collect();
        let mut adj_tan = adj.clone();
        adj[output.0].data_mut()[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            self.scatter_adjoint(i, &mut adj, Some((&tangents, &mut adj_tan)))?;
        }
        Ok(adj_tan.swap_remove(input.0))
    }

    /// JVP of node `i` given the tangents of all earlier nodes.
    fn eval_tangent(&self, i: usize, tangents: &[Tensor]) -> Tensor {
        let v = |j: usize| &self.nodes[j].value;
        let t = |j: usize| &tangents[j];
        let out_value = &self.nodes[i].value;
        match self.nodes[i].op {
            Op::Leaf { .. } => unreachable!("leaf tangents are preset"),
            Op::Affine { w, x, b } => {
                let (m, n) = v(w).dims2().expect("checked at record time");
                let wd = v(w).data();
                let xd = v(x).data();
                let twd = t(w).data();
                let txd = t(x).data();
                let tbd = t(b).data();
                let mut out = vec![0.0; m];
                for r in 0..m {
                    let mut acc = tbd[r];
                    for c in 0..n {
                        acc += twd[r * n + c] * xd[c] + wd[r * n + c] * txd[c];
                    }
                    out[r] = acc;
                }
                Tensor::vector(out)
            }
            // Linear op: the tangent obeys the primal rule.
            Op::PatchMean { x, patch } => patch_mean_forward(t(x), patch),
            Op::Tanh { x } => out_value
                .zip_map(t(x), |yv, tv| (1.0 - yv * yv) * tv)
                .expect("same shape"),
            Op::Normalize { x } => {
                let r = v(x).norm_l2();
                if r <= NORMALIZE_GUARD {
                    return Tensor::zeros_like(v(x));
                }
                let xdt = v(x).dot(t(x)).expect("same shape");
                let mut out = t(x).scale(1.0 / r);
                out.add_scaled_assign(v(x), -xdt / (r * r * r))
                    .expect("same shape");
                out
            }
            Op::Dot { a, b } => Tensor::scalar(
                t(a).dot(v(b)).expect("same shape") + v(a).dot(t(b)).expect("same shape"),
            ),
            Op::Scale { x, c } => t(x).scale(c),
            Op::Add { a, b } => t(a).add(t(b)).expect("same shape"),
            Op::Sub { a, b } => t(a).sub(t(b)).expect("same shape"),
            Op::SumList { ref xs } => {
                let mut out = Tensor::zeros_like(t(xs[0]));
                for &x in xs {
                    out.add_scaled_assign(t(x), 1.0).expect("same shape");
                }
                out
            }
            Op::StackScalars { ref xs } => {
                Tensor::vector(xs.iter().map(|&x| t(x).data()[0]).collect())
            }
            Op::StackRows { ref xs } => {
                let d = t(xs[0]).len();
                let mut data = Vec::with_capacity(xs.len() * d);
                for &x in xs {
                    data.extend_from_slice(t(x).data());
                }
                Tensor::matrix(xs.len(), d, data).expect("checked at record time")
            }
            Op::Index { x, idx } => Tensor::scalar(t(x).data()[idx]),
            Op::LogSumExp { x } => {
                let out = out_value.data()[0];
                let p = v(x).data().iter().map(|&xi| (xi - out).exp());
                Tensor::scalar(p.zip(t(x).data()).map(|(pi, ti)| pi * ti).sum())
            }
        }
    }

    /// Scatters the adjoint (and optionally the adjoint-tangent) of node `i`
    /// into its inputs. Inputs always precede outputs, so `split_at_mut`
    /// separates the read side from the write side.
    fn scatter_adjoint(
        &self,
        i: usize,
        adj: &mut [Tensor],
        tangent_state: Option<(&[Tensor], &mut [Tensor])>,
    ) -> Result<()> {
        let v = |j: usize| &self.nodes[j].value;
        let (adj_lo, adj_hi) = adj.split_at_mut(i);
        let g_out = &adj_hi[0];

        // (tangents, adj_tan split)  — only present for hvp sweeps.
        let mut tan = tangent_state.map(|(tangents, adj_tan)| {
            let (lo, hi) = adj_tan.split_at_mut(i);
            (tangents, lo, hi)
        });

        match self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Affine { w, x, b } => {
                let (m, n) = v(w).dims2()?;
                let wd = v(w).data();
                let xd = v(x).data();
                let go = g_out.data();
                {
                    // gw += outer(g_out, x); gx += Wᵀ g_out; gb += g_out
                    for r in 0..m {
                        let gr = go[r];
                        let gw_row = &mut adj_lo[w].data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            gw_row[c] += gr * xd[c];
                        }
                    }
                    for r in 0..m {
                        let gr = go[r];
                        let w_row = &wd[r * n..(r + 1) * n];
                        let gx = adj_lo[x].data_mut();
                        for c in 0..n {
                            gx[c] += w_row[c] * gr;
                        }
                    }
                    let gb = adj_lo[b].data_mut();
                    for r in 0..m {
                        gb[r] += go[r];
                    }
                }
                if let Some((tangents, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt_out = gt_hi[0].data();
                    let twd = tangents[w].data();
                    let txd = tangents[x].data();
                    for r in 0..m {
                        let gtr = gt_out[r];
                        let gr = go[r];
                        let gtw_row = &mut gt_lo[w].data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            gtw_row[c] += gtr * xd[c] + gr * txd[c];
                        }
                    }
                    for r in 0..m {
                        let gtr = gt_out[r];
                        let gr = go[r];
                        let w_row = &wd[r * n..(r + 1) * n];
                        let tw_row = &twd[r * n..(r + 1) * n];
                        let gtx = gt_lo[x].data_mut();
                        for c in 0..n {
                            gtx[c] += tw_row[c] * gr + w_row[c] * gtr;
                        }
                    }
                    let gtb = gt_lo[b].data_mut();
                    for r in 0..m {
                        gtb[r] += gt_out[r];
                    }
                }
            }
            Op::PatchMean { x, patch } => {
                let (h, w) = v(x).dims2()?;
                let npw = w / patch;
                let inv = 1.0 / (patch * patch) as f64;
                let go = g_out.data();
                {
                    let gx = adj_lo[x].data_mut();
                    for r in 0..h {
                        for c in 0..w {
                            gx[r * w + c] += go[(r / patch) * npw + c / patch] * inv;
                        }
                    }
                }
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gto = gt_hi[0].data();
                    let gtx = gt_lo[x].data_mut();
                    for r in 0..h {
                        for c in 0..w {
                            gtx[r * w + c] += gto[(r / patch) * npw + c / patch] * inv;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                let go = g_out.data();
                {
                    let gx = adj_lo[x].data_mut();
                    for k in 0..y.len() {
                        gx[k] += (1.0 - y[k] * y[k]) * go[k];
                    }
                }
                if let Some((tangents, gt_lo, gt_hi)) = tan.as_mut() {
                    let gto = gt_hi[0].data();
                    let ty = tangents[i].data(); // tangent of the output
                    let gtx = gt_lo[x].data_mut();
                    for k in 0..y.len() {
                        gtx[k] += (1.0 - y[k] * y[k]) * gto[k] - 2.0 * y[k] * ty[k] * go[k];
                    }
                }
            }
            Op::Normalize { x } => {
                let r = v(x).norm_l2();
                if r > NORMALIZE_GUARD {
                    let xd = v(x).data();
                    let go = g_out.data();
                    let r3 = r * r * r;
                    let x_dot_g: f64 = xd.iter().zip(go).map(|(a, b)| a * b).sum();
                    {
                        let gx = adj_lo[x].data_mut();
                        for k in 0..xd.len() {
                            gx[k] += go[k] / r - xd[k] * x_dot_g / r3;
                        }
                    }
                    if let Some((tangents, gt_lo, gt_hi)) = tan.as_mut() {
                        let gto = gt_hi[0].data();
                        let tx = tangents[x].data();
                        let r5 = r3 * r * r;
                        let x_dot_gt: f64 = xd.iter().zip(gto).map(|(a, b)| a * b).sum();
                        let x_dot_t: f64 = xd.iter().zip(tx).map(|(a, b)| a * b).sum();
                        let t_dot_g: f64 = tx.iter().zip(go).map(|(a, b)| a * b).sum();
                        let gtx = gt_lo[x].data_mut();
                        for k in 0..xd.len() {
                            // VJP applied to the adjoint tangent…
                            gtx[k] += gto[k] / r - xd[k] * x_dot_gt / r3;
                            // …plus the curvature of the VJP along tx.
                            gtx[k] += -go[k] * x_dot_t / r3 - tx[k] * x_dot_g / r3
                                - xd[k] * t_dot_g / r3
                                + 3.0 * xd[k] * x_dot_g * x_dot_t / r5;
                        }
                    }
                }
            }
            Op::Dot { a, b } => {
                let g = g_out.data()[0];
                adj_lo[a].add_scaled_assign(v(b), g)?;
                adj_lo[b].add_scaled_assign(v(a), g)?;
                if let Some((tangents, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt = gt_hi[0].data()[0];
                    gt_lo[a].add_scaled_assign(v(b), gt)?;
                    gt_lo[a].add_scaled_assign(&tangents[b], g)?;
                    gt_lo[b].add_scaled_assign(v(a), gt)?;
                    gt_lo[b].add_scaled_assign(&tangents[a], g)?;
                }
            }
            Op::Scale { x, c } => {
                adj_lo[x].add_scaled_assign(g_out, c)?;
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt_out = gt_hi[0].clone();
                    gt_lo[x].add_scaled_assign(&gt_out, c)?;
                }
            }
            Op::Add { a, b } => {
                adj_lo[a].add_scaled_assign(g_out, 1.0)?;
                adj_lo[b].add_scaled_assign(g_out, 1.0)?;
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt_out = gt_hi[0].clone();
                    gt_lo[a].add_scaled_assign(&gt_out, 1.0)?;
                    gt_lo[b].add_scaled_assign(&gt_out, 1.0)?;
                }
            }
            Op::Sub { a, b } => {
                adj_lo[a].add_scaled_assign(g_out, 1.0)?;
                adj_lo[b].add_scaled_assign(g_out, -1.0)?;
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt_out = gt_hi[0].clone();
                    gt_lo[a].add_scaled_assign(&gt_out, 1.0)?;
                    gt_lo[b].add_scaled_assign(&gt_out, -1.0)?;
                }
            }
            Op::SumList { ref xs } => {
                for &x in xs {
                    adj_lo[x].add_scaled_assign(g_out, 1.0)?;
                }
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt_out = gt_hi[0].clone();
                    for &x in xs {
                        gt_lo[x].add_scaled_assign(&gt_out, 1.0)?;
                    }
                }
            }
            Op::StackScalars { ref xs } => {
                let go = g_out.data();
                for (k, &x) in xs.iter().enumerate() {
                    adj_lo[x].data_mut()[0] += go[k];
                }
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gto: Vec<f64> = gt_hi[0].data().to_vec();
                    for (k, &x) in xs.iter().enumerate() {
                        gt_lo[x].data_mut()[0] += gto[k];
                    }
                }
            }
            Op::StackRows { ref xs } => {
                let d = v(xs[0]).len();
                let go = g_out.data();
                for (k, &x) in xs.iter().enumerate() {
                    let gr = &go[k * d..(k + 1) * d];
                    let gx = adj_lo[x].data_mut();
                    for c in 0..d {
                        gx[c] += gr[c];
                    }
                }
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gto: Vec<f64> = gt_hi[0].data().to_vec();
                    for (k, &x) in xs.iter().enumerate() {
                        let gr = &gto[k * d..(k + 1) * d];
                        let gtx = gt_lo[x].data_mut();
                        for c in 0..d {
                            gtx[c] += gr[c];
                        }
                    }
                }
            }
            Op::Index { x, idx } => {
                adj_lo[x].data_mut()[idx] += g_out.data()[0];
                if let Some((_, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt = gt_hi[0].data()[0];
                    gt_lo[x].data_mut()[idx] += gt;
                }
            }
            Op::LogSumExp { x } => {
                let out = self.nodes[i].value.data()[0];
                let xd = v(x).data();
                let g = g_out.data()[0];
                let p: Vec<f64> = xd.iter().map(|&xi| (xi - out).exp()).collect();
                {
                    let gx = adj_lo[x].data_mut();
                    for k in 0..p.len() {
                        gx[k] += g * p[k];
                    }
                }
                if let Some((tangents, gt_lo, gt_hi)) = tan.as_mut() {
                    let gt = gt_hi[0].data()[0];
                    let tx = tangents[x].data();
                    let ts = tangents[i].data()[0]; // tangent of the output
                    let gtx = gt_lo[x].data_mut();
                    for k in 0..p.len() {
                        let p_dot = p[k] * (tx[k] - ts);
                        gtx[k] += gt * p[k] + g * p_dot;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::check::{fd_gradient, max_rel_error};
    use crate::numkit::rng::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0)).unwrap();
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = Σ xᵢ² at (1,2) → (2,4), via dot(x, x)
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tape.dot(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_vector_output() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn hvp_of_half_norm_squared_is_direction() {
        // f(x) = ½‖x‖² → Hessian = I, so H·d = d.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.4, -1.2, 2.0])).unwrap();
        let sq = tape.dot(x, x).unwrap();
        let f = tape.scale(sq, 0.5).unwrap();
        let d = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let h = tape.hvp(f, x, &d).unwrap();
        for (a, b) in h.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hvp_of_bilinear_product() {
        // f(x) = x₁·x₂, H = [[0,1],[1,0]], H·(1,0) = (0,1).
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![5.0, -3.0])).unwrap();
        let x1 = tape.index(x, 0).unwrap();
        let x2 = tape.index(x, 1).unwrap();
        let s1 = tape.stack_scalars(&[x1]).unwrap();
        let s2 = tape.stack_scalars(&[x2]).unwrap();
        let f = tape.dot(s1, s2).unwrap();
        let h = tape.hvp(f, x, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!((h.data()[0] - 0.0).abs() < 1e-14);
        assert!((h.data()[1] - 1.0).abs() < 1e-14);
    }

    /// A small encoder-shaped composite: affine → tanh → normalize → dot.
    fn composite(tape: &mut Tape, x: NodeId, w: &Tensor, b: &Tensor, t: &Tensor) -> NodeId {
        let wn = tape.constant(w.clone()).unwrap();
        let bn = tape.constant(b.clone()).unwrap();
        let a = tape.affine(wn, x, bn).unwrap();
        let h = tape.tanh(a).unwrap();
        let e = tape.normalize(h).unwrap();
        let tn = tape.constant(t.clone()).unwrap();
        let s = tape.dot(e, tn).unwrap();
        let v = tape.stack_scalars(&[s]).unwrap();
        tape.log_sum_exp(v).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences_on_composites() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let n = rng.uniform_range(3, 8);
            let m = rng.uniform_range(3, 6);
            let w = Tensor::matrix(m, n, rand_vec(&mut rng, m * n)).unwrap();
            let b = Tensor::vector(rand_vec(&mut rng, m));
            let t = Tensor::vector(rand_vec(&mut rng, m));
            let x0 = Tensor::vector(rand_vec(&mut rng, n));

            let mut tape = Tape::new();
            let x = tape.input(x0.clone()).unwrap();
            let f = composite(&mut tape, x, &w, &b, &t);
            let analytic = tape.backward(f).unwrap();

            let oracle = fd_gradient(
                |p| {
                    let mut tp = Tape::new();
                    let xn = tp.input(p.clone()).unwrap();
                    let fo = composite(&mut tp, xn, &w, &b, &t);
                    tp.value(fo).scalar_value()
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(analytic.wrt(x), &oracle).unwrap();
            assert!(err <= 1e-5, "gradient mismatch: rel err {err:.3e}");
        }
    }

    #[test]
    fn hvp_matches_finite_differences_of_gradient() {
        let mut rng = Rng::new(4242);
        for _ in 0..100 {
            let n = rng.uniform_range(3, 8);
            let m = rng.uniform_range(3, 6);
            let w = Tensor::matrix(m, n, rand_vec(&mut rng, m * n)).unwrap();
            let b = Tensor::vector(rand_vec(&mut rng, m));
            let t = Tensor::vector(rand_vec(&mut rng, m));
            let x0 = Tensor::vector(rand_vec(&mut rng, n));
            let dir = Tensor::vector(rand_vec(&mut rng, n));

            let mut tape = Tape::new();
            let x = tape.input(x0.clone()).unwrap();
            let f = composite(&mut tape, x, &w, &b, &t);
            let analytic = tape.hvp(f, x, &dir).unwrap();

            // Oracle: (∇f(x+h d) − ∇f(x−h d)) / 2h
            let h = 1e-4;
            let grad_at = |p: &Tensor| {
                let mut tp = Tape::new();
                let xn = tp.input(p.clone()).unwrap();
                let fo = composite(&mut tp, xn, &w, &b, &t);
                tp.backward(fo).unwrap().wrt(xn).clone()
            };
            let mut plus = x0.clone();
            plus.add_scaled_assign(&dir, h).unwrap();
            let mut minus = x0.clone();
            minus.add_scaled_assign(&dir, -h).unwrap();
            let gp = grad_at(&plus);
            let gm = grad_at(&minus);
            let oracle = gp.sub(&gm).unwrap().scale(1.0 / (2.0 * h));

            let err = max_rel_error(&analytic, &oracle).unwrap();
            assert!(err <= 1e-4, "hvp mismatch: rel err {err:.3e}");
        }
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let mut rng = Rng::new(17);
        let w = Tensor::matrix(4, 6, rand_vec(&mut rng, 24)).unwrap();
        let b = Tensor::vector(rand_vec(&mut rng, 4));
        let t = Tensor::vector(rand_vec(&mut rng, 4));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(rand_vec(&mut rng, 6))).unwrap();
        let _ = composite(&mut tape, x, &w, &b, &t);
        let replayed = tape.replay_values();
        for (i, value) in replayed.iter().enumerate() {
            assert_eq!(value, tape.value(NodeId(i)), "node {i} diverged on replay");
        }
    }

    #[test]
    fn normalize_guard_branch_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let e = tape.normalize(x).unwrap();
        let t = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
        let s = tape.dot(e, t).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_of_equal_logits_is_log_k_plus_logit() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.3, 0.3])).unwrap();
        let l = tape.log_sum_exp(x).unwrap();
        let expected = 0.3 + std::f64::consts::LN_2;
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn hvp_rejects_interior_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tape.tanh(x).unwrap();
        let s = tape.dot(y, y).unwrap();
        let d = Tensor::vector(vec![1.0, 0.0]);
        assert!(tape.hvp(s, y, &d).is_err());
    }
}
