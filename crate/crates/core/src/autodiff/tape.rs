use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::ssm::{zoh_factor, zoh_factor_deriv};
use crate::tensor::{axis_split, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Relu,
    Softplus,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AxisKind {
    Add,
    Mul,
}

/// Reductions along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L2Norm,
}

pub(crate) enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Axis {
        kind: AxisKind,
        x: Var,
        v: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: usize,
    },
    ReduceAll {
        mean: bool,
        x: Var,
    },
    L2Normalize {
        x: Var,
        eps: T,
    },
    Cosine {
        u: Var,
        v: Var,
        eps: T,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    ZohDecay {
        delta: Var,
        a: Var,
    },
    ZohInput {
        delta: Var,
        a: Var,
        b: Var,
        x: Var,
        exact: bool,
    },
    ScanStep {
        decay: Var,
        input: Var,
        prev: Option<Var>,
        t: usize,
    },
    Readout {
        states: Vec<Var>,
        c: Var,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Relu => "relu",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Abs => "abs",
            },
            Op::Scale { .. } => "scale",
            Op::Axis { kind, .. } => match kind {
                AxisKind::Add => "add_along",
                AxisKind::Mul => "mul_along",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reduce { .. } | Op::ReduceAll { .. } => "reduce",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Cosine { .. } => "cosine",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ZohDecay { .. } => "zoh_decay",
            Op::ZohInput { .. } => "zoh_input",
            Op::ScanStep { .. } => "scan_step",
            Op::Readout { .. } => "readout",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) needs_grad: bool,
}

/// Reverse-mode differentiation record.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order and the reverse pass simply walks the vector backwards.
/// A tape is single-threaded; build one per forward evaluation.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input. Gradients are reported for leaves.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Corrupt the backward rule of one op kind by scaling its upstream
    /// gradient. Used to confirm the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut buf = GradBuf {
            slots: (0..=loss.0).map(|_| None).collect(),
            nodes: &self.nodes,
        };
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.needs_grad {
            buf.slots[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = buf.slots[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            if self.fault == Some(node.op.name()) {
                let k = T::of(1.5);
                g.iter_mut().for_each(|x| *x = *x * k);
            }
            self.backprop_node(node, &g, &mut buf);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], buf: &mut GradBuf<'_, T>) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.data(*a);
                let bv = self.data(*b);
                if let Some(da) = buf.slot(*a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + grow[j] * brow[j];
                            }
                            da[i * k + p] = da[i * k + p] + s;
                        }
                    }
                }
                if let Some(db) = buf.slot(*b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] = drow[j] + aip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
                let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
                let a_scalar = av.len() == 1 && g.len() > 1;
                let b_scalar = bv.len() == 1 && g.len() > 1;
                if let Some(da) = buf.slot(*a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bt(i),
                        };
                        let j = if a_scalar { 0 } else { i };
                        da[j] = da[j] + d;
                    }
                }
                if let Some(db) = buf.slot(*b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * at(i),
                        };
                        let j = if b_scalar { 0 } else { i };
                        db[j] = db[j] + d;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.data(*x);
                if let Some(dx) = buf.slot(*x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Exp => g[i] * y[i],
                            UnaryKind::Relu => {
                                if xv[i] > T::zero() {
                                    g[i]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Softplus => g[i] * sigmoid(xv[i]),
                            UnaryKind::Abs => {
                                if xv[i] > T::zero() {
                                    g[i]
                                } else if xv[i] < T::zero() {
                                    -g[i]
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        dx[i] = dx[i] + d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = buf.slot(*x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * *c;
                    }
                }
            }
            Op::Axis { kind, x, v, axis } => {
                let (_, extent, inner) = axis_split(&node.value.shape().to_vec(), *axis);
                let xv = self.data(*x);
                let vv = self.data(*v);
                if let Some(dx) = buf.slot(*x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            AxisKind::Add => g[i],
                            AxisKind::Mul => g[i] * vv[(i / inner) % extent],
                        };
                        dx[i] = dx[i] + d;
                    }
                }
                if let Some(dv) = buf.slot(*v) {
                    for i in 0..g.len() {
                        let j = (i / inner) % extent;
                        let d = match kind {
                            AxisKind::Add => g[i],
                            AxisKind::Mul => g[i] * xv[i],
                        };
                        dv[j] = dv[j] + d;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, extent, inner) = axis_split(node.value.shape(), *axis);
                if let Some(dx) = buf.slot(*x) {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |k: usize| o * extent * inner + k * inner + r;
                            let mut s = T::zero();
                            for k in 0..extent {
                                s = s + g[at(k)] * y[at(k)];
                            }
                            for k in 0..extent {
                                let i = at(k);
                                dx[i] = dx[i] + y[i] * (g[i] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, extent, inner) = axis_split(node.value.shape(), *axis);
                let gv = self.data(*gain);
                let nf = T::of(extent as f64);
                if let Some(dgain) = buf.slot(*gain) {
                    for i in 0..g.len() {
                        let k = (i / inner) % extent;
                        dgain[k] = dgain[k] + g[i] * xhat[i];
                    }
                }
                if let Some(dbias) = buf.slot(*bias) {
                    for i in 0..g.len() {
                        let k = (i / inner) % extent;
                        dbias[k] = dbias[k] + g[i];
                    }
                }
                if let Some(dx) = buf.slot(*x) {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |k: usize| o * extent * inner + k * inner + r;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for k in 0..extent {
                                let dh = g[at(k)] * gv[k];
                                s1 = s1 + dh;
                                s2 = s2 + dh * xhat[at(k)];
                            }
                            let inv = inv_std[o * inner + r];
                            for k in 0..extent {
                                let i = at(k);
                                let dh = g[i] * gv[k];
                                dx[i] = dx[i] + inv / nf * (nf * dh - s1 - xhat[i] * s2);
                            }
                        }
                    }
                }
            }
            Op::Reduce { kind, x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, extent, inner) = axis_split(&xs, *axis);
                let xv = self.data(*x);
                if let Some(dx) = buf.slot(*x) {
                    let nf = T::of(extent as f64);
                    for o in 0..outer {
                        for k in 0..extent {
                            for r in 0..inner {
                                let i = o * extent * inner + k * inner + r;
                                let gi = g[o * inner + r];
                                let d = match kind {
                                    ReduceKind::Sum => gi,
                                    ReduceKind::Mean => gi / nf,
                                    ReduceKind::L2Norm => {
                                        let norm = y[o * inner + r];
                                        if norm > T::zero() {
                                            gi * xv[i] / norm
                                        } else {
                                            T::zero()
                                        }
                                    }
                                };
                                dx[i] = dx[i] + d;
                            }
                        }
                    }
                }
            }
            Op::ReduceAll { mean, x } => {
                if let Some(dx) = buf.slot(*x) {
                    let d = if *mean {
                        g[0] / T::of(dx.len() as f64)
                    } else {
                        g[0]
                    };
                    dx.iter_mut().for_each(|v| *v = *v + d);
                }
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.data(*x);
                if let Some(dx) = buf.slot(*x) {
                    let norm = xv.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > *eps {
                        let dot: T = (0..g.len()).map(|i| g[i] * y[i]).sum();
                        for i in 0..g.len() {
                            dx[i] = dx[i] + (g[i] - y[i] * dot) / norm;
                        }
                    } else {
                        for i in 0..g.len() {
                            dx[i] = dx[i] + g[i] / *eps;
                        }
                    }
                }
            }
            Op::Cosine { u, v, eps } => {
                let uv = self.data(*u);
                let vv = self.data(*v);
                let nu_raw = uv.iter().map(|&a| a * a).sum::<T>().sqrt();
                let nv_raw = vv.iter().map(|&a| a * a).sum::<T>().sqrt();
                let nu = nu_raw.max(*eps);
                let nv = nv_raw.max(*eps);
                let s = y[0];
                let g0 = g[0];
                if let Some(du) = buf.slot(*u) {
                    for i in 0..du.len() {
                        let mut d = vv[i] / (nu * nv);
                        if nu_raw > *eps {
                            d = d - s * uv[i] / (nu * nu);
                        }
                        du[i] = du[i] + g0 * d;
                    }
                }
                if let Some(dv) = buf.slot(*v) {
                    for i in 0..dv.len() {
                        let mut d = uv[i] / (nu * nv);
                        if nv_raw > *eps {
                            d = d - s * vv[i] / (nv * nv);
                        }
                        dv[i] = dv[i] + g0 * d;
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = buf.slot(*x) {
                    for (i, &src) in index.iter().enumerate() {
                        dx[src] = dx[src] + g[i];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = buf.slot(*x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(dp) = buf.slot(*p) {
                        for i in 0..n {
                            dp[i] = dp[i] + g[offset + i];
                        }
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy { logits, label } => {
                let lv = self.data(*logits);
                if let Some(dl) = buf.slot(*logits) {
                    let probs = softmax_vec(lv);
                    for i in 0..dl.len() {
                        let onehot = if i == *label { T::one() } else { T::zero() };
                        dl[i] = dl[i] + g[0] * (probs[i] - onehot);
                    }
                }
            }
            Op::ZohDecay { delta, a } => {
                let (l, d) = dims2(self.shape(*delta));
                let n = self.shape(*a)[1];
                let dv = self.data(*delta);
                let av = self.data(*a);
                if let Some(dd) = buf.slot(*delta) {
                    for t in 0..l {
                        for c in 0..d {
                            let mut s = T::zero();
                            for s_ in 0..n {
                                let i = (t * d + c) * n + s_;
                                s = s + g[i] * y[i] * av[c * n + s_];
                            }
                            dd[t * d + c] = dd[t * d + c] + s;
                        }
                    }
                }
                if let Some(da) = buf.slot(*a) {
                    for t in 0..l {
                        for c in 0..d {
                            for s_ in 0..n {
                                let i = (t * d + c) * n + s_;
                                da[c * n + s_] = da[c * n + s_] + g[i] * y[i] * dv[t * d + c];
                            }
                        }
                    }
                }
            }
            Op::ZohInput {
                delta,
                a,
                b,
                x,
                exact,
            } => {
                let (l, d) = dims2(self.shape(*delta));
                let n = self.shape(*a)[1];
                let dv = self.data(*delta);
                let av = self.data(*a);
                let bv = self.data(*b);
                let xv = self.data(*x);
                let mut gd = vec![T::zero(); l * d];
                let mut ga = vec![T::zero(); d * n];
                let mut gb = vec![T::zero(); l * n];
                let mut gx = vec![T::zero(); l * d];
                for t in 0..l {
                    for c in 0..d {
                        let dt = dv[t * d + c];
                        let xt = xv[t * d + c];
                        for s_ in 0..n {
                            let i = (t * d + c) * n + s_;
                            let gi = g[i];
                            let ac = av[c * n + s_];
                            let bt = bv[t * n + s_];
                            // u = psi(dt, ac) * bt * xt with psi = phi(dt*ac) * dt
                            let (psi, dpsi_dd, dpsi_da) = if *exact {
                                let z = dt * ac;
                                let phi = zoh_factor(z);
                                let dphi = zoh_factor_deriv(z);
                                (phi * dt, dphi * ac * dt + phi, dphi * dt * dt)
                            } else {
                                (dt, T::one(), T::zero())
                            };
                            let bx = bt * xt;
                            gd[t * d + c] = gd[t * d + c] + gi * dpsi_dd * bx;
                            ga[c * n + s_] = ga[c * n + s_] + gi * dpsi_da * bx;
                            gb[t * n + s_] = gb[t * n + s_] + gi * psi * xt;
                            gx[t * d + c] = gx[t * d + c] + gi * psi * bt;
                        }
                    }
                }
                for (var, grad) in [(*delta, gd), (*a, ga), (*b, gb), (*x, gx)] {
                    if let Some(slot) = buf.slot(var) {
                        for i in 0..slot.len() {
                            slot[i] = slot[i] + grad[i];
                        }
                    }
                }
            }
            Op::ScanStep {
                decay,
                input,
                prev,
                t,
            } => {
                let m = g.len();
                let off = t * m;
                let dec = self.data(*decay);
                if let Some(dinp) = buf.slot(*input) {
                    for i in 0..m {
                        dinp[off + i] = dinp[off + i] + g[i];
                    }
                }
                if let Some(p) = prev {
                    let pv = self.data(*p);
                    if let Some(ddec) = buf.slot(*decay) {
                        for i in 0..m {
                            ddec[off + i] = ddec[off + i] + g[i] * pv[i];
                        }
                    }
                    if let Some(dp) = buf.slot(*p) {
                        for i in 0..m {
                            dp[i] = dp[i] + g[i] * dec[off + i];
                        }
                    }
                }
            }
            Op::Readout { states, c } => {
                let (l, n) = dims2(self.shape(*c));
                let d = g.len() / l;
                let cv = self.data(*c);
                for (t, h) in states.iter().enumerate() {
                    if let Some(dh) = buf.slot(*h) {
                        for ch in 0..d {
                            let gt = g[t * d + ch];
                            for s in 0..n {
                                dh[ch * n + s] = dh[ch * n + s] + gt * cv[t * n + s];
                            }
                        }
                    }
                }
                if let Some(dc) = buf.slot(*c) {
                    for (t, h) in states.iter().enumerate() {
                        let hv = self.data(*h);
                        for ch in 0..d {
                            let gt = g[t * d + ch];
                            for s in 0..n {
                                dc[t * n + s] = dc[t * n + s] + gt * hv[ch * n + s];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct GradBuf<'a, T> {
    slots: Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Scalar> GradBuf<'_, T> {
    /// Accumulation buffer for `v`, or `None` when `v` is not differentiable.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; leaves the loss does not reach get zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
