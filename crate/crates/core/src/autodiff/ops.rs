//! Forward evaluation of every differentiable operation.

use std::sync::Arc;

use super::tape::{
    dims2, softplus, AxisKind, BinaryKind, Op, ReduceKind, Tape, UnaryKind, Var,
};
use crate::error::{shape_err, Result};
use crate::ssm::zoh_factor;
use crate::tensor::{axis_split, Scalar, Tensor};

impl<T: Scalar> Tape<T> {
    fn record(&mut self, op: Op<T>, parents: &[Var], shape: &[usize], data: Vec<T>) -> Result<Var> {
        let needs_grad = self.any_grad(parents);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, needs_grad))
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err!("{what} expects a matrix, got shape {s:?}"));
        }
        Ok(dims2(s))
    }

    fn check_axis(&self, v: Var, axis: usize, what: &str) -> Result<()> {
        let s = self.shape(v);
        if axis >= s.len() {
            return Err(shape_err!("{what}: axis {axis} out of range for shape {s:?}"));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * brow[j];
                }
            }
        }
        self.record(Op::MatMul { a, b, m, k, n }, &[a, b], &[m, n], out)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if sa == sb || lb == 1 {
            sa
        } else if la == 1 {
            sb
        } else {
            return Err(shape_err!(
                "{kind:?}: incompatible shapes {sa:?} and {sb:?} (only equal or scalar broadcasting)"
            ));
        };
        let av = self.data(a);
        let bv = self.data(b);
        let n = la.max(lb);
        let out = (0..n)
            .map(|i| {
                let x = if la == 1 { av[0] } else { av[i] };
                let y = if lb == 1 { bv[0] } else { bv[i] };
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        self.record(Op::Binary { kind, a, b }, &[a, b], &shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Exp => v.exp(),
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Unary { kind, x }, &[x], &shape, out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Scale { x, c }, &[x], &shape, out)
    }

    fn along(&mut self, kind: AxisKind, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "broadcast")?;
        let shape = self.shape(x).to_vec();
        let (_, extent, inner) = axis_split(&shape, axis);
        if self.value(v).len() != extent {
            return Err(shape_err!(
                "vector of length {} cannot broadcast along axis {axis} of {shape:?}",
                self.value(v).len()
            ));
        }
        let xv = self.data(x);
        let vv = self.data(v);
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let w = vv[(i / inner) % extent];
                match kind {
                    AxisKind::Add => e + w,
                    AxisKind::Mul => e * w,
                }
            })
            .collect();
        self.record(Op::Axis { kind, x, v, axis }, &[x, v], &shape, out)
    }

    /// Adds vector `v` to every slice of `x` along `axis` (bias add).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.along(AxisKind::Add, x, v, axis)
    }

    /// Multiplies every slice of `x` along `axis` by vector `v`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.along(AxisKind::Mul, x, v, axis)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |k: usize| o * extent * inner + k * inner + r;
                let max = (0..extent).map(|k| xv[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..extent {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    s = s + e;
                }
                for k in 0..extent {
                    out[at(k)] = out[at(k)] / s;
                }
            }
        }
        self.record(Op::Softmax { x, axis }, &[x], &shape, out)
    }

    /// Normalises each slice along `axis` to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_axis(x, axis, "layernorm")?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        if self.value(gain).len() != extent || self.value(bias).len() != extent {
            return Err(shape_err!(
                "layernorm gain {:?} / bias {:?} must match axis {axis} of {shape:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = T::of(eps);
        let xv = self.data(x);
        let gv = self.data(gain);
        let bv = self.data(bias);
        let nf = T::of(extent as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |k: usize| o * extent * inner + k * inner + r;
                let mean = (0..extent).map(|k| xv[at(k)]).sum::<T>() / nf;
                let var = (0..extent)
                    .map(|k| {
                        let d = xv[at(k)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[o * inner + r] = inv;
                for k in 0..extent {
                    let i = at(k);
                    xhat[i] = (xv[i] - mean) * inv;
                    out[i] = xhat[i] * gv[k] + bv[k];
                }
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        };
        self.record(op, &[x, gain, bias], &shape, out)
    }

    /// Reduction along `axis`; the axis is removed from the output shape.
    /// The L2 norm of an all-zero slice is 0.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "reduce")?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let vals = (0..extent).map(|k| xv[o * extent * inner + k * inner + r]);
                out[o * inner + r] = match kind {
                    ReduceKind::Sum => vals.sum(),
                    ReduceKind::Mean => vals.sum::<T>() / T::of(extent as f64),
                    ReduceKind::L2Norm => vals.map(|v| v * v).sum::<T>().sqrt(),
                };
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.record(Op::Reduce { kind, x, axis }, &[x], &out_shape, out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.record(Op::ReduceAll { mean: false, x }, &[x], &[], vec![s])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.record(Op::ReduceAll { mean: true, x }, &[x], &[], vec![s])
    }

    /// `x / max(|x|, eps)`; the zero vector maps to itself.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::of(eps);
        let xv = self.data(x);
        let norm = xv.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        let out = xv.iter().map(|&v| v / norm).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::L2Normalize { x, eps }, &[x], &shape, out)
    }

    /// `u.v / (max(|u|, eps) max(|v|, eps))` as a scalar.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return Err(shape_err!(
                "cosine_similarity lengths differ: {:?} vs {:?}",
                self.shape(u),
                self.shape(v)
            ));
        }
        let eps = T::of(eps);
        let uv = self.data(u);
        let vv = self.data(v);
        let dot: T = uv.iter().zip(vv).map(|(&a, &b)| a * b).sum();
        let nu = uv.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
        let nv = vv.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
        self.record(Op::Cosine { u, v, eps }, &[u, v], &[], vec![dot / (nu * nv)])
    }

    /// `out[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", self.shape(x)));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        self.record(Op::Gather { x, index }, &[x], shape, out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "transpose")?;
        let index: Arc<[usize]> = (0..n)
            .flat_map(|j| (0..m).map(move |i| i * n + j))
            .collect();
        self.gather(x, index, &[n, m])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs_grad = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, value, needs_grad))
    }

    /// Flattened concatenation of `parts` into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let out: Vec<T> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        let n = out.len();
        self.record(Op::Concat { parts: parts.to_vec() }, parts, &[n], out)
    }

    /// `-log softmax(logits)[label]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.data(logits);
        if label >= lv.len() {
            return Err(shape_err!(
                "cross_entropy label {label} out of range for {} logits",
                lv.len()
            ));
        }
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = lv.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = lse - lv[label];
        self.record(Op::CrossEntropy { logits, label }, &[logits], &[], vec![loss])
    }

    // ---- state space primitives ------------------------------------------

    /// `decay[t, c, s] = exp(delta[t, c] * a[c, s])`.
    pub fn zoh_decay(&mut self, delta: Var, a: Var) -> Result<Var> {
        let (l, d, n) = self.zoh_dims(delta, a)?;
        let dv = self.data(delta);
        let av = self.data(a);
        let mut out = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for c in 0..d {
                let dt = dv[t * d + c];
                out.extend(av[c * n..(c + 1) * n].iter().map(|&ac| (dt * ac).exp()));
            }
        }
        self.record(Op::ZohDecay { delta, a }, &[delta, a], &[l, d, n], out)
    }

    /// Discretised input `u[t, c, s] = bbar[t, c, s] * x[t, c]` where
    /// `bbar = (exp(delta a) - 1) / (delta a) * delta * b[t, s]` when `exact`,
    /// or the first-order `delta * b[t, s]` otherwise.
    pub fn zoh_input(&mut self, delta: Var, a: Var, b: Var, x: Var, exact: bool) -> Result<Var> {
        let (l, d, n) = self.zoh_dims(delta, a)?;
        if self.shape(b) != [l, n] || self.shape(x) != [l, d] {
            return Err(shape_err!(
                "zoh_input expects b [{l}, {n}] and x [{l}, {d}], got {:?} and {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let dv = self.data(delta);
        let av = self.data(a);
        let bv = self.data(b);
        let xv = self.data(x);
        let mut out = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for c in 0..d {
                let dt = dv[t * d + c];
                let xt = xv[t * d + c];
                for s in 0..n {
                    let psi = if exact {
                        zoh_factor(dt * av[c * n + s]) * dt
                    } else {
                        dt
                    };
                    out.push(psi * bv[t * n + s] * xt);
                }
            }
        }
        let op = Op::ZohInput {
            delta,
            a,
            b,
            x,
            exact,
        };
        self.record(op, &[delta, a, b, x], &[l, d, n], out)
    }

    fn zoh_dims(&self, delta: Var, a: Var) -> Result<(usize, usize, usize)> {
        let (l, d) = self.rank2(delta, "zoh delta")?;
        let (d2, n) = self.rank2(a, "zoh A")?;
        if d != d2 {
            return Err(shape_err!(
                "delta {:?} and A {:?} disagree on channel count",
                self.shape(delta),
                self.shape(a)
            ));
        }
        Ok((l, d, n))
    }

    /// One recurrence step `h_t = decay[t] * h_{t-1} + input[t]` over a
    /// `[D, N]` state. `prev = None` means `h_{t-1} = 0`.
    pub fn scan_step(&mut self, decay: Var, input: Var, prev: Option<Var>, t: usize) -> Result<Var> {
        let s = self.shape(decay).to_vec();
        if s.len() != 3 || self.shape(input) != s.as_slice() || t >= s[0] {
            return Err(shape_err!(
                "scan_step: decay {:?}, input {:?}, step {t}",
                s,
                self.shape(input)
            ));
        }
        let m = s[1] * s[2];
        let off = t * m;
        let dec = &self.data(decay)[off..off + m];
        let inp = &self.data(input)[off..off + m];
        let out = match prev {
            Some(p) => {
                if self.shape(p) != [s[1], s[2]] {
                    return Err(shape_err!("scan_step: previous state shape {:?}", self.shape(p)));
                }
                let pv = self.data(p);
                (0..m).map(|i| dec[i] * pv[i] + inp[i]).collect()
            }
            None => inp.to_vec(),
        };
        let mut parents = vec![decay, input];
        parents.extend(prev);
        self.record(Op::ScanStep { decay, input, prev, t }, &parents, &[s[1], s[2]], out)
    }

    /// `y[t, c] = sum_s states[t][c, s] * c_proj[t, s]`.
    pub fn readout(&mut self, states: &[Var], c: Var) -> Result<Var> {
        let (l, n) = self.rank2(c, "readout C")?;
        if states.len() != l || l == 0 {
            return Err(shape_err!("readout: {} states for {l} steps", states.len()));
        }
        let d = self.shape(states[0])[0];
        let cv = self.data(c);
        let mut out = Vec::with_capacity(l * d);
        for (t, &h) in states.iter().enumerate() {
            if self.shape(h) != [d, n] {
                return Err(shape_err!("readout: state {t} has shape {:?}", self.shape(h)));
            }
            let hv = self.data(h);
            let ct = &cv[t * n..(t + 1) * n];
            for ch in 0..d {
                out.push((0..n).map(|s| hv[ch * n + s] * ct[s]).sum());
            }
        }
        let mut parents = states.to_vec();
        parents.push(c);
        self.record(Op::Readout { states: states.to_vec(), c }, &parents, &[l, d], out)
    }

    /// Affine map on the last axis of a `[rows, in]` matrix: `x w + b`.
    pub fn linear_rows(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_along(y, b, 1),
            None => Ok(y),
        }
    }

    /// Affine map on the leading (channel) axis of `[in, cols]`: `w x + b`.
    pub fn linear_channels(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(w, x)?;
        match b {
            Some(b) => self.add_along(y, b, 0),
            None => Ok(y),
        }
    }
}
