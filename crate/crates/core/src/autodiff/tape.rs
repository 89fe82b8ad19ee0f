//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse recording order and accumulates
//! gradients additively, so fan-out is handled without special cases.

use super::tensor::{axis_split, broadcast_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding mode for [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Pads `(K-1)/2` on the left and the remainder on the right.
    Same,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Cos(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
    },
    AvgPool1d {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    L2Norm(Var),
    CosineSim(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to an external parameter slot, retrievable with
    /// [`Tape::param_grads`].
    pub fn param(&mut self, value: Tensor, slot: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(slot);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(slot, gradient)` for every parameter leaf reached by `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let slot = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((slot, g))
        })
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
        let data = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::ScalarMul(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    /// `max(x, 0)` with zero subgradient at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *xs.first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            let n = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * n * inner..(o + 1) * n * inner];
                let dst = (o * total + offset) * inner;
                data[dst..dst + n * inner].copy_from_slice(src);
            }
            offset += n;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean along `axis`; the axis is kept with length 1 when `keepdim`.
    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += d[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { x, axis }, rg))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| shape_err("l2_norm", &shape, &[]))?;
        let out: Vec<f64> = t
            .data()
            .chunks(last)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out)?,
            Op::L2Norm(x),
            rg,
        ))
    }

    /// Cosine similarity of two equally shaped tensors, flattened. Zero when
    /// either norm is zero.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_sim", ta.shape(), tb.shape()));
        }
        let s = cosine(ta.data(), tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::CosineSim(a, b), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `x·W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 1-D cross-correlation (no kernel flip).
    ///
    /// `x: [C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]`;
    /// `y[o, i] = b[o] + Σ_c Σ_k w[o, c, k] · x[c, i·stride + k − pad_left]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || stride == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d bias", self.shape(b), &[c_out]));
            }
        }
        let (pad_left, padded) = match padding {
            Padding::Valid => (0, len),
            Padding::Same => ((k - 1) / 2, len + k - 1),
        };
        if padded < k {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let out_len = (padded - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            for c in 0..c_in {
                let xrow = &xd[c * len..(c + 1) * len];
                let wrow = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (i, y) in row.iter_mut().enumerate() {
                    let start = (i * stride) as isize - pad_left as isize;
                    let k_lo = (-start).max(0) as usize;
                    let k_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    for kk in k_lo..k_hi {
                        acc += wrow[kk] * xrow[(start + kk as isize) as usize];
                    }
                    *y += acc;
                }
            }
            if let Some(b) = b {
                let bias = self.value(b).data()[o];
                row.iter_mut().for_each(|y| *y += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            rg,
        ))
    }

    fn pool_shape(
        &self,
        op: &'static str,
        x: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || kernel == 0 || stride == 0 || s[1] < kernel {
            return Err(shape_err(op, s, &[kernel, stride]));
        }
        Ok((s[0], s[1], (s[1] - kernel) / stride + 1))
    }

    /// Average pooling over the last axis of `[C, L]`.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, len, out_len) = self.pool_shape("avg_pool1d", x, kernel, stride)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; c * out_len];
        for ch in 0..c {
            for i in 0..out_len {
                let s: f64 = d[ch * len + i * stride..ch * len + i * stride + kernel]
                    .iter()
                    .sum();
                out[ch * out_len + i] = s / kernel as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![c, out_len], out)?,
            Op::AvgPool1d { x, kernel, stride },
            rg,
        ))
    }

    /// Max pooling over the last axis of `[C, L]`; ties go to the first index.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, len, out_len) = self.pool_shape("max_pool1d", x, kernel, stride)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; c * out_len];
        let mut argmax = vec![0; c * out_len];
        for ch in 0..c {
            for i in 0..out_len {
                let base = ch * len + i * stride;
                let mut best = base;
                for j in base..base + kernel {
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out[ch * out_len + i] = d[best];
                argmax[ch * out_len + i] = best;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![c, out_len], out)?,
            Op::MaxPool1d { x, argmax },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [last] || self.shape(bias) != [last] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let d = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(d.len() / last);
        let mut out = vec![0.0; d.len()];
        for (r, row) in d.chunks(last).enumerate() {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[r * last + j] = h;
                out[r * last + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of the scalar `root` with respect to every node
    /// that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Cosine similarity of two slices; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf);
}

fn reduce_into(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    out_shape: &[usize],
    g: &[f64],
    scale: impl Fn(usize) -> f64,
) {
    let in_shape = nodes[v.0].value.shape().to_vec();
    accumulate(nodes, grads, v, |buf| {
        if in_shape == out_shape {
            for (k, (b, gv)) in buf.iter_mut().zip(g).enumerate() {
                *b += gv * scale(k);
            }
        } else {
            let map = broadcast_map(&in_shape, out_shape);
            for (k, &idx) in map.iter().enumerate() {
                buf[idx] += g[k] * scale(k);
            }
        }
    });
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let out_shape = node.value.shape();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            reduce_into(nodes, grads, *a, out_shape, g, |_| 1.0);
            reduce_into(nodes, grads, *b, out_shape, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            reduce_into(nodes, grads, *a, out_shape, g, |_| 1.0);
            reduce_into(nodes, grads, *b, out_shape, g, |_| -1.0);
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let ma = broadcast_map(sa, out_shape);
            let mb = broadcast_map(sb, out_shape);
            let (da, db) = (val(*a), val(*b));
            let ga = |k: usize| {
                if is_div {
                    1.0 / db[mb[k]]
                } else {
                    db[mb[k]]
                }
            };
            let gb = |k: usize| {
                if is_div {
                    -da[ma[k]] / (db[mb[k]] * db[mb[k]])
                } else {
                    da[ma[k]]
                }
            };
            reduce_into(nodes, grads, *a, out_shape, g, ga);
            reduce_into(nodes, grads, *b, out_shape, g, gb);
        }
        Op::Neg(x) => accumulate(nodes, grads, *x, |buf| {
            buf.iter_mut().zip(g).for_each(|(b, gv)| *b -= gv)
        }),
        Op::ScalarMul(x, c) => accumulate(nodes, grads, *x, |buf| {
            buf.iter_mut().zip(g).for_each(|(b, gv)| *b += c * gv)
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |buf| {
            buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv)
        }),
        Op::Exp(x) => {
            let out = node.value.data();
            accumulate(nodes, grads, *x, |buf| {
                for ((b, gv), y) in buf.iter_mut().zip(g).zip(out) {
                    *b += gv * y;
                }
            })
        }
        Op::Cos(x) => {
            let xd = val(*x);
            accumulate(nodes, grads, *x, |buf| {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                    *b -= gv * xv.sin();
                }
            })
        }
        Op::LeakyRelu { x, slope } => {
            let xd = val(*x);
            accumulate(nodes, grads, *x, |buf| {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                    *b += if *xv > 0.0 { *gv } else { slope * gv };
                }
            })
        }
        Op::Clamp { x, lo, hi } => {
            let xd = val(*x);
            accumulate(nodes, grads, *x, |buf| {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                    if *xv >= *lo && *xv <= *hi {
                        *b += gv;
                    }
                }
            })
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let (da, db) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |buf| {
                for r in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += g[r * m + c] * db[p * m + c];
                        }
                        buf[r * k + p] += s;
                    }
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for r in 0..n {
                    for p in 0..k {
                        let av = da[r * k + p];
                        for c in 0..m {
                            buf[p * m + c] += av * g[r * m + c];
                        }
                    }
                }
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (out_shape[1], out_shape[0]);
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            })
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad_left,
        } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (c_in, len) = (sx[0], sx[1]);
            let (c_out, k) = (sw[0], sw[2]);
            let out_len = out_shape[1];
            let (xd, wd) = (val(*x), val(*w));
            let range = |i: usize| {
                let start = (i * stride) as isize - *pad_left as isize;
                let k_lo = (-start).max(0) as usize;
                let k_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
                (start, k_lo, k_hi)
            };
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let wrow = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                        for i in 0..out_len {
                            let gv = g[o * out_len + i];
                            let (start, lo, hi) = range(i);
                            for kk in lo..hi {
                                buf[c * len + (start + kk as isize) as usize] += gv * wrow[kk];
                            }
                        }
                    }
                }
            });
            accumulate(nodes, grads, *w, |buf| {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let xrow = &xd[c * len..(c + 1) * len];
                        let wbuf = &mut buf[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                        for i in 0..out_len {
                            let gv = g[o * out_len + i];
                            let (start, lo, hi) = range(i);
                            for kk in lo..hi {
                                wbuf[kk] += gv * xrow[(start + kk as isize) as usize];
                            }
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |buf| {
                    for o in 0..c_out {
                        buf[o] += g[o * out_len..(o + 1) * out_len].iter().sum::<f64>();
                    }
                });
            }
        }
        Op::AvgPool1d { x, kernel, stride } => {
            let len = nodes[x.0].value.shape()[1];
            let (c, out_len) = (out_shape[0], out_shape[1]);
            accumulate(nodes, grads, *x, |buf| {
                for ch in 0..c {
                    for i in 0..out_len {
                        let gv = g[ch * out_len + i] / *kernel as f64;
                        let base = ch * len + i * stride;
                        buf[base..base + kernel].iter_mut().for_each(|b| *b += gv);
                    }
                }
            })
        }
        Op::MaxPool1d { x, argmax } => accumulate(nodes, grads, *x, |buf| {
            for (gv, &idx) in g.iter().zip(argmax) {
                buf[idx] += gv;
            }
        }),
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out_shape, *axis);
            let y = node.value.data();
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            buf[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let last = *out_shape.last().unwrap();
            let gd = val(*gain);
            accumulate(nodes, grads, *x, |buf| {
                for (r, is) in inv_std.iter().enumerate() {
                    let row = r * last..(r + 1) * last;
                    let gh: Vec<f64> = g[row.clone()].iter().zip(gd).map(|(a, b)| a * b).collect();
                    let mean_gh = gh.iter().sum::<f64>() / last as f64;
                    let mean_ghx = gh
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / last as f64;
                    for (j, b) in buf[row.clone()].iter_mut().enumerate() {
                        *b += is * (gh[j] - mean_gh - xhat[r * last + j] * mean_ghx);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |buf| {
                for (k, gv) in g.iter().enumerate() {
                    buf[k % last] += gv * xhat[k];
                }
            });
            accumulate(nodes, grads, *bias, |buf| {
                for (k, gv) in g.iter().enumerate() {
                    buf[k % last] += gv;
                }
            });
        }
        Op::Mean { x, axis } => {
            let in_shape = nodes[x.0].value.shape();
            let (outer, n, inner) = axis_split(in_shape, *axis);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            buf[(o * n + i) * inner + j] += g[o * inner + j] / n as f64;
                        }
                    }
                }
            })
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |buf| {
            buf.iter_mut().for_each(|b| *b += g[0])
        }),
        Op::Concat { xs, axis } => {
            let total = out_shape[*axis];
            let (outer, _, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for x in xs {
                let n = nodes[x.0].value.shape()[*axis];
                accumulate(nodes, grads, *x, |buf| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (b, gv) in buf[o * n * inner..(o + 1) * n * inner]
                            .iter_mut()
                            .zip(&g[src..src + n * inner])
                        {
                            *b += gv;
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape();
            let (outer, n, inner) = axis_split(in_shape, *axis);
            let len = out_shape[*axis];
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for (b, gv) in buf[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                    {
                        *b += gv;
                    }
                }
            })
        }
        Op::L2Norm(x) => {
            let xd = val(*x);
            let norms = node.value.data();
            let last = xd.len() / norms.len().max(1);
            accumulate(nodes, grads, *x, |buf| {
                for (k, b) in buf.iter_mut().enumerate() {
                    let n = norms[k / last];
                    if n > 0.0 {
                        *b += g[k / last] * xd[k] / n;
                    }
                }
            })
        }
        Op::CosineSim(a, b) => {
            let (da, db) = (val(*a), val(*b));
            let na = da.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = db.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let s = node.value.data()[0];
            let scale = g[0];
            accumulate(nodes, grads, *a, |buf| {
                for (k, bv) in buf.iter_mut().enumerate() {
                    *bv += scale * (db[k] / (na * nb) - s * da[k] / (na * na));
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for (k, bv) in buf.iter_mut().enumerate() {
                    *bv += scale * (da[k] / (na * nb) - s * db[k] / (nb * nb));
                }
            });
        }
    }
}
