//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores its
//! value, and records enough to push gradients back to its inputs. Leaves are
//! copied in with [`Graph::leaf`]; after [`Graph::backward`] their gradients
//! are read with [`Graph::grad`] or added into the source tensor with
//! [`Graph::accumulate_into`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// rhs shape is a suffix of lhs shape; rhs repeats over leading axes.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    MaskMul(Var, Vec<f64>),
    Square(Var),
    Gelu(Var),
    Softmax(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(Var),
    /// out[i] = in[index[i]]
    Gather(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Bce { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Exact standard-normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Probability clamp used by the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies `t` onto the tape. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, needs)
    }

    /// Adds a constant (never differentiated) tensor.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.data(b);
        let nb = bd.len();
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies by a constant mask of the same shape (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaskMul(a, mask), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x * x).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    /// `x·Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x * normal_cdf(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or(TensorError::Invalid {
            op: "softmax",
            detail: "needs at least one axis".into(),
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                detail: "last axis is empty".into(),
            });
        }
        let x = self.data(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - m).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Batched `[g×m×k]·[g×k×n]`, or `[g×m×k]·[g×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &ad[gi * m * k..(gi + 1) * m * k];
            let bb = &bd[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                for i in 0..m {
                    let ar = &ab[i * k..(i + 1) * k];
                    for j in 0..n {
                        let br = &bb[j * k..(j + 1) * k];
                        ob[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    }
                }
            } else {
                matmul_into(ab, bb, ob, m, k, n);
            }
        }
        let t = Tensor::new(&[g, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    /// Cross-correlation of `x: [B×Cin×N]` with `w: [Cout×Cin×h]`, zero
    /// padding on both ends. Output length `floor((N + 2p − h)/s) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (b, cin, n) = (sx[0], sx[1], sx[2]);
        let (cout, h) = (sw[0], sw[2]);
        let padded = n + 2 * padding;
        if padded < h || h == 0 {
            return Err(TensorError::EmptyOutput {
                op: "conv1d",
                detail: format!("input length {n} + 2·{padding} is shorter than kernel {h}"),
            });
        }
        let n_out = (padded - h) / stride + 1;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; b * cout * n_out];
        for bi in 0..b {
            for o in 0..cout {
                let ob = &mut out[(bi * cout + o) * n_out..(bi * cout + o + 1) * n_out];
                for c in 0..cin {
                    let xr = &xd[(bi * cin + c) * n..(bi * cin + c + 1) * n];
                    let wr = &wd[(o * cin + c) * h..(o * cin + c + 1) * h];
                    for (t, acc) in ob.iter_mut().enumerate() {
                        let start = (t * stride) as isize - padding as isize;
                        let mut s = 0.0;
                        for (k, &wk) in wr.iter().enumerate() {
                            let i = start + k as isize;
                            if i >= 0 && (i as usize) < n {
                                s += wk * xr[i as usize];
                            }
                        }
                        *acc += s;
                    }
                }
            }
        }
        let t = Tensor::new(&[b, cout, n_out], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            ng,
        ))
    }

    /// Zero-mean, unit-variance normalization over the last axis, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                detail: "normalization axis is empty".into(),
            });
        }
        let (out, inv_std) = normalize_rows(self.data(x), n, eps);
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::InstanceNorm { x, inv_std }, ng))
    }

    /// Normalization over the last axis of size `D` followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] || d == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (xhat, inv_std) = normalize_rows(self.data(x), d, eps);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i % d] + bd[i % d])
            .collect();
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.data(a);
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Gather(a, index), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of {nd} axes"),
            });
        }
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; nd];
        for _ in 0..total {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..nd).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(a, &out_shape, index)
    }

    /// Picks `index` along `axis`, dropping the axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::Invalid {
                op: "select",
                detail: format!("axis {axis} index {index} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            idx.extend(base..base + inner);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.gather(a, &out_shape, idx)
    }

    /// Repeats `a` `count` times along a new leading axis.
    pub fn broadcast_leading(&mut self, a: Var, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mut out_shape = vec![count];
        out_shape.extend_from_slice(&shape);
        let idx = (0..count).flat_map(|_| 0..n).collect();
        self.gather(a, &out_shape, idx)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::Invalid {
                op: "concat",
                detail: "nothing to concatenate".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let t = Tensor::new(&shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pd = self.data(p);
        if pd.len() != targets.len() || pd.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: self.shape(p).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = pd.len() as f64;
        let loss = -pd
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let q = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                y * q.ln() + (1.0 - y) * (1.0 - q).ln()
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let nb = gb.len();
                    for (k, gi) in g.iter().enumerate() {
                        gb[k % nb] += gi;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * c;
                }
            }),
            Op::MaskMul(a, mask) => acc(*a, &mut |ga| {
                for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += gi * m;
                }
            }),
            Op::Square(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(ad) {
                        *x += 2.0 * ai * gi;
                    }
                })
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), &xi) in ga.iter_mut().zip(g).zip(ad) {
                        *x += gi * (normal_cdf(xi) + xi * normal_pdf(xi));
                    }
                })
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gi), yi) in gar.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| matmul_nt_acc(g, bd, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(ad, g, gb, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for gi in 0..bt {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            // ga = g · b, b: [n×k]
                            matmul_acc(gg, bb, out, m, n, k);
                        } else {
                            matmul_nt_acc(gg, bb, out, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..bt {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // gb[n×k] = gᵀ · a
                            matmul_tn_acc(gg, ab, out, m, n, k);
                        } else {
                            matmul_tn_acc(ab, gg, out, m, k, n);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, cin, n) = (sx[0], sx[1], sx[2]);
                let (cout, h) = (sw[0], sw[2]);
                let n_out = node.value.shape()[2];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let (stride, padding) = (*stride, *padding);
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for o in 0..cout {
                            let gr = &g[(bi * cout + o) * n_out..(bi * cout + o + 1) * n_out];
                            for c in 0..cin {
                                let wr = &wd[(o * cin + c) * h..(o * cin + c + 1) * h];
                                let gxr = &mut gx[(bi * cin + c) * n..(bi * cin + c + 1) * n];
                                for (t, &gt) in gr.iter().enumerate() {
                                    let start = (t * stride) as isize - padding as isize;
                                    for (k, &wk) in wr.iter().enumerate() {
                                        let i = start + k as isize;
                                        if i >= 0 && (i as usize) < n {
                                            gxr[i as usize] += gt * wk;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for bi in 0..b {
                        for o in 0..cout {
                            let gr = &g[(bi * cout + o) * n_out..(bi * cout + o + 1) * n_out];
                            for c in 0..cin {
                                let xr = &xd[(bi * cin + c) * n..(bi * cin + c + 1) * n];
                                let gwr = &mut gw[(o * cin + c) * h..(o * cin + c + 1) * h];
                                for (t, &gt) in gr.iter().enumerate() {
                                    let start = (t * stride) as isize - padding as isize;
                                    for (k, gwk) in gwr.iter_mut().enumerate() {
                                        let i = start + k as isize;
                                        if i >= 0 && (i as usize) < n {
                                            *gwk += gt * xr[i as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |gx| norm_backward(g, y, inv_std, n, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gd = self.data(*gain);
                acc(*x, &mut |gx| {
                    let gxhat: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * gd[i % d]).collect();
                    norm_backward(&gxhat, xhat, inv_std, d, gx);
                });
                acc(*gain, &mut |gg| {
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * xh;
                    }
                });
                acc(*bias, &mut |gbias| {
                    for (i, gi) in g.iter().enumerate() {
                        gbias[i % d] += gi;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Gather(a, index) => acc(*a, &mut |ga| {
                for (gi, &src) in g.iter().zip(index) {
                    ga[src] += gi;
                }
            }),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * chunk..(o + 1) * chunk],
                                &g[o * row + offset..o * row + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }),
            Op::Bce { p, targets } => {
                let pd = self.data(*p);
                let n = pd.len() as f64;
                acc(*p, &mut |gp| {
                    for ((x, &pi), &y) in gp.iter_mut().zip(pd).zip(targets) {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                            *x += -g[0] * (y / pi - (1.0 - y) / (1.0 - pi)) / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Rows of `n` normalized to zero mean / unit variance with `1/sqrt(var+eps)`.
fn normalize_rows(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (oi, v) in o.iter_mut().zip(row) {
            *oi = (v - mean) * r;
        }
        inv.push(r);
    }
    (out, inv)
}

fn norm_backward(g: &[f64], y: &[f64], inv_std: &[f64], n: usize, gx: &mut [f64]) {
    for (((gr, yr), r), gxr) in g
        .chunks(n)
        .zip(y.chunks(n))
        .zip(inv_std)
        .zip(gx.chunks_mut(n))
    {
        let mg = gr.iter().sum::<f64>() / n as f64;
        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for ((x, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
            *x += r * (gi - mg - yi * mgy);
        }
    }
}

/// out[m×n] = a[m×k]·b[k×n]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// out[m×n] += a[m×k]·b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n]·b[k×n]ᵀ
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ·g[m×n]
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(gr) {
                *o += aip * gv;
            }
        }
    }
}
