use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};
use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    SoftmaxRows(Var),
    StandardizeRows { x: Var, inv_std: Vec<T> },
    Conv3d { x: Var, w: Var, b: Var, spec: Conv3dSpec, cols: Vec<T>, in_shape: [usize; 4] },
    MeanPoolHw(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every input
/// of a node has a smaller index, and `backward` sweeps the tape once.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drops all nodes so the graph can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    /// Trainable leaf tagged with its slot in a parameter store.
    pub fn param(&mut self, slot: usize, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true, Some(slot))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), NnError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng, None))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let (m, n) = self.matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng, None))
    }

    /// Adds a length-`n` vector to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (_, n) = self.value(a).as_matrix();
        if self.shape(bias) != [n] {
            return Err(mismatch("add_row", format!("{:?} + row {:?}", self.shape(a), self.shape(bias))));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let ng = self.ng(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), ng, None))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng, None)
    }

    /// Elementwise product with a constant (dropout and attention masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var, NnError> {
        if self.shape(a) != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} * {:?}", self.shape(a), c.shape())));
        }
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(c.data()) {
            *o = *o * m;
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), ng, None))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng, None)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, n) = x.as_matrix();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng, None)
    }

    /// Zero mean, unit variance over the last axis.
    pub fn standardize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let (m, n) = x.as_matrix();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(m);
        let nf = T::of(n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::StandardizeRows { x: a, inv_std }, ng, None)
    }

    /// 3-D convolution of `[C_in, T, H, W]` with `[C_out, C_in, kt, kh, kw]`
    /// kernels and zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Result<Var, NnError> {
        let [cin, t, h, wd] = match self.shape(x) {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(mismatch("conv3d", format!("input must be [C, T, H, W], got {s:?}"))),
        };
        let [cout, cin2, kt, kh, kw] = match self.shape(w) {
            [a, b, c, d, e] => [*a, *b, *c, *d, *e],
            s => return Err(mismatch("conv3d", format!("kernel must be rank 5, got {s:?}"))),
        };
        if cin != cin2 || self.shape(b) != [cout] {
            return Err(mismatch(
                "conv3d",
                format!("input {:?}, kernel {:?}, bias {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let k = [kt, kh, kw];
        let dims = [t, h, wd];
        let mut od = [0usize; 3];
        for i in 0..3 {
            let padded = dims[i] + 2 * spec.pad[i];
            if padded < k[i] || spec.stride[i] == 0 {
                return Err(mismatch("conv3d", format!("kernel {k:?} exceeds padded input {dims:?}")));
            }
            od[i] = (padded - k[i]) / spec.stride[i] + 1;
        }
        let kk = cin * kt * kh * kw;
        let n = od[0] * od[1] * od[2];
        let cols = im2col(self.value(x).data(), [cin, t, h, wd], k, spec, od);
        let mut out = vec![T::zero(); cout * n];
        for (o, &bv) in out.chunks_mut(n).zip(self.value(b).data()) {
            o.fill(bv);
        }
        matmul_acc(self.value(w).data(), &cols, &mut out, cout, kk, n);
        let ng = self.ng(&[x, w, b]);
        let value = Tensor::new(&[cout, od[0], od[1], od[2]], out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                w,
                b,
                spec,
                cols,
                in_shape: [cin, t, h, wd],
            },
            ng,
            None,
        ))
    }

    /// Spatial mean of `[C, T, H, W]`, returned as a `[T, C]` sequence.
    pub fn mean_pool_hw(&mut self, a: Var) -> Result<Var, NnError> {
        let [c, t, h, w] = match self.shape(a) {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(mismatch("mean_pool_hw", format!("expected rank 4, got {s:?}"))),
        };
        let src = self.value(a).data();
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); t * c];
        for ci in 0..c {
            for ti in 0..t {
                let base = (ci * t + ti) * hw;
                out[ti * c + ci] = src[base..base + hw].iter().copied().sum::<T>() * inv;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[t, c], out)?, Op::MeanPoolHw(a), ng, None))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let (_, n) = self.matrix("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != n {
                return Err(mismatch("concat_rows", format!("column counts {n} and {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&[rows, n], data)?, Op::ConcatRows(parts.to_vec()), ng, None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let (m, _) = self.matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != m {
                return Err(mismatch("concat_cols", format!("row counts {m} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&[m, total], data)?, Op::ConcatCols(parts.to_vec()), ng, None))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var, NnError> {
        let (m, n) = self.matrix("select_row", a)?;
        if i >= m {
            return Err(mismatch("select_row", format!("row {i} of {m}")));
        }
        let row = self.value(a).row(i).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[n], row)?, Op::SelectRow(a, i), ng, None))
    }

    /// Negative log-likelihood of `target` under softmax of a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NnError> {
        let n = match self.shape(logits) {
            [n] => *n,
            s => return Err(mismatch("cross_entropy", format!("logits must be a vector, got {s:?}"))),
        };
        if target >= n {
            return Err(mismatch("cross_entropy", format!("target {target} of {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let x = self.value(logits).data();
        let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - x[target];
        softmax_in_place(&mut probs);
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, ng, None))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, None)
    }

    /// Mean of several scalar nodes.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var, NnError> {
        let parts: Vec<Var> = vars.to_vec();
        let mut acc = parts[0];
        for &v in &parts[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, T::one() / T::of(parts.len() as f64)))
    }

    /// Activation pattern of every ReLU on the tape. Two passes with equal
    /// patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Back-propagates from a scalar node. Gradients are kept until the
    /// next `reset` and can be read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves, indexed by store slot. Slots that did
    /// not take part in the pass get zeros of `shapes[slot]`.
    pub fn param_grads(&self, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(slot), Some(Some(g))) = (node.param, self.grads.get(id)) {
                out[slot].add_assign(g);
            }
        }
        out
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) {
        // Temporarily take the op so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let (_, n) = self.value(*b).as_matrix();
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_nt_acc(g.data(), self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(*a, Tensor::new(&[m, k], ga).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn_acc(self.value(*a).data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(*b, Tensor::new(&[k, n], gb).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (n, m) = g.as_matrix();
                let mut out = vec![T::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accumulate(*a, Tensor::new(&[m, n], out).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(*a, g.clone());
                let (_, n) = g.as_matrix();
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(*bias, Tensor::new(&[n], gb).unwrap());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|v| v * s));
            }
            Op::MulConst(a, c) => {
                let mut out = g.clone();
                for (o, &m) in out.data_mut().iter_mut().zip(c.data()) {
                    *o = *o * m;
                }
                self.accumulate(*a, out);
            }
            Op::Relu(a) => {
                let mut out = g.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.accumulate(*a, out);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (_, n) = y.as_matrix();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = orow.iter().zip(yrow).map(|(&d, &v)| d * v).sum();
                    for (o, &v) in orow.iter_mut().zip(yrow) {
                        *o = v * (*o - dot);
                    }
                }
                self.accumulate(*a, out);
            }
            Op::StandardizeRows { x, inv_std } => {
                let y = &self.nodes[id].value;
                let (_, n) = y.as_matrix();
                let nf = T::of(n as f64);
                let mut out = g.clone();
                for ((orow, yrow), &inv) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(inv_std) {
                    let mean_g = orow.iter().copied().sum::<T>() / nf;
                    let mean_gy = orow.iter().zip(yrow).map(|(&d, &v)| d * v).sum::<T>() / nf;
                    for (o, &v) in orow.iter_mut().zip(yrow) {
                        *o = inv * (*o - mean_g - v * mean_gy);
                    }
                }
                self.accumulate(*x, out);
            }
            Op::Conv3d {
                x,
                w,
                b,
                spec,
                cols,
                in_shape,
            } => {
                let ws = self.shape(*w).to_vec();
                let (cout, kk) = (ws[0], ws[1] * ws[2] * ws[3] * ws[4]);
                let n = g.len() / cout;
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<T> = g.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(*b, Tensor::new(&[cout], gb).unwrap());
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![T::zero(); cout * kk];
                    matmul_nt_acc(g.data(), cols, &mut gw, cout, n, kk);
                    self.accumulate(*w, Tensor::new(&ws, gw).unwrap());
                }
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![T::zero(); kk * n];
                    matmul_tn_acc(self.value(*w).data(), g.data(), &mut gcols, cout, kk, n);
                    let os = g.shape();
                    let gx = col2im(&gcols, *in_shape, [ws[2], ws[3], ws[4]], *spec, [os[1], os[2], os[3]]);
                    self.accumulate(*x, Tensor::new(in_shape, gx).unwrap());
                }
            }
            Op::MeanPoolHw(a) => {
                let s = self.shape(*a).to_vec();
                let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
                let inv = T::one() / T::of(hw as f64);
                let mut out = vec![T::zero(); c * t * hw];
                for ci in 0..c {
                    for ti in 0..t {
                        let v = g.data()[ti * c + ci] * inv;
                        out[(ci * t + ti) * hw..(ci * t + ti + 1) * hw].fill(v);
                    }
                }
                self.accumulate(*a, Tensor::new(&s, out).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    let len = s[0] * s[1];
                    let part = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(p, Tensor::new(&s, part).unwrap());
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.as_matrix();
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut part = Vec::with_capacity(m * c);
                    for i in 0..m {
                        part.extend_from_slice(&g.data()[i * total + start..i * total + start + c]);
                    }
                    start += c;
                    self.accumulate(p, Tensor::new(&[m, c], part).unwrap());
                }
            }
            Op::SelectRow(a, i) => {
                let s = self.shape(*a).to_vec();
                let mut out = vec![T::zero(); s[0] * s[1]];
                out[i * s[1]..(i + 1) * s[1]].copy_from_slice(g.data());
                self.accumulate(*a, Tensor::new(&s, out).unwrap());
            }
            Op::CrossEntropy { logits, target, probs } => {
                let scale = g.item();
                let mut out = probs.clone();
                out[*target] = out[*target] - T::one();
                let n = out.len();
                let out: Vec<T> = out.into_iter().map(|v| v * scale).collect();
                self.accumulate(*logits, Tensor::new(&[n], out).unwrap());
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::full(&s, g.item()));
            }
        }
        self.nodes[id].op = op;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Unfolds input patches into a `[C*kt*kh*kw, To*Ho*Wo]` matrix.
fn im2col<T: Scalar>(x: &[T], shape: [usize; 4], k: [usize; 3], spec: Conv3dSpec, od: [usize; 3]) -> Vec<T> {
    let [c, t, h, w] = shape;
    let n = od[0] * od[1] * od[2];
    let mut cols = vec![T::zero(); c * k[0] * k[1] * k[2] * n];
    let mut row = 0;
    for ci in 0..c {
        for dt in 0..k[0] {
            for dy in 0..k[1] {
                for dx in 0..k[2] {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    row += 1;
                    let mut j = 0;
                    for ot in 0..od[0] {
                        let it = (ot * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                        if it < 0 || it >= t as isize {
                            j += od[1] * od[2];
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * spec.stride[1] + dy) as isize - spec.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                j += od[2];
                                continue;
                            }
                            let base = ((ci * t + it as usize) * h + iy as usize) * w;
                            for ox in 0..od[2] {
                                let ix = (ox * spec.stride[2] + dx) as isize - spec.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[j] = x[base + ix as usize];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], shape: [usize; 4], k: [usize; 3], spec: Conv3dSpec, od: [usize; 3]) -> Vec<T> {
    let [c, t, h, w] = shape;
    let n = od[0] * od[1] * od[2];
    let mut x = vec![T::zero(); c * t * h * w];
    let mut row = 0;
    for ci in 0..c {
        for dt in 0..k[0] {
            for dy in 0..k[1] {
                for dx in 0..k[2] {
                    let src = &cols[row * n..(row + 1) * n];
                    row += 1;
                    let mut j = 0;
                    for ot in 0..od[0] {
                        let it = (ot * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                        if it < 0 || it >= t as isize {
                            j += od[1] * od[2];
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * spec.stride[1] + dy) as isize - spec.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                j += od[2];
                                continue;
                            }
                            let base = ((ci * t + it as usize) * h + iy as usize) * w;
                            for ox in 0..od[2] {
                                let ix = (ox * spec.stride[2] + dx) as isize - spec.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[base + ix as usize] = x[base + ix as usize] + src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
