use std::collections::HashMap;

use super::kernels::{col2im, gemm, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::{shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, eps: T },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Narrow { x: Var, start: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool2(Var),
    Sum(Var),
    Mean(Var),
    BceLogits { x: Var, target: Vec<T> },
    Sinusoid { x: Var, num_freqs: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Values stay on the tape until it is dropped; [`Tape::backward`] borrows the
/// tape immutably so it can be called more than once on different losses.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let th = T::one() - T::of(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `shape.permute(perm)`, the flat index of its source.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&r, rest)) => (r, rest.iter().product()),
        None => (1, 1),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters are recorded as constants; nothing requires grad.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Record a parameter once per tape; later calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if self.track_params {
            self.push(value, Op::Param, true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.numel() != n || ta.rank() == 0 {
            return Err(shape_err(op, format!("{:?} with row {:?}", ta.shape(), tb.shape())));
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, mk(a, b), ng))
    }

    /// `a + b` with `b` broadcast along every row of `a`'s last dimension.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow)
    }

    /// `a * b` with `b` broadcast along every row of `a`'s last dimension.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Scale(a, s), ng))
    }

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() == 0 || ta.last_dim() != tb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let k = ta.last_dim();
        let n = tb.shape()[1];
        let m = ta.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Batched matmul: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || shape_err("bmm", format!("{:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, cb);
            } else {
                gemm(m, k, n, ab, bb, cb);
            }
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(shape_err("softmax", "scalar input"));
        }
        let n = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Normalize each row of the last dimension to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(shape_err("layer_norm", "scalar input"));
        }
        let n = tx.last_dim();
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(n as f64);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::LayerNorm { x, eps }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, op, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", format!("{:?} vs leading {:?}", s, lead)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Concatenate along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.shape(*first).get(1..).map(|s| s.to_vec()).unwrap_or_default();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {:?}", s, tail)));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.rank()];
        if perm.len() != tx.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{:?} by {perm:?}", tx.shape())));
        }
        let map = permute_map(tx.shape(), perm);
        let data = map.iter().map(|&i| tx.data()[i]).collect();
        let shape = perm.iter().map(|&p| tx.shape()[p]).collect();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    /// Select rows (first-dimension slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, width) = row_split(tx.shape());
        if tx.rank() == 0 {
            return Err(shape_err("gather_rows", "scalar input"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&tx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if tx.rank() == 0 || start + len > n {
            return Err(shape_err("narrow", format!("{:?} [{start}, {})", tx.shape(), start + len)));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Narrow { x, start }, ng))
    }

    /// 2D convolution over NHWC input `[B,H,W,Cin]` with weights
    /// `[kh, kw, Cin, Cout]` (zero padding).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let bad = || shape_err("conv2d", format!("input {:?}, weight {:?}, stride {stride}, pad {pad}", tx.shape(), tw.shape()));
        if tx.rank() != 4 || tw.rank() != 4 || stride == 0 {
            return Err(bad());
        }
        let (b, h, wd, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (kh, kw, wcin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wcin != cin || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad());
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
        let mut out = vec![T::zero(); b * oh * ow * cout];
        let img_len = h * wd * cin;
        for (i, ob) in out.chunks_mut(oh * ow * cout).enumerate() {
            let img = &tx.data()[i * img_len..(i + 1) * img_len];
            if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                gemm(oh * ow, patch, cout, img, tw.data(), ob);
            } else {
                let cols = im2col(&geom, img);
                gemm(oh * ow, patch, cout, &cols, tw.data(), ob);
            }
        }
        let t = Tensor::new(vec![b, oh, ow, cout], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// 2x2 average pooling with stride 2 over NHWC input.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || !tx.shape()[1].is_multiple_of(2) || !tx.shape()[2].is_multiple_of(2) {
            return Err(shape_err("avg_pool2", format!("{:?} needs even H and W", tx.shape())));
        }
        let (b, h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        let d = tx.data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for x0 in 0..ow {
                    let o = ((bi * oh + y) * ow + x0) * c;
                    let i00 = ((bi * h + 2 * y) * w + 2 * x0) * c;
                    let i01 = i00 + c;
                    let i10 = i00 + w * c;
                    let i11 = i10 + c;
                    for ch in 0..c {
                        out[o + ch] = (d[i00 + ch] + d[i01 + ch] + d[i10 + ch] + d[i11 + ch]) * q;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, oh, ow, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AvgPool2(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let s = tx.data().iter().copied().sum::<T>() / T::of(tx.numel() as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Elementwise binary cross-entropy of logits `x` against constant targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != target.len() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {} targets", tx.shape(), target.len())));
        }
        let data = tx
            .data()
            .iter()
            .zip(target)
            .map(|(&v, &y)| v.max(T::zero()) - v * y + (T::one() + (-v.abs()).exp()).ln())
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::BceLogits { x, target: target.to_vec() }, ng))
    }

    /// Sinusoidal encoding of `[R, 3]` rows into `[R, 6 * num_freqs]`.
    pub fn sinusoid(&mut self, x: Var, num_freqs: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[1] != 3 || num_freqs == 0 {
            return Err(shape_err("sinusoid", format!("{:?} with {num_freqs} frequencies", tx.shape())));
        }
        let rows = tx.shape()[0];
        let width = 6 * num_freqs;
        let mut out = Vec::with_capacity(rows * width);
        for row in tx.data().chunks(3) {
            for &c in row {
                for j in 0..num_freqs {
                    let a = T::of((1u64 << j) as f64 * std::f64::consts::PI) * c;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Sinusoid { x, num_freqs }, ng))
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                _ => self.backward_node(node, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(vb) {
                        *x += y * o;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(va) {
                        *x += y * o;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.nodes[b.0].value.numel();
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        for (x, &y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                self.acc(grads, *a, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((x, &y), &o) in drow.iter_mut().zip(grow).zip(vb) {
                            *x += y * o;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for (arow, grow) in va.chunks(n).zip(g.chunks(n)) {
                        for ((x, &y), &o) in d.iter_mut().zip(grow).zip(arow) {
                            *x += y * o;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let k = ta.last_dim();
                let n = tb.shape()[1];
                let m = ta.numel() / k.max(1);
                self.acc(grads, *a, |d| gemm_nt(m, n, k, g, tb.data(), d));
                self.acc(grads, *b, |d| gemm_tn(k, m, n, ta.data(), g, d));
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                self.acc(grads, *a, |d| {
                    for i in 0..bs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                        let db = &mut d[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // B stored [n,k]: dA = G B
                            gemm(m, n, k, gb, bb, db);
                        } else {
                            gemm_nt(m, n, k, gb, bb, db);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..bs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                        let db = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = G^T A
                            gemm_tn(n, m, k, gb, ab, db);
                        } else {
                            gemm_tn(k, m, n, ab, gb, db);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((dx, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dx += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let xin = val(*x);
                let y = node.value.data();
                let n = node.value.last_dim();
                let inv_n = T::one() / T::of(n as f64);
                self.acc(grads, *x, |d| {
                    for (((drow, xrow), yrow), grow) in
                        d.chunks_mut(n).zip(xin.chunks(n)).zip(y.chunks(n)).zip(g.chunks(n))
                    {
                        let mean = xrow.iter().copied().sum::<T>() * inv_n;
                        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                        let r = T::one() / (var + *eps).sqrt();
                        let mg = grow.iter().copied().sum::<T>() * inv_n;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for ((dx, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += r * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xin = val(*x);
                self.acc(grads, *x, |d| {
                    for ((dx, &gv), &xv) in d.iter_mut().zip(g).zip(xin) {
                        *dx += gv * gelu_parts(xv).1;
                    }
                });
            }
            Op::Relu(x) => {
                let xin = val(*x);
                self.acc(grads, *x, |d| {
                    for ((dx, &gv), &xv) in d.iter_mut().zip(g).zip(xin) {
                        if xv > T::zero() {
                            *dx += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dx, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *dx += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Abs(x) => {
                let xin = val(*x);
                self.acc(grads, *x, |d| {
                    for ((dx, &gv), &xv) in d.iter_mut().zip(g).zip(xin) {
                        if xv > T::zero() {
                            *dx += gv;
                        } else if xv < T::zero() {
                            *dx -= gv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    self.acc(grads, p, |d| {
                        for r in 0..rows {
                            for (x, &y) in d[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *x += y;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.acc(grads, p, |d| {
                        for (x, &y) in d.iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                    });
                    off += n;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
            }
            Op::Permute { x, perm } => {
                let map = permute_map(self.nodes[x.0].value.shape(), perm);
                self.acc(grads, *x, |d| {
                    for (&src, &gv) in map.iter().zip(g) {
                        d[src] += gv;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (_, width) = row_split(self.nodes[x.0].value.shape());
                self.acc(grads, *x, |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, &b) in d[i * width..(i + 1) * width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Narrow { x, start } => {
                let n = self.nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                        for (a, &b) in drow[*start..*start + len].iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let b = tx.shape()[0];
                let cout = tw.shape()[3];
                let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
                let img_len = geom.h * geom.w * geom.cin;
                let out_len = oh * ow * cout;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                if self.nodes[w.0].needs_grad {
                    self.acc(grads, *w, |d| {
                        for i in 0..b {
                            let img = &tx.data()[i * img_len..(i + 1) * img_len];
                            let gb = &g[i * out_len..(i + 1) * out_len];
                            if pointwise {
                                gemm_tn(patch, oh * ow, cout, img, gb, d);
                            } else {
                                let cols = im2col(geom, img);
                                gemm_tn(patch, oh * ow, cout, &cols, gb, d);
                            }
                        }
                    });
                }
                self.acc(grads, *x, |d| {
                    for i in 0..b {
                        let gb = &g[i * out_len..(i + 1) * out_len];
                        let db = &mut d[i * img_len..(i + 1) * img_len];
                        if pointwise {
                            gemm_nt(oh * ow, cout, patch, gb, tw.data(), db);
                        } else {
                            let mut dcols = vec![T::zero(); oh * ow * patch];
                            gemm_nt(oh * ow, cout, patch, gb, tw.data(), &mut dcols);
                            col2im(geom, &dcols, db);
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        for y in 0..oh {
                            for x0 in 0..ow {
                                let o = ((bi * oh + y) * ow + x0) * c;
                                let i00 = ((bi * h + 2 * y) * w + 2 * x0) * c;
                                for base in [i00, i00 + c, i00 + w * c, i00 + w * c + c] {
                                    for ch in 0..c {
                                        d[base + ch] += g[o + ch] * q;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].value.numel() as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::BceLogits { x, target } => {
                let xin = val(*x);
                self.acc(grads, *x, |d| {
                    for (((dx, &gv), &xv), &y) in d.iter_mut().zip(g).zip(xin).zip(target) {
                        *dx += gv * (sigmoid(xv) - y);
                    }
                });
            }
            Op::Sinusoid { x, num_freqs } => {
                let xin = val(*x);
                let y = node.value.data();
                let nf = *num_freqs;
                self.acc(grads, *x, |d| {
                    for (i, dx) in d.iter_mut().enumerate() {
                        let (r, c) = (i / 3, i % 3);
                        let _ = xin;
                        for j in 0..nf {
                            let a = T::of((1u64 << j) as f64 * std::f64::consts::PI);
                            let o = r * 6 * nf + c * 2 * nf + 2 * j;
                            // d sin(a x) = a cos(a x); d cos(a x) = -a sin(a x)
                            *dx += g[o] * a * y[o + 1] - g[o + 1] * a * y[o];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().item() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn conv_average_kernel_on_constant_image() {
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::full(&[1, 4, 4, 1], 2.0));
        let w = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0));
        let y = tape.conv2d(img, w, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 4, 4, 1]);
        // interior pixels see a full window
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!((v.data()[r * 4 + c] - 2.0).abs() < 1e-12);
        }
        // corners see 4 of 9 taps, edges 6 of 9
        assert!((v.data()[0] - 2.0 * 4.0 / 9.0).abs() < 1e-12);
        assert!((v.data()[1] - 2.0 * 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_block_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(tape.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }
}
