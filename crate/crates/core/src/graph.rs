//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in creation order, so the tape is already a
//! topological order of the computation DAG: `backward` walks it once in
//! reverse and every node is visited exactly once.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, Vec<usize>),
    GatherSum(Var, Vec<Vec<usize>>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var, GeluKind),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, T),
    SumAll(Var),
    SumAxis(Var, usize),
    PickLast(Var, Vec<usize>),
    L2Normalize(Var, T),
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
        engaged: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape. Build one per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    macs: Cell<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return None;
    }
    let batch_a = &a[..a.len() - 2];
    let shared = b.len() == 2;
    if !shared && batch_a != &b[..b.len() - 2] {
        return None;
    }
    let batch: usize = batch_a.iter().product();
    let mut out = batch_a.to_vec();
    out.extend([m, n]);
    Some((batch, m, k, n, shared, out))
}

/// Packed GEMM only pays off for wide operands. The choice looks at the
/// per-row dimensions alone, so a row's result never depends on how many
/// other rows share the call.
fn use_packed(k: usize, n: usize) -> bool {
    k >= 16 && n >= 16
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if use_packed(k, n) {
        let (k_, n_) = (k as isize, n as isize);
        // SAFETY: the assert bounds every strided access.
        unsafe { T::gemm_raw(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, T::one(), c.as_mut_ptr(), n_, 1) }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if use_packed(n, k) {
        let (k_, n_) = (k as isize, n as isize);
        // SAFETY: as above.
        unsafe { T::gemm_raw(m, n, k, g.as_ptr(), n_, 1, b.as_ptr(), 1, n_, T::one(), c.as_mut_ptr(), k_, 1) }
        return;
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(&b[p * n..(p + 1) * n]) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    if use_packed(k, n) {
        let (k_, n_) = (k as isize, n as isize);
        // SAFETY: as above.
        unsafe { T::gemm_raw(k, m, n, a.as_ptr(), 1, k_, g.as_ptr(), n_, 1, T::one(), c.as_mut_ptr(), n_, 1) }
        return;
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &gv) in c[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::of(2.0 * GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-u).exp())
}

fn gelu_fwd<T: Real>(x: T, kind: GeluKind) -> T {
    let half = T::of(0.5);
    match kind {
        // 0.5 * (1 + tanh(u)) == sigmoid(2u)
        GeluKind::Tanh => x * gelu_gate(x),
        GeluKind::Erf => half * x * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf()),
    }
}

fn gelu_grad<T: Real>(x: T, kind: GeluKind) -> T {
    let half = T::of(0.5);
    match kind {
        GeluKind::Tanh => {
            let s = gelu_gate(x);
            let dinner = T::of(2.0 * GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
            s + x * s * (T::one() - s) * dinner
        }
        GeluKind::Erf => {
            let cdf = half * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf());
            let pdf = (-half * x * x).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = if sa == sb {
            let x = self.value(a).data();
            let y = self.value(b).data();
            Tensor::new(&sa, x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())?
        } else if sb.len() < sa.len() && sa.ends_with(&sb) && !sb.is_empty() {
            let x = self.value(a).data();
            let y = self.value(b).data();
            let w = y.len();
            let mut data = Vec::with_capacity(x.len());
            for row in x.chunks_exact(w.max(1)) {
                data.extend(row.iter().zip(y).map(|(&p, &q)| f(p, q)));
            }
            Tensor::new(&sa, data)?
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
            let st_a = broadcast_strides(&sa, &shape);
            let st_b = broadcast_strides(&sb, &shape);
            let x = self.value(a).data();
            let y = self.value(b).data();
            let mut data = vec![T::zero(); shape.iter().product()];
            for_each_broadcast(&shape, &st_a, &st_b, |o, i, j| data[o] = f(x[i], y[j]));
            Tensor::new(&shape, data)?
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Var {
        self.unary(a, |x| gelu_fwd(x, kind), Op::Gelu(a, kind))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `x^p` for non-negative inputs.
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.max(T::zero()).powf(p), Op::Powf(a, p))
    }

    /// Matrix product over the last two axes. `b` is either a shared 2-D
    /// matrix or carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n, shared, out_shape) =
            matmul_dims(sa, sb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let x = self.value(a).data();
            let y = self.value(b).data();
            if shared {
                gemm(x, y, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm(
                        &x[bi * m * k..(bi + 1) * m * k],
                        &y[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        self.macs.set(self.macs.get() + (batch * m * k * n) as u64);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul(a, b), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != shape.len() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out = permute_data(self.value(a), perm);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Select slices along axis 0 (with repetition allowed).
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("index_select", &shape, idx));
        }
        let w: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::IndexSelect(a, idx.to_vec()), ng))
    }

    /// Row `i` of the result is the sum of `table` rows listed in `lists[i]`
    /// (zero for an empty list).
    pub fn gather_sum(&mut self, table: Var, lists: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_sum", &shape, &[]));
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.value(table).data();
        let mut data = vec![T::zero(); lists.len() * d];
        for (r, list) in lists.iter().enumerate() {
            for &i in list {
                if i >= rows {
                    return Err(Error::Invalid(format!(
                        "gather_sum: index {i} out of range for table with {rows} rows"
                    )));
                }
                for (o, &s) in data[r * d..(r + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *o += s;
                }
            }
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::new(&[lists.len(), d], data)?,
            Op::GatherSum(table, lists.to_vec()),
            ng,
        ))
    }

    /// Softmax over the last axis, with max subtraction. Rows whose entries
    /// are all `-inf` produce zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::of(n.max(1) as f64)))
    }

    /// `out[r] = a[r, idx[r]]` over the last axis.
    pub fn pick_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("pick_last", &shape, &[]))?;
        let rows = self.value(a).len() / c.max(1);
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick_last", &shape, &[idx.len()]));
        }
        let src = self.value(a).data();
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &i)| src[r * c + i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::new(&shape[..shape.len() - 1], data)?,
            Op::PickLast(a, idx.to_vec()),
            ng,
        ))
    }

    /// Scale each last-axis vector to unit length (`x / max(|x|, eps)`).
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::L2Normalize(a, eps), ng)
    }

    /// Cosine similarity along the last axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = T::of(1e-12);
        let na = self.l2_normalize(a, eps);
        let nb = self.l2_normalize(b, eps);
        let p = self.mul(na, nb)?;
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    /// `w / sigma` with `sigma = u^T w v` for fixed singular-vector estimates
    /// `u`, `v`. When `sigma < eps` the weight passes through unchanged.
    pub fn spectral_normalize(&mut self, w: Var, u: &[T], v: &[T], eps: T) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        if shape.len() != 2 || u.len() != shape[0] || v.len() != shape[1] {
            return Err(Error::shape("spectral_normalize", &shape, &[u.len(), v.len()]));
        }
        let sigma = bilinear(self.value(w).data(), u, v);
        let engaged = sigma >= eps;
        let out = if engaged {
            self.value(w).map(|x| x / sigma)
        } else {
            self.value(w).clone()
        };
        let ng = self.ng(&[w]);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
                engaged,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn reduce_broadcast(&self, grads: &mut [Option<Vec<T>>], v: Var, out_shape: &[usize], g: &[T], f: impl Fn(usize, T) -> T) {
        let shape = self.shape(v).to_vec();
        let Some(dst) = self.acc(grads, v) else { return };
        if shape == out_shape {
            for (i, (d, &x)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, x);
            }
            return;
        }
        if !shape.is_empty() && shape.len() < out_shape.len() && out_shape.ends_with(&shape) {
            let w = dst.len();
            for (r, row) in g.chunks_exact(w).enumerate() {
                for (j, (d, &x)) in dst.iter_mut().zip(row).enumerate() {
                    *d += f(r * w + j, x);
                }
            }
            return;
        }
        let st = broadcast_strides(&shape, out_shape);
        let zero = vec![0; out_shape.len()];
        for_each_broadcast(out_shape, &st, &zero, |o, i, _| dst[i] += f(o, g[o]));
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_broadcast(grads, *a, out.shape(), g, |_, x| x);
                self.reduce_broadcast(grads, *b, out.shape(), g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.reduce_broadcast(grads, *a, out.shape(), g, |_, x| x);
                self.reduce_broadcast(grads, *b, out.shape(), g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // Materialize the broadcast partner of each side.
                let expand = |src: &[T], s: &[usize]| -> Vec<T> {
                    if s == out.shape() {
                        return src.to_vec();
                    }
                    let st = broadcast_strides(s, out.shape());
                    let zero = vec![0; out.shape().len()];
                    let mut e = vec![T::zero(); out.len()];
                    for_each_broadcast(out.shape(), &st, &zero, |o, i, _| e[o] = src[i]);
                    e
                };
                if self.nodes[a.0].needs_grad {
                    let eb = expand(vb, sb);
                    self.reduce_broadcast(grads, *a, out.shape(), g, |o, x| x * eb[o]);
                }
                if self.nodes[b.0].needs_grad {
                    let ea = expand(va, sa);
                    self.reduce_broadcast(grads, *b, out.shape(), g, |o, x| x * ea[o]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n, shared, _) = matmul_dims(sa, sb).expect("checked in forward");
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    if shared {
                        gemm_nt(g, vb, da, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    if shared {
                        gemm_tn(va, g, db, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_tn(
                                &va[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                let back = permute_data(&gt, &inv);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(back.data()).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if let Some(d) = self.acc(grads, p) {
                        for o in 0..outer {
                            for j in 0..w {
                                d[o * w + j] += g[o * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::IndexSelect(a, idx) => {
                let w = out.len() / idx.len().max(1);
                if let Some(d) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            d[i * w + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherSum(t, lists) => {
                let d = out.shape()[1];
                if let Some(dt) = self.acc(grads, *t) {
                    for (r, list) in lists.iter().enumerate() {
                        for &i in list {
                            for j in 0..d {
                                dt[i * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let p = out.data();
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..p.len() / c.max(1) {
                        let s = (0..c).map(|j| g[r * c + j] * p[r * c + j]).sum::<T>();
                        for j in 0..c {
                            d[r * c + j] += p[r * c + j] * (g[r * c + j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let lp = out.data();
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..lp.len() / c.max(1) {
                        let s = (0..c).map(|j| g[r * c + j]).sum::<T>();
                        for j in 0..c {
                            d[r * c + j] += g[r * c + j] - lp[r * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d.max(1);
                let gm = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let dn = T::of(d as f64);
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            dx[r * d + j] +=
                                inv_std[r] / dn * (dn * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a, kind) => self.elementwise_back(grads, *a, g, |x, _| gelu_grad(x, *kind), out),
            Op::Sin(a) => self.elementwise_back(grads, *a, g, |x, _| x.cos(), out),
            Op::Cos(a) => self.elementwise_back(grads, *a, g, |x, _| -x.sin(), out),
            Op::Exp(a) => self.elementwise_back(grads, *a, g, |_, y| y, out),
            Op::Log(a) => self.elementwise_back(grads, *a, g, |x, _| T::one() / x, out),
            Op::Sigmoid(a) => self.elementwise_back(grads, *a, g, |_, y| y * (T::one() - y), out),
            Op::Softplus(a) => self.elementwise_back(grads, *a, g, |x, _| sigmoid(x), out),
            Op::Powf(a, p) => self.elementwise_back(
                grads,
                *a,
                g,
                |x, _| {
                    if x > T::zero() {
                        *p * x.powf(*p - T::one())
                    } else {
                        T::zero()
                    }
                },
                out,
            ),
            Op::SumAll(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(d) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                d[(o * len + l) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::PickLast(a, idx) => {
                let c = *self.shape(*a).last().expect("rank >= 1");
                if let Some(d) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] += g[r];
                    }
                }
            }
            Op::L2Normalize(a, eps) => {
                let dd = *out.shape().last().unwrap_or(&1);
                let x = self.value(*a).data();
                let y = out.data();
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..y.len() / dd.max(1) {
                        let sl = r * dd..(r + 1) * dd;
                        let n = x[sl.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                        if n > *eps {
                            let gy = (0..dd).map(|j| g[r * dd + j] * y[r * dd + j]).sum::<T>();
                            for j in sl {
                                d[j] += (g[j] - y[j] * gy) / n;
                            }
                        } else {
                            for j in sl {
                                d[j] += g[j] / *eps;
                            }
                        }
                    }
                }
            }
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                engaged,
            } => {
                let wv = self.value(*w).data();
                if let Some(d) = self.acc(grads, *w) {
                    if !*engaged {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    } else {
                        let gw = g.iter().zip(wv).map(|(&a, &b)| a * b).sum::<T>();
                        let coef = gw / (*sigma * *sigma);
                        let cols = v.len();
                        for (r, &ur) in u.iter().enumerate() {
                            for (c, &vc) in v.iter().enumerate() {
                                let k = r * cols + c;
                                d[k] += g[k] / *sigma - coef * ur * vc;
                            }
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: Var,
        g: &[T],
        f: impl Fn(T, T) -> T,
        out: &Tensor<T>,
    ) {
        let x = self.value(a).data();
        let y = out.data();
        if let Some(d) = self.acc(grads, a) {
            for i in 0..d.len() {
                d[i] += g[i] * f(x[i], y[i]);
            }
        }
    }
}

/// `u^T W v` for row-major `W`.
pub(crate) fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

fn permute_data<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut data = vec![T::zero(); t.len()];
    let src = t.data();
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| data[o] = src[i]);
    Tensor::new(&out_shape, data).expect("permutation preserves size")
}
