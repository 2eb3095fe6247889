//! Tape-based reverse-mode automatic differentiation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::float::{cast, Float};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, tb: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Gelu { x: Var, tanh: Vec<T> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DepthwiseNhwc { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Gather { x: Var, idx: Vec<usize> },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, total: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    MaskFill { x: Var, keep: Vec<bool> },
    MulMask { x: Var, mask: Vec<T> },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over a parameter store. Parameters enter the tape lazily
/// through [`Graph::param`]; frozen parameters are treated as constants.
pub struct Graph<'s, T: Float> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter used in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// `tanh(c (x + 0.044715 x³))`, the inner term of the tanh GELU approximation.
fn gelu_tanh<T: Float>(x: T) -> T {
    let u: T = cast::<T>(GELU_C) * (x + cast::<T>(GELU_K) * x * x * x);
    let two: T = cast(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_value<T: Float>(x: T, t: T) -> T {
    cast::<T>(0.5) * x * (T::one() + t)
}

fn gelu_grad<T: Float>(x: T, t: T) -> T {
    let half: T = cast(0.5);
    let c: T = cast(GELU_C);
    let k3: T = cast(3.0 * GELU_K);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + k3 * x * x)
}

fn softmax_rows<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            // fully masked row
            continue;
        }
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
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
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is recorded.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter `{name}`")))?;
        Ok(self.param(id))
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched product `[G, m, k] x [G, k, n]`, or `[G, m, k] x [G, n, k]^T` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == if tb { sb[2] } else { sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if tb { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, tb }, rg))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = last_dim(sx);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c: T = cast(c);
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Adds a constant tensor of the same shape (gradient passes through to `x`).
    pub fn add_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let k = self.input(c);
        self.add(x, k)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let y = xv.data().iter().zip(&tanh).map(|(&v, &t)| gelu_value(v, t)).collect();
        let t = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x, tanh }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh { x }, rg)
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` produce zeros.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        let data = softmax_rows(xv.data(), n);
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = last_dim(xv.shape());
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let eps: T = cast(eps);
        let nf: T = cast(n as f64);
        let rows = xv.numel() / n.max(1);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let src = &xv.data()[r * n..(r + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (src[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, kh, kw]`, optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], (sw[2], sw[3]), stride, padding)
            .ok_or_else(|| Error::shape("conv2d geometry", &sx, &sw))?;
        let (p, ck, o) = (geom.out_pixels(), geom.patch(), geom.c_out);
        let mut out = vec![T::zero(); geom.n * o * p];
        let mut col = vec![T::zero(); ck * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let in_sz = geom.c_in * geom.h * geom.w;
        for n in 0..geom.n {
            kernels::im2col(&xv[n * in_sz..(n + 1) * in_sz], &geom, &mut col);
            let dst = &mut out[n * o * p..(n + 1) * o * p];
            T::gemm(o, ck, p, T::one(), wv, false, &col, false, T::zero(), dst);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (c, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let t = Tensor::new(vec![geom.n, o, geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Depthwise 2-D convolution: `x [N, C, H, W]`, `w [C, kh, kw]`, optional bias `[C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sx[1] != sw[0] {
            return Err(Error::shape("depthwise_conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("depthwise bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sx[1], (sw[1], sw[2]), stride, padding)
            .ok_or_else(|| Error::shape("depthwise geometry", &sx, &sw))?;
        let p = geom.out_pixels();
        let mut out = vec![T::zero(); geom.n * geom.c_in * p];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, plane) in out.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = bv[i % geom.c_in]);
            }
        }
        kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        let t = Tensor::new(vec![geom.n, geom.c_in, geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }, rg))
    }

    /// Channels-last depthwise convolution: `x [N, H, W, C]`, `w [kh, kw, C]`, optional bias `[C]`.
    pub fn depthwise_conv2d_nhwc(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sx[3] != sw[2] {
            return Err(Error::shape("depthwise_conv2d_nhwc", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[2]] {
                return Err(Error::shape("depthwise bias", &sw, self.shape(b)));
            }
        }
        let c = sx[3];
        let geom = ConvGeom::new(sx[0], c, sx[1], sx[2], c, (sw[0], sw[1]), stride, padding)
            .ok_or_else(|| Error::shape("depthwise geometry", &sx, &sw))?;
        let mut out = vec![T::zero(); geom.n * geom.ho * geom.wo * c];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for px in out.chunks_mut(c) {
                px.copy_from_slice(bv);
            }
        }
        kernels::depthwise_nhwc_forward(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        let t = Tensor::new(vec![geom.n, geom.ho, geom.wo, c], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::DepthwiseNhwc { x, w, b, geom }, rg))
    }

    /// Selects flat elements of `x` into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= xv.numel()) {
            return Err(Error::shape("gather", xv.shape(), shape));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, idx }, rg))
    }

    /// Max pooling over the last two axes of `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < kernel.0 || s[3] < kernel.1 {
            return Err(Error::shape("max_pool2d", &s, &[kernel.0, kernel.1]));
        }
        let data = self.value(x).data();
        let (idx, out) = kernels::max_pool_indices(|i| data[i], [s[0], s[1], s[2], s[3]], kernel, stride);
        self.gather(x, idx, &out)
    }

    /// Selects index `i` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || i >= s[axis] {
            return Err(Error::shape("select", &s, &[axis, i]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let idx = (0..outer)
            .flat_map(|o| (0..inner).map(move |j| (o * len + i) * inner + j))
            .collect();
        let mut shape = s.clone();
        shape.remove(axis);
        self.gather(x, idx, &shape)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv: T = cast(1.0 / len as f64);
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, outer, len, inner }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push((p, self.value(p).numel() / outer.max(1)));
        }
        let total: usize = sizes.iter().map(|s| s.1).sum();
        let mut out = vec![T::zero(); outer * total];
        let mut off = 0;
        for &(p, sz) in &sizes {
            let src = self.value(p).data();
            for o in 0..outer {
                out[o * total + off..o * total + off + sz].copy_from_slice(&src[o * sz..(o + 1) * sz]);
            }
            off += sz;
        }
        let mut shape = first;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: sizes, outer, total }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let data = kernels::permute(self.value(x).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Row lookup: `table [V, d]`, ids of shape `shape` give `[..shape, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.len() != shape.iter().product::<usize>() || ids.iter().any(|&i| i >= st[0]) {
            return Err(Error::shape("embedding", &st, shape));
        }
        let d = st[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut s = shape.to_vec();
        s.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(s, out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(Error::shape("mask_fill", xv.shape(), &[keep.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { T::neg_infinity() })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskFill { x, keep }, rg))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape("mul_mask", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulMask { x, mask }, rg))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale: T = cast(1.0 / keep);
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.mul_mask(x, mask)
    }

    /// Stochastic depth: drops whole samples along axis 0.
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale: T = cast(1.0 / keep);
        let s = self.shape(x).to_vec();
        let b = s.first().copied().unwrap_or(1);
        let per = self.value(x).numel() / b.max(1);
        let mut mask = Vec::with_capacity(b * per);
        for _ in 0..b {
            let m = if self.rng.random::<f64>() < keep { scale } else { T::zero() };
            mask.extend(std::iter::repeat_n(m, per));
        }
        self.mul_mask(x, mask)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let n: T = cast(t.numel().max(1) as f64);
        let v = t.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    /// Mean cross-entropy of `logits [B, M]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let m = s[1];
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (row, &l) in lv.chunks(m).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[l];
        }
        let v = total / cast(labels.len().max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.data().iter().copied().sum::<T>() / cast(xv.numel().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::MeanAll { x }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    /// Mutable gradient buffer for `v`, created zeroed on first use; `None` for constants.
    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn acc_map(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(d) = self.buf(grads, v) {
            for (i, (d, &gv)) in d.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, gt: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gt.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if let Some(da) = self.buf(grads, *a) {
                    T::gemm(m, n, k, T::one(), g, false, val(*b), true, T::one(), da);
                }
                if let Some(db) = self.buf(grads, *b) {
                    T::gemm(k, m, n, T::one(), val(*a), true, g, false, T::one(), db);
                }
            }
            Op::Bmm { a, b, tb } => {
                let sa = self.shape(*a);
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (gn * m);
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.buf(grads, *a) {
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // da = g * B^T (B stored k x n), or g * B (B stored n x k)
                        T::gemm(m, n, k, T::one(), gi, false, bi, !*tb, T::one(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            T::gemm(n, m, k, T::one(), gi, true, ai, false, T::one(), dbi);
                        } else {
                            T::gemm(k, m, n, T::one(), ai, true, gi, false, T::one(), dbi);
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                self.acc_map(grads, *x, g, |_, gv| gv);
                let n = self.shape(*b)[0];
                if let Some(db) = self.buf(grads, *b) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| gv);
            }
            Op::Sub { a, b } => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |i, gv| gv * bv[i]);
                self.acc_map(grads, *b, g, |i, gv| gv * av[i]);
            }
            Op::Scale { x, c } => self.acc_map(grads, *x, g, |_, gv| gv * *c),
            Op::Relu { x } => {
                let y = node.value.data();
                self.acc_map(grads, *x, g, |i, gv| if y[i] > T::zero() { gv } else { T::zero() });
            }
            Op::Gelu { x, tanh } => {
                let xv = val(*x);
                self.acc_map(grads, *x, g, |i, gv| gv * gelu_grad(xv[i], tanh[i]));
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.acc_map(grads, *x, g, |i, gv| gv * y[i] * (T::one() - y[i]));
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                self.acc_map(grads, *x, g, |i, gv| gv * (T::one() - y[i] * y[i]));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                if let Some(dx) = self.buf(grads, *x) {
                    for r in 0..y.len() / n.max(1) {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gv = val(*gamma);
                if let Some(dg) = self.buf(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *beta) {
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    let nf: T = cast(n as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dx[r * n + j] += rs * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (p, ck, o) = (geom.out_pixels(), geom.patch(), geom.c_out);
                let in_sz = geom.c_in * geom.h * geom.w;
                let (xv, wv) = (val(*x), val(*w));
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for plane in g.chunks(p).enumerate() {
                            db[plane.0 % o] += plane.1.iter().copied().sum::<T>();
                        }
                    }
                }
                let mut col = vec![T::zero(); ck * p];
                if self.nodes[w.0].requires_grad {
                    for n in 0..geom.n {
                        kernels::im2col(&xv[n * in_sz..(n + 1) * in_sz], geom, &mut col);
                        let gn = &g[n * o * p..(n + 1) * o * p];
                        let dw = self.buf(grads, *w).expect("requires grad");
                        T::gemm(o, p, ck, T::one(), gn, false, &col, true, T::one(), dw);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    for n in 0..geom.n {
                        let gn = &g[n * o * p..(n + 1) * o * p];
                        T::gemm(ck, o, p, T::one(), wv, true, gn, false, T::zero(), &mut col);
                        kernels::col2im_add(&col, geom, &mut dx[n * in_sz..(n + 1) * in_sz]);
                    }
                }
            }
            Op::DepthwiseNhwc { x, w, b, geom } => {
                let c = geom.c_in;
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for px in g.chunks(c) {
                            db.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                let (xv, wv) = (val(*x), val(*w));
                let mut dw_tmp = self.nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                kernels::depthwise_nhwc_backward(xv, wv, g, geom, self.buf(grads, *x), dw_tmp.as_deref_mut());
                if let Some(tmp) = dw_tmp {
                    self.acc_map(grads, *w, &tmp, |_, v| v);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let p = geom.out_pixels();
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for (i, plane) in g.chunks(p).enumerate() {
                            db[i % geom.c_in] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
                let (xv, wv) = (val(*x), val(*w));
                let mut dw_tmp = self.nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                kernels::depthwise_backward(xv, wv, g, geom, self.buf(grads, *x), dw_tmp.as_deref_mut());
                if let Some(tmp) = dw_tmp {
                    self.acc_map(grads, *w, &tmp, |_, v| v);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (&i, &gv) in idx.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let inv: T = cast(1.0 / *len as f64);
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..*outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let dst = &mut dx[(o * len + l) * inner..][..*inner];
                            dst.iter_mut().zip(gr).for_each(|(d, &v)| *d += v * inv);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, total } => {
                let mut off = 0;
                for &(p, sz) in parts {
                    if let Some(dp) = self.buf(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + off..o * total + off + sz];
                            dp[o * sz..(o + 1) * sz].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += sz;
                }
            }
            Op::Reshape { x } => self.acc_map(grads, *x, g, |_, gv| gv),
            Op::Permute { x, perm } => {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                self.acc_map(grads, *x, &back, |_, v| v);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        dt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(t, &v)| *t += v);
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                self.acc_map(grads, *x, g, |i, gv| if keep[i] { gv } else { T::zero() });
            }
            Op::MulMask { x, mask } => self.acc_map(grads, *x, g, |i, gv| gv * mask[i]),
            Op::Mse { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let c: T = g[0] * cast(2.0 / av.len().max(1) as f64);
                if let Some(da) = self.buf(grads, *a) {
                    for i in 0..av.len() {
                        da[i] += c * (av[i] - bv[i]);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for i in 0..av.len() {
                        db[i] -= c * (av[i] - bv[i]);
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let m = self.shape(*logits)[1];
                let probs = softmax_rows(val(*logits), m);
                let c: T = g[0] / cast(labels.len().max(1) as f64);
                if let Some(dl) = self.buf(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dl[r * m + j] += c * (probs[r * m + j] - onehot);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel().max(1);
                let gv = g[0] / cast(n as f64);
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
        }
    }
}
