//! A small define-by-run reverse-mode autodiff engine over `ndarray`.
//!
//! Values are dynamic-rank arrays with the batched (N, C, H, W) convention for
//! feature maps and shape `[1]` for scalars. A [`Graph`] records every
//! operation eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients. Everything is single-precision-or-double generic via
//! [`Scalar`], and all parallel kernels are bitwise deterministic.
//!
//! Shape violations inside the graph are programmer errors and panic; the
//! public module APIs validate their inputs before building graphs.

mod conv;

use std::collections::HashMap;

use ndarray::{ArrayD, ArrayView4, ArrayViewD, Axis, IxDyn, Slice};

use crate::params::{ParamId, ParamStore};

/// Element type for all tensors: `f32` for training / inference, `f64` for
/// gradient verification.
pub trait Scalar: ndarray::NdFloat {
    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    fn from_f(v: f64) -> Self {
        v as f32
    }
    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f(v: f64) -> Self {
        v
    }
    fn to_f(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise multiply where the second operand broadcasts: each of its
    /// axes is either equal to the first operand's or 1, or it is a `[1]`
    /// scalar.
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
    },
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    AvgPool(usize, usize),
    GlobalAvgPool(usize),
    ChannelMean(usize),
    ConcatC(Vec<usize>),
    SliceC(usize, usize, usize),
    MeanAll(usize),
    L1(usize, usize),
    Mse(usize, usize),
    /// Cosine similarity of per-sample flattenings, averaged over the batch.
    /// The cosine of a zero vector with anything is defined as 0.
    CosSimMean(usize, usize),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, t: Tensor) -> Option<&ArrayD<T>> {
        self.grads[t.0].as_ref()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn v4<T: Scalar>(a: &ArrayD<T>) -> ArrayView4<T> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn req(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<T> {
        &self.nodes[t.0].value
    }

    /// Extracts a `[1]`-shaped scalar.
    pub fn scalar(&self, t: Tensor) -> T {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Tensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf backed by a stored parameter. Repeated calls for the same id
    /// return the same node, which is what makes weight sharing work.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Tensor {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Tensor(n);
        }
        let t = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_nodes.insert(id, t.0);
        t
    }

    /// (param, node) pairs instantiated in this graph.
    pub fn used_params(&self) -> Vec<(ParamId, Tensor)> {
        let mut v: Vec<_> = self
            .param_nodes
            .iter()
            .map(|(&p, &n)| (p, Tensor(n)))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "sub: shape mismatch"
        );
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: shape mismatch"
        );
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    /// `a * broadcast(b)`; see [`Op::MulBroadcast`].
    pub fn mul_broadcast(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let bshape = self.value(b).shape().to_vec();
        let ashape = self.value(a).shape().to_vec();
        assert!(
            broadcast_ok(&ashape, &bshape),
            "mul_broadcast: cannot broadcast {bshape:?} over {ashape:?}"
        );
        let v = mul_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::MulBroadcast(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let cv = T::from_f(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cv);
        self.push(v, Op::Scale(a.0, c), self.req(a.0))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let cv = T::from_f(c);
        let v = self.nodes[a.0].value.mapv(|x| x + cv);
        self.push(v, Op::AddScalar(a.0, c), self.req(a.0))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Tensor) -> Tensor {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a.0), self.req(a.0))
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        let s = T::from_f(slope);
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu(a.0, slope), self.req(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0), self.req(a.0))
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a.0), self.req(a.0))
    }

    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let (l, h) = (T::from_f(lo), T::from_f(hi));
        let v = self.nodes[a.0].value.mapv(|x| x.max(l).min(h));
        self.push(v, Op::Clamp(a.0, lo, hi), self.req(a.0))
    }

    // ---- structured ----

    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, pad: usize) -> Tensor {
        let bias_slice = b.map(|bt| {
            self.nodes[bt.0]
                .value
                .as_slice()
                .expect("contiguous bias")
                .to_vec()
        });
        let v = conv::conv2d_fwd(
            &v4(&self.nodes[x.0].value),
            &v4(&self.nodes[w.0].value),
            bias_slice.as_deref(),
            pad,
        );
        let rg = self.req(x.0) || self.req(w.0) || b.map(|bt| self.req(bt.0)).unwrap_or(false);
        self.push(
            v.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|t| t.0),
                pad,
            },
            rg,
        )
    }

    pub fn pixel_shuffle(&mut self, a: Tensor) -> Tensor {
        let v = conv::pixel_shuffle(&v4(&self.nodes[a.0].value));
        self.push(v.into_dyn(), Op::PixelShuffle(a.0), self.req(a.0))
    }

    pub fn pixel_unshuffle(&mut self, a: Tensor) -> Tensor {
        let v = conv::pixel_unshuffle(&v4(&self.nodes[a.0].value));
        self.push(v.into_dyn(), Op::PixelUnshuffle(a.0), self.req(a.0))
    }

    pub fn avg_pool(&mut self, a: Tensor, k: usize) -> Tensor {
        if k == 1 {
            return a;
        }
        let v = conv::avg_pool(&v4(&self.nodes[a.0].value), k);
        self.push(v.into_dyn(), Op::AvgPool(a.0, k), self.req(a.0))
    }

    /// (N, C, H, W) -> (N, C, 1, 1) spatial mean.
    pub fn global_avg_pool(&mut self, a: Tensor) -> Tensor {
        let x = v4(&self.nodes[a.0].value);
        let (n, c, h, w) = x.dim();
        let inv = T::from_f(1.0 / (h * w) as f64);
        let mut out = ndarray::Array4::<T>::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                let s = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
                out[[ni, ci, 0, 0]] = s * inv;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(a.0), self.req(a.0))
    }

    /// (N, C, H, W) -> (N, 1, H, W) mean over channels.
    pub fn channel_mean(&mut self, a: Tensor) -> Tensor {
        let x = v4(&self.nodes[a.0].value);
        let c = x.dim().1;
        let inv = T::from_f(1.0 / c as f64);
        let mut s = x.sum_axis(Axis(1));
        s.mapv_inplace(|v| v * inv);
        let (n, h, w) = s.dim();
        let out = s.into_shape_with_order((n, 1, h, w)).unwrap();
        self.push(out.into_dyn(), Op::ChannelMean(a.0), self.req(a.0))
    }

    pub fn concat_c(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_c: incompatible shapes");
        let rg = parts.iter().any(|t| self.req(t.0));
        self.push(v, Op::ConcatC(parts.iter().map(|t| t.0).collect()), rg)
    }

    /// Channel slice `[c0, c1)`.
    pub fn slice_c(&mut self, a: Tensor, c0: usize, c1: usize) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(1), Slice::from(c0..c1))
            .to_owned();
        self.push(v, Op::SliceC(a.0, c0, c1), self.req(a.0))
    }

    // ---- reductions / losses ----

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let x = &self.nodes[a.0].value;
        let inv = T::from_f(1.0 / x.len() as f64);
        let m = x.sum() * inv;
        let v = ArrayD::from_elem(IxDyn(&[1]), m);
        self.push(v, Op::MeanAll(a.0), self.req(a.0))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "l1_loss: shape mismatch"
        );
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let inv = T::from_f(1.0 / xa.len() as f64);
        let mut s = T::zero();
        ndarray::Zip::from(xa).and(xb).for_each(|&u, &v| {
            s += (u - v).abs();
        });
        let v = ArrayD::from_elem(IxDyn(&[1]), s * inv);
        self.push(v, Op::L1(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mse_loss: shape mismatch"
        );
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let inv = T::from_f(1.0 / xa.len() as f64);
        let mut s = T::zero();
        ndarray::Zip::from(xa).and(xb).for_each(|&u, &v| {
            let d = u - v;
            s += d * d;
        });
        let v = ArrayD::from_elem(IxDyn(&[1]), s * inv);
        self.push(v, Op::Mse(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    /// Cosine similarity between per-sample flattenings of `a` and `b`
    /// (axis 0 is the batch), averaged over the batch.
    pub fn cos_sim_mean(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "cos_sim_mean: shape mismatch"
        );
        let n = self.value(a).shape()[0];
        let mut acc = T::zero();
        for ni in 0..n {
            let (u, nu, nv) = cos_parts(
                &self.nodes[a.0].value.index_axis(Axis(0), ni),
                &self.nodes[b.0].value.index_axis(Axis(0), ni),
            );
            if nu > T::zero() && nv > T::zero() {
                acc += u / (nu * nv);
            }
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc * T::from_f(1.0 / n as f64));
        self.push(v, Op::CosSimMean(a.0, b.0), self.req(a.0) || self.req(b.0))
    }

    // ---- backward ----

    /// Reverse-mode pass from a `[1]`-shaped scalar loss.
    pub fn backward(&self, loss: Tensor) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(*a, g.clone(), grads);
                self.acc_into(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                self.acc_into(*a, g.clone(), grads);
                self.acc_into(*b, g.mapv(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                self.acc_into(*a, g * &self.nodes[*b].value, grads);
                self.acc_into(*b, g * &self.nodes[*a].value, grads);
            }
            Op::MulBroadcast(a, b) => {
                self.acc_into(*a, mul_bcast(g, &self.nodes[*b].value), grads);
                if self.req(*b) {
                    let prod = g * &self.nodes[*a].value;
                    let red = reduce_to(&prod, self.nodes[*b].value.shape());
                    self.acc_into(*b, red, grads);
                }
            }
            Op::Scale(a, c) => {
                let cv = T::from_f(*c);
                self.acc_into(*a, g.mapv(|x| x * cv), grads);
            }
            Op::AddScalar(a, _) => self.acc_into(*a, g.clone(), grads),
            Op::Relu(a) => {
                let mask = &self.nodes[*a].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(mask).for_each(|gd, &x| {
                    if x <= T::zero() {
                        *gd = T::zero();
                    }
                });
                self.acc_into(*a, d, grads);
            }
            Op::LeakyRelu(a, s) => {
                let sv = T::from_f(*s);
                let mask = &self.nodes[*a].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(mask).for_each(|gd, &x| {
                    if x <= T::zero() {
                        *gd = *gd * sv;
                    }
                });
                self.acc_into(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|gd, &s| {
                    *gd = *gd * s * (T::one() - s);
                });
                self.acc_into(*a, d, grads);
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|gd, &v| {
                    if v < T::zero() {
                        *gd = -*gd;
                    } else if v == T::zero() {
                        *gd = T::zero();
                    }
                });
                self.acc_into(*a, d, grads);
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::from_f(*lo), T::from_f(*hi));
                let x = &self.nodes[*a].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|gd, &v| {
                    if v < l || v > h {
                        *gd = T::zero();
                    }
                });
                self.acc_into(*a, d, grads);
            }
            Op::Conv2d { x, w, b, pad } => {
                let dy = v4(g);
                if self.req(*x) {
                    let dx = conv::conv2d_bwd_x(
                        &v4(&self.nodes[*w].value),
                        &dy,
                        *pad,
                        v4(&self.nodes[*x].value).dim(),
                    );
                    self.acc_into(*x, dx.into_dyn(), grads);
                }
                if self.req(*w) {
                    let dw = conv::conv2d_bwd_w(
                        &v4(&self.nodes[*x].value),
                        &dy,
                        *pad,
                        v4(&self.nodes[*w].value).dim(),
                    );
                    self.acc_into(*w, dw.into_dyn(), grads);
                }
                if let Some(bi) = b {
                    if self.req(*bi) {
                        let db = conv::conv2d_bwd_b(&dy);
                        self.acc_into(*bi, db.into_dyn(), grads);
                    }
                }
            }
            Op::PixelShuffle(a) => {
                let d = conv::pixel_unshuffle(&v4(g));
                self.acc_into(*a, d.into_dyn(), grads);
            }
            Op::PixelUnshuffle(a) => {
                let d = conv::pixel_shuffle(&v4(g));
                self.acc_into(*a, d.into_dyn(), grads);
            }
            Op::AvgPool(a, k) => {
                let d = conv::avg_pool_bwd(&v4(g), *k);
                self.acc_into(*a, d.into_dyn(), grads);
            }
            Op::GlobalAvgPool(a) => {
                let xdim = v4(&self.nodes[*a].value).dim();
                let (n, c, h, w) = xdim;
                let inv = T::from_f(1.0 / (h * w) as f64);
                let gv = v4(g);
                let mut d = ndarray::Array4::<T>::zeros(xdim);
                for ni in 0..n {
                    for ci in 0..c {
                        let gd = gv[[ni, ci, 0, 0]] * inv;
                        d.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(gd);
                    }
                }
                self.acc_into(*a, d.into_dyn(), grads);
            }
            Op::ChannelMean(a) => {
                let xdim = v4(&self.nodes[*a].value).dim();
                let c = xdim.1;
                let inv = T::from_f(1.0 / c as f64);
                let gv = v4(g);
                let mut d = ndarray::Array4::<T>::zeros(xdim);
                for ci in 0..c {
                    let mut plane = d.index_axis_mut(Axis(1), ci);
                    plane.assign(&gv.index_axis(Axis(1), 0));
                    plane.mapv_inplace(|v| v * inv);
                }
                self.acc_into(*a, d.into_dyn(), grads);
            }
            Op::ConcatC(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cw = self.nodes[p].value.shape()[1];
                    if self.req(p) {
                        let piece = g.slice_axis(Axis(1), Slice::from(c0..c0 + cw)).to_owned();
                        self.acc_into(p, piece, grads);
                    }
                    c0 += cw;
                }
            }
            Op::SliceC(a, c0, c1) => {
                let mut d = ArrayD::<T>::zeros(self.nodes[*a].value.raw_dim());
                d.slice_axis_mut(Axis(1), Slice::from(*c0..*c1)).assign(g);
                self.acc_into(*a, d, grads);
            }
            Op::MeanAll(a) => {
                let x = &self.nodes[*a].value;
                let gd = g[[0]] * T::from_f(1.0 / x.len() as f64);
                self.acc_into(*a, ArrayD::from_elem(x.raw_dim(), gd), grads);
            }
            Op::L1(a, b) => {
                let g0 = g[[0]] * T::from_f(1.0 / self.nodes[*a].value.len() as f64);
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut d = ArrayD::<T>::zeros(xa.raw_dim());
                ndarray::Zip::from(&mut d).and(xa).and(xb).for_each(|o, &u, &v| {
                    *o = if u > v {
                        g0
                    } else if u < v {
                        -g0
                    } else {
                        T::zero()
                    };
                });
                if self.req(*b) {
                    self.acc_into(*b, d.mapv(|x| -x), grads);
                }
                if self.req(*a) {
                    self.acc_into(*a, d, grads);
                }
            }
            Op::Mse(a, b) => {
                let g0 = g[[0]] * T::from_f(2.0 / self.nodes[*a].value.len() as f64);
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let d = ndarray::Zip::from(xa).and(xb).map_collect(|&u, &v| (u - v) * g0);
                if self.req(*a) {
                    self.acc_into(*a, d.clone(), grads);
                }
                if self.req(*b) {
                    self.acc_into(*b, d.mapv(|x| -x), grads);
                }
            }
            Op::CosSimMean(a, b) => {
                let n = self.nodes[*a].value.shape()[0];
                let g0 = g[[0]] * T::from_f(1.0 / n as f64);
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = ArrayD::<T>::zeros(xa.raw_dim());
                let mut db = ArrayD::<T>::zeros(xb.raw_dim());
                for ni in 0..n {
                    let av = xa.index_axis(Axis(0), ni);
                    let bv = xb.index_axis(Axis(0), ni);
                    let (u, na, nb) = cos_parts(&av, &bv);
                    if na <= T::zero() || nb <= T::zero() {
                        continue;
                    }
                    let cosv = u / (na * nb);
                    let ka = g0 / (na * nb);
                    let kaa = g0 * cosv / (na * na);
                    let kbb = g0 * cosv / (nb * nb);
                    let mut dav = da.index_axis_mut(Axis(0), ni);
                    ndarray::Zip::from(&mut dav).and(&av).and(&bv).for_each(|o, &x, &y| {
                        *o = ka * y - kaa * x;
                    });
                    let mut dbv = db.index_axis_mut(Axis(0), ni);
                    ndarray::Zip::from(&mut dbv).and(&av).and(&bv).for_each(|o, &x, &y| {
                        *o = ka * x - kbb * y;
                    });
                }
                if self.req(*a) {
                    self.acc_into(*a, da, grads);
                }
                if self.req(*b) {
                    self.acc_into(*b, db, grads);
                }
            }
        }
    }

    fn acc_into(&self, id: usize, delta: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn cos_parts<T: Scalar>(a: &ArrayViewD<T>, b: &ArrayViewD<T>) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        dot += x * y;
        na += x * x;
        nb += y * y;
    });
    (dot, na.sqrt(), nb.sqrt())
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if b == [1] {
        return true;
    }
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| y == x || y == 1)
}

/// `a * broadcast(b)` where each axis of `b` is the same as `a`'s or 1, or
/// `b` is a `[1]` scalar.
fn mul_bcast<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    if b.shape() == [1] {
        let c = b[[0]];
        return a.mapv(|x| x * c);
    }
    let bv = b.view();
    let bb = bv.broadcast(a.raw_dim()).unwrap();
    a * &bb
}

/// Sums `g` down to `shape` (axes where `shape` has 1, or everything for `[1]`).
fn reduce_to<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if shape == [1] {
        return ArrayD::from_elem(IxDyn(&[1]), g.sum());
    }
    let mut out = g.to_owned();
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            out = summed;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, IxDyn};

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[2], &[1.0, 2.0]), true);
        let b = g.leaf(arr(&[2], &[3.0, 4.0]), true);
        let p = g.mul(a, b);
        let s = g.mean_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(a).unwrap().as_slice().unwrap(), &[1.5, 2.0]);
        assert_eq!(grads.wrt(b).unwrap().as_slice().unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn shuffle_round_trip() {
        let x = Array4::from_shape_fn((1, 4, 2, 2), |(_, c, y, xx)| (c * 4 + y * 2 + xx) as f64);
        let mut g = Graph::<f64>::new();
        let t = g.leaf(x.clone().into_dyn(), false);
        let s = g.pixel_shuffle(t);
        let u = g.pixel_unshuffle(s);
        assert_eq!(g.value(u), &x.into_dyn());
    }

    #[test]
    fn unshuffle_cell_order_is_row_major() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let t = g.leaf(x.into_dyn(), false);
        let u = g.pixel_unshuffle(t);
        assert_eq!(g.value(u).shape(), &[1, 4, 1, 1]);
        assert_eq!(
            g.value(u).as_slice().unwrap(),
            &[1.0, 2.0, 3.0, 4.0],
            "cell scan must be row-major"
        );
    }

    #[test]
    fn conv_identity_kernel() {
        // 3x3 kernel with a single centre tap copies the input.
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let mut g = Graph::<f64>::new();
        let xt = g.leaf(x.clone().into_dyn(), false);
        let wt = g.leaf(w.into_dyn(), false);
        let y = g.conv2d(xt, wt, None, 1);
        assert_eq!(g.value(y), &x.into_dyn());
    }

    #[test]
    fn cosine_of_equal_and_opposite() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let b = g.leaf(arr(&[1, 3], &[-1.0, -2.0, -3.0]), false);
        let c1 = g.cos_sim_mean(a, a);
        let c2 = g.cos_sim_mean(a, b);
        assert!((g.scalar(c1) - 1.0).abs() < 1e-12);
        assert!((g.scalar(c2) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[1, 3], &[0.0, 0.0, 0.0]), true);
        let b = g.leaf(arr(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let c = g.cos_sim_mean(a, b);
        assert_eq!(g.scalar(c), 0.0);
        let grads = g.backward(c);
        assert!(grads.wrt(a).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_mul_channel_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let w = g.leaf(arr(&[1, 2, 1, 1], &[10.0, 100.0]), true);
        let y = g.mul_broadcast(x, w);
        assert_eq!(
            g.value(y).as_slice().unwrap(),
            &[10.0, 20.0, 300.0, 400.0]
        );
        let s = g.mean_all(y);
        let grads = g.backward(s);
        // dw = sum(g * x) over broadcast axes, g = 1/4
        assert_eq!(grads.wrt(w).unwrap().as_slice().unwrap(), &[0.75, 1.75]);
    }
}
