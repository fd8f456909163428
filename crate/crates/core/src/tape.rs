//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every op appends a node holding its forward value. `backward` replays the
//! record in reverse, producing gradients for every node that depends on a
//! parameter or a grad-requiring input.

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{CvsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor4D};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind, for graph inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    ScaledRelu,
    Gelu,
    Add,
    Sub,
    Mul,
    Scale,
    SelectChannels,
    Concat,
    ChannelSum,
    DifferenceMap,
    TokenLinear,
    Linear,
    LayerNorm,
    GlobalAvgPool,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub fn is_normalization(self) -> bool {
        matches!(self, OpKind::LayerNorm)
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ScaledRelu { x: Var, gain: T },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    SelectChannels { x: Var, index: Vec<usize> },
    Concat { xs: Vec<Var> },
    ChannelSum { x: Var, channels: Vec<usize> },
    DifferenceMap { x: Var, di: isize, dj: isize },
    TokenLinear { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GlobalAvgPool { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::ScaledRelu { .. } => OpKind::ScaledRelu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::SelectChannels { .. } => OpKind::SelectChannels,
            Op::Concat { .. } => OpKind::Concat,
            Op::ChannelSum { .. } => OpKind::ChannelSum,
            Op::DifferenceMap { .. } => OpKind::DifferenceMap,
            Op::TokenLinear { .. } => OpKind::TokenLinear,
            Op::Linear { .. } => OpKind::Linear,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv { x, w, b, .. } | Op::TokenLinear { x, w, b } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ScaledRelu { x, .. }
            | Op::Gelu { x }
            | Op::Scale { x, .. }
            | Op::SelectChannels { x, .. }
            | Op::ChannelSum { x, .. }
            | Op::DifferenceMap { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Sum { x } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { xs } => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor4D<T>,
    op: Op<T>,
    tracks_grad: bool,
    scope: usize,
}

/// Per-node gradients from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4D<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4D<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    scopes: Vec<String>,
    current_scope: usize,
    macs: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `out[i][j] = x[(i+di) mod h][(j+dj) mod w] - x[i][j]` on every plane.
pub fn cyclic_difference<T: Element>(x: &Tensor4D<T>, di: isize, dj: isize) -> Tensor4D<T> {
    let s = x.shape();
    let mut out = Tensor4D::zeros(s);
    if s.numel() == 0 {
        return out;
    }
    let (h, w) = (s.h as isize, s.w as isize);
    let row_shift = di.rem_euclid(h) as usize;
    let col_shift = dj.rem_euclid(w) as usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                let si = (i + row_shift) % s.h;
                for j in 0..s.w {
                    let sj = (j + col_shift) % s.w;
                    dst[i * s.w + j] = src[si * s.w + sj] - src[i * s.w + j];
                }
            }
        }
    }
    out
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scopes: vec![String::new()], current_scope: 0, macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4D<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Multiply-accumulates recorded by convolutions and linear maps.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Runs `f` with every new node labelled `name`.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let idx = match self.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
        let prev = std::mem::replace(&mut self.current_scope, idx);
        let out = f(self);
        self.current_scope = prev;
        out
    }

    /// Operation kinds recorded under `scope`, in order.
    pub fn ops_in_scope(&self, scope: &str) -> Vec<OpKind> {
        match self.scopes.iter().position(|s| s == scope) {
            Some(idx) => self.nodes.iter().filter(|n| n.scope == idx).map(|n| n.op.kind()).collect(),
            None => Vec::new(),
        }
    }

    /// Scope and kind of the first node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| {
            let scope = &self.scopes[n.scope];
            let scope = if scope.is_empty() { "<top>" } else { scope };
            format!("node {i} ({:?} in {scope}, shape {})", n.op.kind(), n.value.shape())
        })
    }

    fn push(&mut self, value: Tensor4D<T>, op: Op<T>) -> Var {
        let tracks_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].tracks_grad),
        };
        self.nodes.push(Node { value, op, tracks_grad, scope: self.current_scope });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor4D<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf whose gradient is kept by `backward`.
    pub fn input_with_grad(&mut self, value: Tensor4D<T>) -> Var {
        let v = self.push(value, Op::Input);
        self.nodes[v.0].tracks_grad = true;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let xs = self.shape(x);
        self.macs += spec.macs(xs.h, xs.w)? * xs.n as u64;
        Ok(self.push(out, Op::Conv { x, w, b, spec }))
    }

    /// `gain * max(0, x)`.
    pub fn scaled_relu(&mut self, x: Var, gain: f64) -> Result<Var> {
        if !gain.is_finite() || gain == 0.0 {
            return Err(CvsError::arg("scaled_relu", format!("gain must be finite and nonzero, got {gain}")));
        }
        let g = T::from_f64_lossy(gain);
        let out = self.value(x).map(|v| if v > T::zero() { g * v } else { T::zero() });
        Ok(self.push(out, Op::ScaledRelu { x, gain: g }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.scaled_relu(x, 1.0).expect("unit gain is valid")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu { x })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor4D<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CvsError::shape(name, format!("{} vs {}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor4D::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let out = self.value(x).scale(f);
        self.push(out, Op::Scale { x, factor: f })
    }

    /// Output channel `i` is input channel `index[i]`.
    pub fn select_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if let Some(bad) = index.iter().find(|&&c| c >= xs.c) {
            return Err(CvsError::shape("select_channels", format!("channel {bad} of {}", xs.c)));
        }
        let src = self.value(x);
        let out_shape = xs.with_channels(index.len());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..xs.n {
            for &c in index {
                data.extend_from_slice(src.plane(n, c));
            }
        }
        let out = Tensor4D::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::SelectChannels { x, index: index.to_vec() }))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.select_channels(x, &index)
    }

    /// View channels as `(groups, c/groups)`, transpose, flatten.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let c = self.shape(x).c;
        let perm = shuffle_permutation(c, groups)?;
        self.select_channels(x, &perm)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| CvsError::arg("concat", "no inputs"))?;
        let s0 = self.shape(first);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(CvsError::shape("concat", format!("{s} vs {s0}")));
            }
            total += s.c;
        }
        let out_shape = s0.with_channels(total);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(n));
            }
        }
        let out = Tensor4D::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    /// Single-channel sum of the listed channels.
    pub fn channel_sum(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if channels.is_empty() || channels.iter().any(|&c| c >= xs.c) {
            return Err(CvsError::shape("channel_sum", format!("channels {channels:?} of {}", xs.c)));
        }
        let src = self.value(x);
        let mut out = Tensor4D::zeros(xs.with_channels(1));
        for n in 0..xs.n {
            let dst = out.plane_mut(n, 0);
            for &c in channels {
                dst.iter_mut().zip(src.plane(n, c)).for_each(|(d, &s)| *d += s);
            }
        }
        Ok(self.push(out, Op::ChannelSum { x, channels: channels.to_vec() }))
    }

    /// Cyclic shift by `(di, dj)` minus the input.
    pub fn difference_map(&mut self, x: Var, di: isize, dj: isize) -> Var {
        let out = cyclic_difference(self.value(x), di, dj);
        self.push(out, Op::DifferenceMap { x, di, dj })
    }

    /// Linear map across spatial positions: every `(n, c)` row of `h·w`
    /// tokens goes through `w` of shape `(t_out, h·w, 1, 1)`; the result has
    /// shape `(n, c, out_h, out_w)` with `out_h·out_w = t_out`.
    pub fn token_linear(&mut self, x: Var, w: Var, b: Option<Var>, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let tokens = xs.plane();
        if ws.c * ws.h * ws.w != tokens || ws.n != out_h * out_w {
            return Err(CvsError::shape(
                "token_linear",
                format!("weight {ws} for {tokens} tokens -> {out_h}x{out_w}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws.n {
                return Err(CvsError::shape("token_linear", "bias length"));
            }
        }
        let rows = xs.n * xs.c;
        let mut out = Tensor4D::zeros(Shape::new(xs.n, xs.c, out_h, out_w));
        T::gemm(rows, tokens, ws.n, self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), false);
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            out.data_mut().chunks_mut(ws.n).for_each(|row| row.iter_mut().zip(&bias).for_each(|(v, &bb)| *v += bb));
        }
        self.macs += (rows * tokens * ws.n) as u64;
        Ok(self.push(out, Op::TokenLinear { x, w, b }))
    }

    /// Fully connected map on flattened items: `(n, f)` → `(n, out, 1, 1)`,
    /// `w` of shape `(out, f, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let features = xs.item();
        if ws.c * ws.h * ws.w != features {
            return Err(CvsError::shape("linear", format!("weight {ws} for {features} features")));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws.n {
                return Err(CvsError::shape("linear", "bias length"));
            }
        }
        let mut out = Tensor4D::zeros(Shape::new(xs.n, ws.n, 1, 1));
        T::gemm(xs.n, features, ws.n, self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), false);
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            out.data_mut().chunks_mut(ws.n).for_each(|row| row.iter_mut().zip(&bias).for_each(|(v, &bb)| *v += bb));
        }
        self.macs += (xs.n * features * ws.n) as u64;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Normalizes across channels at every `(n, y, x)` position.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if self.value(gamma).len() != xs.c || self.value(beta).len() != xs.c {
            return Err(CvsError::shape("layer_norm", format!("affine params for {} channels", xs.c)));
        }
        let eps = T::from_f64_lossy(eps);
        let cnt = T::from_usize(xs.c).expect("channel count");
        let plane = xs.plane();
        let src = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor4D::zeros(xs);
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut rstd = vec![T::zero(); xs.n * plane];
        for n in 0..xs.n {
            let item = src.item(n);
            for p in 0..plane {
                let mean = (0..xs.c).map(|c| item[c * plane + p]).sum::<T>() / cnt;
                let var = (0..xs.c).map(|c| (item[c * plane + p] - mean).powi(2)).sum::<T>() / cnt;
                let r = T::one() / (var + eps).sqrt();
                rstd[n * plane + p] = r;
                for c in 0..xs.c {
                    let i = n * xs.item() + c * plane + p;
                    let xh = (item[c * plane + p] - mean) * r;
                    xhat[i] = xh;
                    out.data_mut()[i] = g[c] * xh + bt[c];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let denom = T::from_usize(xs.plane().max(1)).expect("plane size");
        let src = self.value(x);
        let data = (0..xs.n)
            .flat_map(|n| (0..xs.c).map(move |c| (n, c)))
            .map(|(n, c)| src.plane(n, c).iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor4D::from_vec(Shape::new(xs.n, xs.c, 1, 1), data).expect("pool shape");
        self.push(out, Op::GlobalAvgPool { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4D::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Batch-mean cross-entropy against label-smoothed targets: the true
    /// class gets `1 - smoothing`, every other class `smoothing / (C - 1)`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(CvsError::arg("smoothed_cross_entropy", format!("smoothing {smoothing} outside [0, 1)")));
        }
        let ls = self.shape(logits);
        let classes = ls.item();
        if labels.len() != ls.n {
            return Err(CvsError::shape("smoothed_cross_entropy", format!("{} labels for batch {}", labels.len(), ls.n)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CvsError::arg("smoothed_cross_entropy", format!("label {bad} out of range for {classes} classes")));
        }
        let off = if classes > 1 { smoothing / (classes - 1) as f64 } else { 0.0 };
        let mut targets = vec![T::from_f64_lossy(off); ls.n * classes];
        for (n, &l) in labels.iter().enumerate() {
            targets[n * classes + l] = T::from_f64_lossy(1.0 - smoothing);
        }
        let mut total = T::zero();
        for n in 0..ls.n {
            let row = self.value(logits).item(n);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (k, &v) in row.iter().enumerate() {
                total -= targets[n * classes + k] * (v - lse);
            }
        }
        let loss = total / T::from_usize(ls.n.max(1)).expect("batch size");
        Ok(self.push(Tensor4D::scalar(loss), Op::CrossEntropy { logits, targets }))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `params` (so repeated calls accumulate); all node gradients are returned.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(CvsError::NonScalarLoss(ls.to_string()));
        }
        let mut grads: Vec<Option<Tensor4D<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4D::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                params.accumulate_grad(id, &g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor4D<T>, grads: &mut [Option<Tensor4D<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor4D<T>| match grads[v.0].as_mut() {
            Some(existing) => existing.add_assign(&delta),
            None => grads[v.0] = Some(delta),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, spec } => {
                let cg = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    spec,
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                )?;
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let db = db.reshape(self.shape(*b))?;
                    acc(*b, db);
                }
            }
            Op::ScaledRelu { x, gain } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gg)| if v > T::zero() { *gain * gg } else { T::zero() })
                        .collect();
                    acc(*x, Tensor4D::from_vec(xv.shape(), data)?);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(g.data()).map(|(&v, &gg)| gelu_parts(v).1 * gg).collect();
                    acc(*x, Tensor4D::from_vec(xv.shape(), data)?);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.scale(-T::one()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = vb.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                    acc(*a, Tensor4D::from_vec(va.shape(), data)?);
                }
                if self.wants(*b) {
                    let data = va.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                    acc(*b, Tensor4D::from_vec(vb.shape(), data)?);
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    acc(*x, g.scale(*factor));
                }
            }
            Op::SelectChannels { x, index } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let mut dx = Tensor4D::zeros(xs);
                    for n in 0..xs.n {
                        for (o, &c) in index.iter().enumerate() {
                            let src = g.plane(n, o);
                            dx.plane_mut(n, c).iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Concat { xs } => {
                let mut c0 = 0;
                for &v in xs {
                    let s = self.shape(v);
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(s.numel());
                        for n in 0..s.n {
                            for c in c0..c0 + s.c {
                                data.extend_from_slice(g.plane(n, c));
                            }
                        }
                        acc(v, Tensor4D::from_vec(s, data)?);
                    }
                    c0 += s.c;
                }
            }
            Op::ChannelSum { x, channels } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let mut dx = Tensor4D::zeros(xs);
                    for n in 0..xs.n {
                        let src = g.plane(n, 0);
                        for &c in channels {
                            dx.plane_mut(n, c).iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::DifferenceMap { x, di, dj } => {
                if self.wants(*x) {
                    // transpose of (shift - I) is (reverse shift - I)
                    acc(*x, cyclic_difference(g, -di, -dj));
                }
            }
            Op::TokenLinear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (rows, tokens, tout) = (xs.n * xs.c, xs.plane(), ws.n);
                if self.wants(*x) {
                    let mut dx = Tensor4D::zeros(xs);
                    T::gemm(rows, tout, tokens, g.data(), false, self.value(*w).data(), false, dx.data_mut(), false);
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor4D::zeros(ws);
                    T::gemm(tout, rows, tokens, g.data(), true, self.value(*x).data(), false, dw.data_mut(), false);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = Tensor4D::zeros(self.shape(b));
                    for row in g.data().chunks(tout) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                    acc(b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, features, out) = (xs.n, xs.item(), ws.n);
                if self.wants(*x) {
                    let mut dx = Tensor4D::zeros(xs);
                    T::gemm(n, out, features, g.data(), false, self.value(*w).data(), false, dx.data_mut(), false);
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor4D::zeros(ws);
                    T::gemm(out, n, features, g.data(), true, self.value(*x).data(), false, dw.data_mut(), false);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = Tensor4D::zeros(self.shape(b));
                    for row in g.data().chunks(out) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                    acc(b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let gam = self.value(*gamma).data();
                let cnt = T::from_usize(xs.c).expect("channel count");
                let mut dx = Tensor4D::zeros(xs);
                let mut dgamma = vec![T::zero(); xs.c];
                let mut dbeta = vec![T::zero(); xs.c];
                for n in 0..xs.n {
                    for p in 0..plane {
                        let idx = |c: usize| n * xs.item() + c * plane + p;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..xs.c {
                            let i = idx(c);
                            let d = g.data()[i] * gam[c];
                            mean_d += d;
                            mean_dx += d * xhat[i];
                            dgamma[c] += g.data()[i] * xhat[i];
                            dbeta[c] += g.data()[i];
                        }
                        mean_d /= cnt;
                        mean_dx /= cnt;
                        let r = rstd[n * plane + p];
                        for c in 0..xs.c {
                            let i = idx(c);
                            let d = g.data()[i] * gam[c];
                            dx.data_mut()[i] = r * (d - mean_d - xhat[i] * mean_dx);
                        }
                    }
                }
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, Tensor4D::from_vec(self.shape(*gamma), dgamma)?);
                }
                if self.wants(*beta) {
                    acc(*beta, Tensor4D::from_vec(self.shape(*beta), dbeta)?);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let denom = T::from_usize(xs.plane().max(1)).expect("plane size");
                    let mut dx = Tensor4D::zeros(xs);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let v = g.at(n, c, 0, 0) / denom;
                            dx.plane_mut(n, c).iter_mut().for_each(|d| *d = v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    acc(*x, Tensor4D::full(self.shape(*x), g.data()[0]));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let ls = self.shape(*logits);
                    let classes = ls.item();
                    let scale = g.data()[0] / T::from_usize(ls.n.max(1)).expect("batch size");
                    let mut dl = Tensor4D::zeros(ls);
                    for n in 0..ls.n {
                        let row = self.value(*logits).item(n);
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z = row.iter().map(|&v| (v - max).exp()).sum::<T>();
                        let tsum: T = targets[n * classes..(n + 1) * classes].iter().copied().sum();
                        for k in 0..classes {
                            let p = (row[k] - max).exp() / z;
                            dl.data_mut()[n * classes + k] = scale * (p * tsum - targets[n * classes + k]);
                        }
                    }
                    acc(*logits, dl);
                }
            }
        }
        Ok(())
    }
}

/// Channel order after a `groups`-way shuffle.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(CvsError::arg(
            "channel_shuffle",
            format!("{channels} channels not divisible by {groups} groups"),
        ));
    }
    let per = channels / groups;
    Ok((0..per).flat_map(|i| (0..groups).map(move |g| g * per + i)).collect())
}
