//! The autodiff tape.
//!
//! A [`Graph`] records every operation of one forward pass; [`Var`] handles
//! index into it. `backward` walks the tape once in exact reverse recording
//! order (deterministic accumulation), hands out [`Gradients`], and marks
//! the tape consumed — a second `backward` without a fresh forward pass is
//! an error, not a silent wrong answer.

use matrixmultiply::dgemm;

use super::conv::{conv_adjoint_data, conv_forward, conv_grad_kernels, ConvGeom, Padding};
use super::{Tensor, TensorError};

/// Handle to a node in one [`Graph`]. Valid only for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, b: usize, geom: ConvGeom },
    ConvT2d { x: usize, k: usize, b: usize, geom: ConvGeom },
    Dense { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Sqrt { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Square { x: usize },
    Affine { x: usize, a: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Reduce { x: usize, axes: Vec<usize>, mean: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one scalar loss with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Move the gradient for `v` out of the set.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Value computed at `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shape of the value at `v`.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        if v.0 < self.nodes.len() {
            Ok(v.0)
        } else {
            Err(TensorError::ForeignVar { op })
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Strided convolution over NHWC input with `[kh,kw,ci,co]` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let (xi, ki, bi) = (self.check(x, OP)?, self.check(kernels, OP)?, self.check(bias, OP)?);
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: OP });
        }
        let xs = self.nodes[xi].value.shape().to_vec();
        let ks = self.nodes[ki].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: OP, expect: 4, got: xs });
        }
        if ks.len() != 4 {
            return Err(TensorError::RankMismatch { op: OP, expect: 4, got: ks });
        }
        if ks[2] != xs[3] {
            return Err(TensorError::AxisMismatch { op: OP, axis: 2, lhs: ks[2], rhs: xs[3] });
        }
        if bs != [ks[3]] {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 0,
                lhs: bs.first().copied().unwrap_or(0),
                rhs: ks[3],
            });
        }
        if padding == Padding::Valid && (xs[1] < ks[0] || xs[2] < ks[1]) {
            return Err(TensorError::ShapeMismatch { op: OP, lhs: xs, rhs: ks });
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ks[0], ks[1], ks[3], stride, padding);
        let y = conv_forward(
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            Some(self.nodes[bi].value.data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.ho, geom.wo, geom.co], y)?;
        let needs = self.needs(xi) || self.needs(ki) || self.needs(bi);
        Ok(self.push(value, Op::Conv2d { x: xi, k: ki, b: bi, geom }, needs))
    }

    /// Transposed convolution: the exact adjoint of `conv2d` with the same
    /// stride and same padding. Input `[n,hi,wi,cin]`, kernels
    /// `[kh,kw,cout,cin]`, output `[n, hi*stride, wi*stride, cout]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d_transpose";
        let (xi, ki, bi) = (self.check(x, OP)?, self.check(kernels, OP)?, self.check(bias, OP)?);
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: OP });
        }
        if padding != Padding::Same {
            return Err(TensorError::TransposeValidPadding);
        }
        let xs = self.nodes[xi].value.shape().to_vec();
        let ks = self.nodes[ki].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: OP, expect: 4, got: xs });
        }
        if ks.len() != 4 {
            return Err(TensorError::RankMismatch { op: OP, expect: 4, got: ks });
        }
        if ks[3] != xs[3] {
            return Err(TensorError::AxisMismatch { op: OP, axis: 3, lhs: ks[3], rhs: xs[3] });
        }
        if bs != [ks[2]] {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 0,
                lhs: bs.first().copied().unwrap_or(0),
                rhs: ks[2],
            });
        }
        // Underlying conv maps [n, hi*s, wi*s, cout] -> [n, hi, wi, cin];
        // this op walks it backwards.
        let geom = ConvGeom::new(
            xs[0],
            xs[1] * stride,
            xs[2] * stride,
            ks[2],
            ks[0],
            ks[1],
            ks[3],
            stride,
            padding,
        );
        debug_assert_eq!((geom.ho, geom.wo), (xs[1], xs[2]));
        let mut y = conv_adjoint_data(
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            &geom,
        );
        let b = self.nodes[bi].value.data();
        for row in y.chunks_exact_mut(geom.ci) {
            for (v, add) in row.iter_mut().zip(b) {
                *v += add;
            }
        }
        let value = Tensor::new(vec![geom.n, geom.h, geom.w, geom.ci], y)?;
        let needs = self.needs(xi) || self.needs(ki) || self.needs(bi);
        Ok(self.push(value, Op::ConvT2d { x: xi, k: ki, b: bi, geom }, needs))
    }

    /// Fully connected layer: `y = x . w + b` with `x [n,di]`, `w [di,do]`.
    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "dense";
        let (xi, wi, bi) = (self.check(x, OP)?, self.check(weights, OP)?, self.check(bias, OP)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(TensorError::RankMismatch { op: OP, expect: 2, got: xs });
        }
        if ws.len() != 2 {
            return Err(TensorError::RankMismatch { op: OP, expect: 2, got: ws });
        }
        if ws[0] != xs[1] {
            return Err(TensorError::AxisMismatch { op: OP, axis: 0, lhs: ws[0], rhs: xs[1] });
        }
        if bs != [ws[1]] {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 0,
                lhs: bs.first().copied().unwrap_or(0),
                rhs: ws[1],
            });
        }
        let (n, di, dout) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(self.nodes[bi].value.data());
        }
        unsafe {
            dgemm(
                n,
                di,
                dout,
                1.0,
                self.nodes[xi].value.data().as_ptr(),
                di as isize,
                1,
                self.nodes[wi].value.data().as_ptr(),
                dout as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        let value = Tensor::new(vec![n, dout], y)?;
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }, needs))
    }

    fn unary(
        &mut self,
        x: Var,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let xi = self.check(x, op_name)?;
        let src = &self.nodes[xi].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(xi);
        Ok(self.push(value, op(xi), needs))
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "relu", |v| v.max(0.0), |xi| Op::Relu { x: xi })
    }

    /// Logistic function elementwise.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), |xi| Op::Sigmoid { x: xi })
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "sqrt", f64::sqrt, |xi| Op::Sqrt { x: xi })
    }

    /// Elementwise natural exponential.
    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "exp", f64::exp, |xi| Op::Exp { x: xi })
    }

    /// Elementwise natural logarithm.
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "log", f64::ln, |xi| Op::Log { x: xi })
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "square", |v| v * v, |xi| Op::Square { x: xi })
    }

    /// `a*x + b` elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var, TensorError> {
        self.unary(x, "affine", |v| a * v + b, |xi| Op::Affine { x: xi, a })
    }

    /// Clamp into `[lo, hi]` elementwise. Gradient passes inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary(x, "clamp", |v| v.clamp(lo, hi), |xi| Op::Clamp { x: xi, lo, hi })
    }

    /// View the same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xi = self.check(x, "reshape")?;
        let src = &self.nodes[xi].value;
        let expect: usize = shape.iter().product();
        if expect != src.numel() {
            return Err(TensorError::BadReshape { numel: src.numel(), shape });
        }
        let value = Tensor::new(shape, src.data().to_vec())?;
        let needs = self.needs(xi);
        Ok(self.push(value, Op::Reshape { x: xi }, needs))
    }

    /// Collapse all axes after the first: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "flatten")?;
        let shape = self.nodes[xi].value.shape();
        if shape.len() < 2 {
            return Err(TensorError::RankMismatch {
                op: "flatten",
                expect: 2,
                got: shape.to_vec(),
            });
        }
        let new = vec![shape[0], shape[1..].iter().product()];
        self.reshape(x, new)
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<(usize, usize), TensorError> {
        let (ai, bi) = (self.check(a, op_name)?, self.check(b, op_name)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok((ai, bi))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = self.binary(a, b, "add")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape().to_vec(), data)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, needs))
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = self.binary(a, b, "sub")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape().to_vec(), data)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(value, Op::Sub { a: ai, b: bi }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = self.binary(a, b, "mul")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape().to_vec(), data)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, needs))
    }

    fn reduce(
        &mut self,
        x: Var,
        axes: &[usize],
        mean: bool,
        op_name: &'static str,
    ) -> Result<Var, TensorError> {
        let xi = self.check(x, op_name)?;
        let in_shape = self.nodes[xi].value.shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::AxisOutOfRange { op: op_name, axis: ax, rank });
            }
            if seen[ax] {
                return Err(TensorError::DuplicateAxis { op: op_name, axis: ax });
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| in_shape[a]).product();
        let mut out = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        let src = self.nodes[xi].value.data();
        for_each_mapped_index(&in_shape, &seen, |in_idx, out_idx| {
            out[out_idx] += src[in_idx];
        });
        if mean {
            let scale = 1.0 / count as f64;
            for v in &mut out {
                *v *= scale;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(xi);
        let mut axes_sorted = axes.to_vec();
        axes_sorted.sort_unstable();
        Ok(self.push(value, Op::Reduce { x: xi, axes: axes_sorted, mean }, needs))
    }

    /// Sum over the listed axes, removing them from the shape. Reducing
    /// every axis yields a rank-0 scalar.
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(x, axes, false, "reduce_sum")
    }

    /// Mean over the listed axes, removing them from the shape.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(x, axes, true, "reduce_mean")
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape: record a
    /// new forward pass before calling this again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let li = self.check(loss, "backward")?;
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.nodes[li].value.shape().is_empty() {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        for idx in (0..=li).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.accumulate(idx, &dy, &mut grads);
            // Leaves keep their gradient; interior nodes drop it once used.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }

        let out = grads
            .iter_mut()
            .enumerate()
            .map(|(i, g)| {
                g.take().map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    /// Add `dy`-propagated contributions of node `idx` onto its inputs.
    fn accumulate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: usize, contrib: &[f64]| {
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
            for (g, c) in slot.iter_mut().zip(contrib) {
                *g += c;
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                if self.needs(*x) {
                    let dx = conv_adjoint_data(dy, self.nodes[*k].value.data(), geom);
                    add_to(grads, *x, &dx);
                }
                if self.needs(*k) {
                    let dk = conv_grad_kernels(self.nodes[*x].value.data(), dy, geom);
                    add_to(grads, *k, &dk);
                }
                if self.needs(*b) {
                    add_to(grads, *b, &channel_sums(dy, geom.co));
                }
            }
            Op::ConvT2d { x, k, b, geom } => {
                // Output lives on the underlying conv's input side, so the
                // roles of forward/adjoint swap relative to Conv2d.
                if self.needs(*x) {
                    let dx = conv_forward(dy, self.nodes[*k].value.data(), None, geom);
                    add_to(grads, *x, &dx);
                }
                if self.needs(*k) {
                    let dk = conv_grad_kernels(dy, self.nodes[*x].value.data(), geom);
                    add_to(grads, *k, &dk);
                }
                if self.needs(*b) {
                    add_to(grads, *b, &channel_sums(dy, geom.ci));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (n, di, dout) = (xs[0], xs[1], ws[1]);
                if self.needs(*x) {
                    // dx = dy . w^T
                    let mut dx = vec![0.0; n * di];
                    unsafe {
                        dgemm(
                            n, dout, di, 1.0, dy.as_ptr(), dout as isize, 1,
                            self.nodes[*w].value.data().as_ptr(), 1, dout as isize, 0.0,
                            dx.as_mut_ptr(), di as isize, 1,
                        );
                    }
                    add_to(grads, *x, &dx);
                }
                if self.needs(*w) {
                    // dw = x^T . dy
                    let mut dw = vec![0.0; di * dout];
                    unsafe {
                        dgemm(
                            di, n, dout, 1.0, self.nodes[*x].value.data().as_ptr(), 1, di as isize,
                            dy.as_ptr(), dout as isize, 1, 0.0, dw.as_mut_ptr(), dout as isize, 1,
                        );
                    }
                    add_to(grads, *w, &dw);
                }
                if self.needs(*b) {
                    add_to(grads, *b, &channel_sums(dy, dout));
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let src = self.nodes[*x].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(src)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let out = self.nodes[idx].value.data();
                    let dx: Vec<f64> = dy.iter().zip(out).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Sqrt { x } => {
                if self.needs(*x) {
                    let out = self.nodes[idx].value.data();
                    let dx: Vec<f64> = dy.iter().zip(out).map(|(&g, &s)| g * 0.5 / s).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let out = self.nodes[idx].value.data();
                    let dx: Vec<f64> = dy.iter().zip(out).map(|(&g, &e)| g * e).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Log { x } => {
                if self.needs(*x) {
                    let src = self.nodes[*x].value.data();
                    let dx: Vec<f64> = dy.iter().zip(src).map(|(&g, &v)| g / v).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let src = self.nodes[*x].value.data();
                    let dx: Vec<f64> = dy.iter().zip(src).map(|(&g, &v)| g * 2.0 * v).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Affine { x, a } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = dy.iter().map(|&g| g * a).collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let src = self.nodes[*x].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(src)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { 0.0 })
                        .collect();
                    add_to(grads, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    add_to(grads, *x, dy);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, dy);
                }
                if self.needs(*b) {
                    add_to(grads, *b, dy);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, dy);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = dy.iter().map(|&g| -g).collect();
                    add_to(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let other = self.nodes[*b].value.data();
                    let da: Vec<f64> = dy.iter().zip(other).map(|(&g, &v)| g * v).collect();
                    add_to(grads, *a, &da);
                }
                if self.needs(*b) {
                    let other = self.nodes[*a].value.data();
                    let db: Vec<f64> = dy.iter().zip(other).map(|(&g, &v)| g * v).collect();
                    add_to(grads, *b, &db);
                }
            }
            Op::Reduce { x, axes, mean } => {
                if self.needs(*x) {
                    let in_shape = self.nodes[*x].value.shape().to_vec();
                    let mut removed = vec![false; in_shape.len()];
                    for &a in axes {
                        removed[a] = true;
                    }
                    let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                    let scale = if *mean { 1.0 / count as f64 } else { 1.0 };
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    for_each_mapped_index(&in_shape, &removed, |in_idx, out_idx| {
                        dx[in_idx] = dy[out_idx] * scale;
                    });
                    add_to(grads, *x, &dx);
                }
            }
        }
    }
}

/// Sum a row-major `[rows, c]` buffer down to per-channel totals.
fn channel_sums(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Visit every linear index of `in_shape` in ascending order together with
/// the linear index it maps to once the `removed` axes are dropped.
fn for_each_mapped_index(in_shape: &[usize], removed: &[bool], mut f: impl FnMut(usize, usize)) {
    let numel: usize = in_shape.iter().product();
    if numel == 0 {
        return;
    }
    // Per-axis output strides; removed axes contribute nothing.
    let mut out_strides = vec![0usize; in_shape.len()];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        if !removed[i] {
            out_strides[i] = stride;
            stride *= in_shape[i];
        }
    }
    let mut coords = vec![0usize; in_shape.len()];
    let mut out_idx = 0usize;
    for in_idx in 0..numel {
        f(in_idx, out_idx);
        // Odometer increment with running output index.
        for axis in (0..in_shape.len()).rev() {
            coords[axis] += 1;
            out_idx += out_strides[axis];
            if coords[axis] < in_shape[axis] {
                break;
            }
            out_idx -= out_strides[axis] * in_shape[axis];
            coords[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: &[usize], s: &mut u64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lcg(s)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x0`, step `h`.
    fn numerical_grad(f: &dyn Fn(&Tensor) -> f64, x0: &Tensor, h: f64) -> Vec<f64> {
        let mut x = x0.clone();
        (0..x.numel())
            .map(|i| {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + h;
                let up = f(&x);
                x.data_mut()[i] = orig - h;
                let down = f(&x);
                x.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Gradcheck a scalar-valued builder against finite differences.
    fn gradcheck(build: &dyn Fn(&mut Graph, Var) -> Var, x0: &Tensor, tol: f64) {
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let loss = build(&mut g, xv);
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let xv = g.leaf(x0.clone().with_grad());
        let loss = build(&mut g, xv);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap();
        let numeric = numerical_grad(&f, x0, 1e-5);
        for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / denom < tol,
                "coord {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn dense_identity_example() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2], vec![3.0, 3.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0]);
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut s = 11u64;
        let x = rand_tensor(&[3, 4], &mut s);
        // Positive input for log/sqrt.
        let xp = Tensor::new(
            vec![3, 4],
            x.data().iter().map(|v| v.abs() + 0.5).collect(),
        )
        .unwrap();
        gradcheck(&|g, v| {
            let r = g.relu(v).unwrap();
            g.reduce_sum(r, &[0, 1]).unwrap()
        }, &x, 1e-6);
        gradcheck(&|g, v| {
            let r = g.sigmoid(v).unwrap();
            let sq = g.square(r).unwrap();
            g.reduce_sum(sq, &[0, 1]).unwrap()
        }, &x, 1e-6);
        gradcheck(&|g, v| {
            let r = g.exp(v).unwrap();
            g.reduce_mean(r, &[0, 1]).unwrap()
        }, &x, 1e-6);
        gradcheck(&|g, v| {
            let r = g.log(v).unwrap();
            g.reduce_sum(r, &[0, 1]).unwrap()
        }, &xp, 1e-6);
        gradcheck(&|g, v| {
            let r = g.sqrt(v).unwrap();
            g.reduce_sum(r, &[0, 1]).unwrap()
        }, &xp, 1e-6);
        gradcheck(&|g, v| {
            let r = g.affine(v, -2.5, 0.75).unwrap();
            let m = g.mul(r, v).unwrap();
            g.reduce_sum(m, &[0, 1]).unwrap()
        }, &x, 1e-6);
        gradcheck(&|g, v| {
            let c = g.clamp(v, -0.25, 0.25).unwrap();
            g.reduce_sum(c, &[0, 1]).unwrap()
        }, &x, 1e-5);
    }

    #[test]
    fn conv_and_dense_gradients_match_finite_differences() {
        let mut s = 21u64;
        let x = rand_tensor(&[2, 5, 5, 2], &mut s);
        let k = rand_tensor(&[3, 3, 2, 3], &mut s);
        let b = rand_tensor(&[3], &mut s);
        // Gradient w.r.t. input.
        gradcheck(&|g, v| {
            let kk = g.leaf(k.clone());
            let bb = g.leaf(b.clone());
            let y = g.conv2d(v, kk, bb, 2, Padding::Same).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1, 2, 3]).unwrap()
        }, &x, 1e-5);
        // Gradient w.r.t. kernels and bias.
        gradcheck(&|g, v| {
            let xx = g.leaf(x.clone());
            let bb = g.leaf(b.clone());
            let y = g.conv2d(xx, v, bb, 1, Padding::Same).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1, 2, 3]).unwrap()
        }, &k, 1e-5);

        let kt = rand_tensor(&[3, 3, 4, 2], &mut s);
        let bt = rand_tensor(&[4], &mut s);
        gradcheck(&|g, v| {
            let kk = g.leaf(kt.clone());
            let bb = g.leaf(bt.clone());
            let y = g.conv2d_transpose(v, kk, bb, 2, Padding::Same).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1, 2, 3]).unwrap()
        }, &x, 1e-5);
        gradcheck(&|g, v| {
            let xx = g.leaf(x.clone());
            let bb = g.leaf(bt.clone());
            let y = g.conv2d_transpose(xx, v, bb, 2, Padding::Same).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1, 2, 3]).unwrap()
        }, &kt, 1e-5);

        let xd = rand_tensor(&[4, 6], &mut s);
        let wd = rand_tensor(&[6, 3], &mut s);
        let bd = rand_tensor(&[3], &mut s);
        gradcheck(&|g, v| {
            let ww = g.leaf(wd.clone());
            let bb = g.leaf(bd.clone());
            let y = g.dense(v, ww, bb).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1]).unwrap()
        }, &xd, 1e-6);
        gradcheck(&|g, v| {
            let xx = g.leaf(xd.clone());
            let bb = g.leaf(bd.clone());
            let y = g.dense(xx, v, bb).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1]).unwrap()
        }, &wd, 1e-6);
    }

    #[test]
    fn bias_gradient_sums_over_positions() {
        let mut s = 5u64;
        let x = rand_tensor(&[2, 4, 4, 1], &mut s);
        let k = rand_tensor(&[3, 3, 1, 2], &mut s);
        let b = rand_tensor(&[2], &mut s);
        gradcheck(&|g, v| {
            let xx = g.leaf(x.clone());
            let kk = g.leaf(k.clone());
            let y = g.conv2d(xx, kk, v, 1, Padding::Same).unwrap();
            let sq = g.square(y).unwrap();
            g.reduce_sum(sq, &[0, 1, 2, 3]).unwrap()
        }, &b, 1e-6);
    }

    #[test]
    fn reduce_removes_axes_and_scalar_is_rank_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap());
        let partial = g.reduce_sum(x, &[1]).unwrap();
        assert_eq!(g.shape(partial), &[2, 4]);
        let all = g.reduce_mean(x, &[0, 1, 2]).unwrap();
        assert_eq!(g.shape(all), &[] as &[usize]);
        assert!((g.value(all).item() - 11.5).abs() < 1e-12);
        // Keep-nothing reduction over a middle axis sums the right slices.
        assert_eq!(g.value(partial).data()[0], (0 + 4 + 8) as f64);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = g.square(x).unwrap();
        let loss = g.reduce_sum(sq, &[0]).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = g.square(x).unwrap();
        assert!(matches!(g.backward(sq), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_offending_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 4, 4, 3]));
        let k = g.leaf(Tensor::zeros(vec![3, 3, 2, 5]));
        let b = g.leaf(Tensor::zeros(vec![5]));
        match g.conv2d(x, k, b, 1, Padding::Same) {
            Err(TensorError::AxisMismatch { axis: 2, lhs: 2, rhs: 3, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        let w = g.leaf(Tensor::zeros(vec![7, 2]));
        let xd = g.leaf(Tensor::zeros(vec![1, 6]));
        let bd = g.leaf(Tensor::zeros(vec![2]));
        match g.dense(xd, w, bd) {
            Err(TensorError::AxisMismatch { axis: 0, lhs: 7, rhs: 6, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn fan_in_shared_node_accumulates_both_paths() {
        // loss = sum(x*x + x) => dloss/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let both = g.add(sq, x).unwrap();
        let loss = g.reduce_sum(both, &[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -1.0, 5.0]);
    }

    #[test]
    fn forward_and_backward_are_bit_repeatable() {
        let mut s = 31u64;
        let x = rand_tensor(&[2, 7, 7, 2], &mut s);
        let k = rand_tensor(&[3, 3, 2, 4], &mut s);
        let b = rand_tensor(&[4], &mut s);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone().with_grad());
            let kv = g.leaf(k.clone().with_grad());
            let bv = g.leaf(b.clone().with_grad());
            let y = g.conv2d(xv, kv, bv, 2, Padding::Same).unwrap();
            let r = g.relu(y).unwrap();
            let loss = g.reduce_sum(r, &[0, 1, 2, 3]).unwrap();
            let val = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (val, grads.get(kv).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn transpose_output_shape_doubles_spatial_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 7, 7, 64]));
        let k = g.leaf(Tensor::zeros(vec![3, 3, 64, 64]));
        let b = g.leaf(Tensor::zeros(vec![64]));
        let y = g.conv2d_transpose(x, k, b, 2, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 14, 14, 64]);
        assert!(matches!(
            g.conv2d_transpose(x, k, b, 2, Padding::Valid),
            Err(TensorError::TransposeValidPadding)
        ));
    }
}
