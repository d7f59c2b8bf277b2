//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs do
//! not require gradients are stored as constants, so backward only walks the
//! differentiable part of the graph. Insertion order is a topological order.

use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::numel;
use super::{Real, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn id(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op<F> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Conv { x: Var, k: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<F> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: F },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log { x: Var, floor: F },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<F> },
    Mean { x: Var, axis: usize },
    Sum(Var),
    SumSquares(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    AvgPoolLast { x: Var, factor: usize },
    UpsampleLast { x: Var, factor: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<F> {
    id: u32,
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<F> {
    tape: u32,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a leaf that requires grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id()).and_then(Option::take)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let ncols = g.col_cols();
    let mut cols = vec![F::zero(); g.col_rows() * ncols];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Real>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<F> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id()]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Constant };
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteResult { op: name });
        }
        let rg = inputs.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), F::zero(), &mut out, (n as isize, 1));
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// 1-D cross-correlation. `x` is `[C_in, L]`, `k` is `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xs, ks) = (self.value(x).shape(), self.value(k).shape());
        if xs.len() != 2 || ks.len() != 3 || xs[0] != ks[1] || stride == 0 {
            return Err(mismatch("conv1d", format!("x {xs:?}, kernel {ks:?}, stride {stride}")));
        }
        if xs[1] + 2 * pad < ks[2] {
            return Err(mismatch("conv1d", format!("input length {} shorter than kernel {}", xs[1], ks[2])));
        }
        let geom = ConvGeom {
            cin: xs[0],
            h: 1,
            w: xs[1],
            cout: ks[0],
            kh: 1,
            kw: ks[2],
            sh: 1,
            sw: stride,
            ph: 0,
            pw: pad,
            oh: 1,
            ow: (xs[1] + 2 * pad - ks[2]) / stride + 1,
        };
        self.conv_impl("conv1d", x, k, None, geom, vec![geom.cout, geom.ow])
    }

    /// 2-D cross-correlation. `x` is `[C_in, H, W]`, `k` is `[C_out, C_in, KH, KW]`,
    /// optional `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var, TensorError> {
        let (xs, ks) = (self.value(x).shape(), self.value(k).shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(mismatch("conv2d", format!("x {xs:?}, kernel {ks:?}")));
        }
        if xs[1] + 2 * pad.0 < ks[2] || xs[2] + 2 * pad.1 < ks[3] {
            return Err(mismatch("conv2d", format!("input {xs:?} smaller than kernel {ks:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ks[0]] {
                return Err(mismatch("conv2d", format!("bias {:?} for {} channels", self.value(b).shape(), ks[0])));
            }
        }
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh: (xs[1] + 2 * pad.0 - ks[2]) / stride.0 + 1,
            ow: (xs[2] + 2 * pad.1 - ks[3]) / stride.1 + 1,
        };
        self.conv_impl("conv2d", x, k, bias, geom, vec![geom.cout, geom.oh, geom.ow])
    }

    fn conv_impl(
        &mut self,
        name: &'static str,
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![F::zero(); geom.cout * ncols];
        F::gemm(
            geom.cout,
            rows,
            ncols,
            F::one(),
            self.value(k).data(),
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            F::zero(),
            &mut out,
            (ncols as isize, 1),
        );
        if let Some(b) = bias {
            for (chan, &bv) in out.chunks_mut(ncols).zip(self.value(b).data()) {
                chan.iter_mut().for_each(|o| *o += bv);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        let needs_cols = self.node(k).requires_grad;
        let cols = if needs_cols { cols } else { Vec::new() };
        self.push_checked(name, value, Op::Conv { x, k, bias, geom, cols }, &inputs)
    }

    fn broadcast_check(&self, name: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !sa.ends_with(sb) {
            return Err(mismatch(name, format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, TensorError> {
        self.broadcast_check(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let inner = bv.len().max(1);
        let data: Vec<F> = av.data().chunks(inner).flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y))).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push_checked("add", v, Op::Add(a, b), &[a, b])
    }

    /// `a - b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// `a * b` elementwise, with `b` broadcast over the leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Result<Var, TensorError> {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push_checked("affine", v, Op::Affine { x, scale }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(sigmoid);
        self.push_checked("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(F::tanh);
        self.push_checked("tanh", v, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(|e| e.max(F::zero()));
        self.push_checked("relu", v, Op::Relu(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: F) -> Result<Var, TensorError> {
        let v = self.value(x).map(|e| e.max(floor).ln());
        self.push_checked("log", v, Op::Log { x, floor }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(mismatch("softmax", format!("axis {axis} for rank {}", xv.rank())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..n {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes to zero mean and unit (population) variance along `axis`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: F) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(mismatch("layer_norm", format!("axis {axis} for rank {}", xv.rank())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let nf = F::from_usize(n).unwrap();
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| out[at(j)]).sum::<F>() / nf;
                let var = (0..n).map(|j| (out[at(j)] - mean).powi(2)).sum::<F>() / nf;
                let is = F::one() / (var + eps).sqrt();
                for j in 0..n {
                    out[at(j)] = (out[at(j)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("layer_norm", value, Op::LayerNorm { x, axis, inv_std }, &[x])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return Err(mismatch("mean", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let nf = F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= nf);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push_checked("mean", value, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push_checked("sum_squares", Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let n = val.shape()[axis];
                out.extend_from_slice(&val.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push_checked("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() || start > end || end > xv.shape()[axis] {
            return Err(mismatch("slice", format!("{start}..{end} on axis {axis} of {:?}", xv.shape())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        self.push_checked("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(mismatch("transpose", format!("rank {}", xv.rank())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push_checked("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_checked("reshape", value, Op::Reshape(x), &[x])
    }

    /// Average-pools the last axis by `factor`; a trailing partial window is
    /// averaged over its own length. Output length is `ceil(L / factor)`.
    pub fn avg_pool_last(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let len = *xv.shape().last().ok_or_else(|| mismatch("avg_pool", "scalar input".into()))?;
        if factor == 0 || len == 0 {
            return Err(mismatch("avg_pool", format!("factor {factor} on length {len}")));
        }
        let out_len = len.div_ceil(factor);
        let mut out = Vec::with_capacity(xv.len() / len * out_len);
        for row in xv.data().chunks(len) {
            for win in row.chunks(factor) {
                out.push(win.iter().copied().sum::<F>() / F::from_usize(win.len()).unwrap());
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(shape, out)?;
        self.push_checked("avg_pool", value, Op::AvgPoolLast { x, factor }, &[x])
    }

    /// Nearest-neighbour upsampling of the last axis to length `out_len`,
    /// where `ceil(out_len / factor)` must equal the input length.
    pub fn upsample_last(&mut self, x: Var, factor: usize, out_len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let len = *xv.shape().last().ok_or_else(|| mismatch("upsample", "scalar input".into()))?;
        if factor == 0 || out_len.div_ceil(factor) != len {
            return Err(mismatch("upsample", format!("length {len} x{factor} -> {out_len}")));
        }
        let mut out = Vec::with_capacity(xv.len() / len.max(1) * out_len);
        for row in xv.data().chunks(len) {
            out.extend((0..out_len).map(|t| row[t / factor]));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(shape, out)?;
        self.push_checked("upsample", value, Op::UpsampleLast { x, factor }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that require grad
    /// receive gradients; intermediate gradients are released as the sweep
    /// passes them, so the returned map holds leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if loss.tape != self.id || loss.id() >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        let lv = &self.nodes[loss.id()].value;
        if lv.len() != 1 {
            return Err(mismatch("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.id()].requires_grad {
            grads[loss.id()] = Some(Tensor::full(lv.shape(), F::one()));
        }
        for i in (0..=loss.id()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Vec<F>) {
        let node = &self.nodes[v.id()];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.id()] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("gradient shape")),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.id()].requires_grad
    }

    /// Sums `g` over the leading broadcast dimensions down to `b`'s size.
    fn reduce_broadcast(g: &[F], inner: usize, f: impl Fn(usize, F) -> F) -> Vec<F> {
        let inner = inner.max(1);
        let mut out = vec![F::zero(); inner];
        for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
            for (j, (&gv, o)) in chunk.iter().zip(out.iter_mut()).enumerate() {
                *o += f(chunk_idx * inner + j, gv);
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.id()].value, &self.nodes[b.id()].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, F::one(), gd, (n as isize, 1), bv.data(), (1, n as isize), F::zero(), &mut da, (k as isize, 1));
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, F::one(), av.data(), (1, k as isize), gd, (n as isize, 1), F::zero(), &mut db, (n as isize, 1));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv { x, k, bias, geom, cols } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let kv = &self.nodes[k.id()].value;
                if self.wants(*k) {
                    let mut dk = vec![F::zero(); geom.cout * rows];
                    F::gemm(
                        geom.cout,
                        ncols,
                        rows,
                        F::one(),
                        gd,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        F::zero(),
                        &mut dk,
                        (rows as isize, 1),
                    );
                    self.accumulate(grads, *k, dk);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db = gd.chunks(ncols).map(|c| c.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![F::zero(); rows * ncols];
                    F::gemm(
                        rows,
                        geom.cout,
                        ncols,
                        F::one(),
                        kv.data(),
                        (1, rows as isize),
                        gd,
                        (ncols as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (ncols as isize, 1),
                    );
                    let mut dx = vec![F::zero(); geom.cin * geom.h * geom.w];
                    col2im_add(&dcols, geom, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.wants(*b) {
                    let inner = self.nodes[b.id()].value.len();
                    let db = Self::reduce_broadcast(gd, inner, |_, gv| sign * gv);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.id()].value.data(), self.nodes[b.id()].value.data());
                let inner = bv.len().max(1);
                if self.wants(*a) {
                    let da = gd.iter().enumerate().map(|(i, &gv)| gv * bv[i % inner]).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = Self::reduce_broadcast(gd, inner, |i, gv| gv * av[i]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, gd.iter().map(|&gv| gv * *scale).collect());
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (F::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = gd.iter().zip(y).map(|(&gv, &t)| gv * (F::one() - t * t)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.id()].value.data();
                let dx = gd.iter().zip(xv).map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x, floor } => {
                let xv = self.nodes[x.id()].value.data();
                let dx = gd.iter().zip(xv).map(|(&gv, &v)| if v > *floor { gv / v } else { F::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![F::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: F = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let nf = F::from_usize(n).unwrap();
                let mut dx = vec![F::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let g_mean = (0..n).map(|j| gd[at(j)]).sum::<F>() / nf;
                        let gy_mean = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum::<F>() / nf;
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            dx[at(j)] = is * (gd[at(j)] - g_mean - y[at(j)] * gy_mean);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean { x, axis } => {
                let xs = self.nodes[x.id()].value.shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let nf = F::from_usize(n).unwrap();
                let mut dx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = gd[o * inner + i] / nf;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.id()].value.len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SumSquares(x) => {
                let two = F::from_f64_lossy(2.0);
                let dx = self.nodes[x.id()].value.data().iter().map(|&v| two * v * gd[0]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.id()].value.shape()[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.id()].value.shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let m = node.value.shape()[*axis];
                let mut dx = vec![F::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + m * inner].copy_from_slice(&gd[o * m * inner..(o + 1) * m * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![F::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::AvgPoolLast { x, factor } => {
                let xs = self.nodes[x.id()].value.shape();
                let len = *xs.last().unwrap();
                let out_len = len.div_ceil(*factor);
                let mut dx = Vec::with_capacity(numel(xs));
                for grow in gd.chunks(out_len) {
                    for t in 0..len {
                        let w = t / factor;
                        let wlen = (len - w * factor).min(*factor);
                        dx.push(grow[w] / F::from_usize(wlen).unwrap());
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleLast { x, factor } => {
                let len = *self.nodes[x.id()].value.shape().last().unwrap();
                let out_len = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(self.nodes[x.id()].value.len());
                for grow in gd.chunks(out_len) {
                    let mut acc = vec![F::zero(); len];
                    for (t, &gv) in grow.iter().enumerate() {
                        acc[t / factor] += gv;
                    }
                    dx.extend(acc);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
