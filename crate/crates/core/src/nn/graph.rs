use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use super::expand::ExpandMap;
use crate::scalar::Float;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Expand(Var, Arc<ExpandMap>),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Array2<F>,
    },
    Blur(Var, [f64; 3]),
    ChannelBias(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Square(Var),
    Relu(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    GroupMaxPool(Var, Vec<usize>),
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Every operation evaluates eagerly and records how to propagate gradients.
/// A graph is built for one loss evaluation and then dropped.
pub struct Graph<F: Float> {
    values: Vec<ArrayD<F>>,
    ops: Vec<Op<F>>,
    needs: Vec<bool>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<F: Float>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("operation expects a 2-D tensor")
}

/// Sums `g` over the axes along which an operand of `shape` was broadcast.
fn reduce_to<F: Float>(mut g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    /// Value of a `(1, 1)` or single-element node.
    pub fn scalar(&self, v: Var) -> F {
        let a = &self.values[v.0];
        assert_eq!(a.len(), 1, "scalar() on a tensor of shape {:?}", a.shape());
        *a.iter().next().expect("one element")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    fn unary(&mut self, a: Var, value: ArrayD<F>, op: Op<F>) -> Var {
        let n = self.needs[a.0];
        self.push(value, op, n)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.values[a.0].clone();
        self.constant(v)
    }

    pub fn expand(&mut self, theta: Var, map: &Arc<ExpandMap>) -> Var {
        let t = self.values[theta.0]
            .as_slice()
            .expect("parameters are contiguous");
        let v = map.apply(t);
        self.unary(theta, v, Op::Expand(theta, Arc::clone(map)))
    }

    /// 2-D cross-correlation of `x: (B, C, H, W)` with `w: (O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (B,C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (O,C,k,k)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(
            self.values[x.0].as_slice().expect("contiguous"),
            (b, c, h, wd),
            k,
            stride,
            pad,
            (ho, wo),
        );
        let wm = self.values[w.0]
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight");
        let mut out = Array2::<F>::zeros((o, b * ho * wo));
        general_mat_mul(F::one(), &wm, &cols, F::zero(), &mut out);
        // (O, B, Ho*Wo) -> (B, O, Ho, Wo)
        let out = out
            .into_shape_with_order((o, b, ho * wo))
            .expect("shape")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[b, o, ho, wo]))
            .expect("shape");
        let needs = self.needs[x.0] || self.needs[w.0];
        self.push(
            out,
            Op::Conv {
                x,
                w,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// Depthwise 3×3 smoothing of `x: (B, C, H, W)` with zero padding. The
    /// symmetric kernel has weight `w[0]` at the center, `w[1]` on edge
    /// neighbours and `w[2]` on corners.
    pub fn blur(&mut self, x: Var, w: [f64; 3]) -> Var {
        let out = blur3(&self.values[x.0], w);
        self.unary(x, out, Op::Blur(x, w))
    }

    /// Adds a per-channel bias `b: (C,)` to `x: (B, C, ...)`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let bv = &self.values[b.0];
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[1], bv.len(), "bias length mismatch");
        let mut shape = vec![1; xv.ndim()];
        shape[1] = bv.len();
        let bb = bv.view().into_shape_with_order(IxDyn(&shape)).expect("shape");
        let out = xv + &bb;
        let needs = self.needs[x.0] || self.needs[b.0];
        self.push(out, Op::ChannelBias(x, b), needs)
    }

    /// `x wᵀ` for `x: (B, I)` and `w: (O, I)`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        assert_eq!(xv.ncols(), wv.ncols(), "matmul_t inner dimension mismatch");
        let mut out = Array2::<F>::zeros((xv.nrows(), wv.nrows()));
        general_mat_mul(F::one(), &xv, &wv.t(), F::zero(), &mut out);
        let needs = self.needs[x.0] || self.needs[w.0];
        self.push(out.into_dyn(), Op::MatMulT(x, w), needs)
    }

    fn check_broadcast(&self, a: Var, b: Var) {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        assert_eq!(sa.len(), sb.len(), "operands must have equal rank");
        for (x, y) in sa.iter().zip(sb) {
            assert!(x == y || *x == 1 || *y == 1, "shapes {sa:?} and {sb:?} do not broadcast");
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let v = &self.values[a.0] + &self.values[b.0];
        let n = self.needs[a.0] || self.needs[b.0];
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let v = &self.values[a.0] - &self.values[b.0];
        let n = self.needs[a.0] || self.needs[b.0];
        self.push(v, Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let v = &self.values[a.0] * &self.values[b.0];
        let n = self.needs[a.0] || self.needs[b.0];
        self.push(v, Op::Mul(a, b), n)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| -x);
        self.unary(a, v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let v = self.values[a.0].mapv(|x| x * cf);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let v = self.values[a.0].mapv(|x| x + cf);
        self.unary(a, v, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(F::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(F::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(F::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.unary(a, v, Op::Relu(a))
    }

    /// `log(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (F::of(lo), F::of(hi));
        let v = self.values[a.0].mapv(|x| x.max(l).min(h));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum of two equally shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let mut v = self.values[a.0].clone();
        Zip::from(&mut v)
            .and(&self.values[b.0])
            .for_each(|x, &y| *x = if *x <= y { *x } else { y });
        let n = self.needs[a.0] || self.needs[b.0];
        self.push(v, Op::Minimum(a, b), n)
    }

    fn scalar_array(x: F) -> ArrayD<F> {
        ArrayD::from_elem(IxDyn(&[1, 1]), x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Self::scalar_array(self.values[a.0].sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let arr = &self.values[a.0];
        let v = Self::scalar_array(arr.sum() / F::of(arr.len() as f64));
        self.unary(a, v, Op::MeanAll(a))
    }

    /// Row sums of a 2-D tensor, kept as a `(B, 1)` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = as2(&self.values[a.0])
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .into_dyn();
        self.unary(a, v, Op::SumCols(a))
    }

    /// Row-wise `log Σⱼ exp(a_ij)`, kept as a `(B, 1)` column.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let x = as2(&self.values[a.0]);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            let row = x.row(i);
            let m = row.fold(F::neg_infinity(), |m, &y| m.max(y));
            m + row.fold(F::zero(), |s, &y| s + (y - m).exp()).ln()
        });
        self.unary(a, v.into_dyn(), Op::LogSumExpCols(a))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| as2(&self.values[p.0])).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("concat_cols row mismatch")
            .into_dyn();
        let n = parts.iter().any(|p| self.needs[p.0]);
        self.push(v, Op::Concat(parts.to_vec()), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = as2(&self.values[a.0])
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        self.unary(a, v, Op::SliceCols(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(a, v, Op::Reshape(a))
    }

    /// Selects rows of a tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.values[a.0].select(Axis(0), idx);
        self.unary(a, v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Max over each consecutive block of `n` columns: `(B, F·n) -> (B, F)`.
    pub fn group_max_pool(&mut self, a: Var, n: usize) -> Var {
        let x = as2(&self.values[a.0]);
        assert_eq!(x.ncols() % n, 0, "columns must be whole regular fields");
        let f = x.ncols() / n;
        let mut arg = Vec::with_capacity(x.nrows() * f);
        let v = Array2::from_shape_fn((x.nrows(), f), |(i, j)| {
            let mut best = j * n;
            for c in j * n + 1..(j + 1) * n {
                if x[[i, c]] > x[[i, best]] {
                    best = c;
                }
            }
            arg.push(best);
            x[[i, best]]
        });
        self.unary(a, v.into_dyn(), Op::GroupMaxPool(a, arg))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(self.values[loss.0].mapv(|_| F::one()));
        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => *e += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Expand(t, map) => {
                if self.needs[t.0] {
                    let mut gt = vec![F::zero(); map.n_params()];
                    map.transpose_apply(g.as_slice().expect("contiguous"), &mut gt);
                    let shape = self.values[t.0].shape().to_vec();
                    self.acc(
                        grads,
                        *t,
                        ArrayD::from_shape_vec(IxDyn(&shape), gt).expect("shape"),
                    );
                }
            }
            Op::Conv {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let xs = self.values[x.0].shape().to_vec();
                let ws = self.values[w.0].shape().to_vec();
                let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                // (B, O, Ho*Wo) -> (O, B*Ho*Wo)
                let gm = g
                    .view()
                    .into_shape_with_order((b, o, ho * wo))
                    .expect("shape")
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((o, b * ho * wo))
                    .expect("shape");
                if self.needs[w.0] {
                    let mut gw = Array2::<F>::zeros((o, c * k * k));
                    general_mat_mul(F::one(), &gm, &cols.t(), F::zero(), &mut gw);
                    self.acc(
                        grads,
                        *w,
                        gw.into_shape_with_order(IxDyn(&ws)).expect("shape"),
                    );
                }
                if self.needs[x.0] {
                    let wm = self.values[w.0]
                        .view()
                        .into_shape_with_order((o, c * k * k))
                        .expect("shape");
                    let mut gcols = Array2::<F>::zeros((c * k * k, b * ho * wo));
                    general_mat_mul(F::one(), &wm.t(), &gm, F::zero(), &mut gcols);
                    let gx = col2im(&gcols, (b, c, h, wd), k, *stride, *pad, (ho, wo));
                    self.acc(grads, *x, gx);
                }
            }
            Op::Blur(x, w) => self.acc(grads, *x, blur3(g, *w)),
            Op::ChannelBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.needs[bias.0] {
                    let mut gb = g.clone();
                    while gb.ndim() > 2 {
                        gb = gb.sum_axis(Axis(gb.ndim() - 1));
                    }
                    self.acc(grads, *bias, gb.sum_axis(Axis(0)));
                }
            }
            Op::MatMulT(x, w) => {
                let gv = as2(g);
                if self.needs[x.0] {
                    let wv = as2(&self.values[w.0]);
                    let mut gx = Array2::<F>::zeros((gv.nrows(), wv.ncols()));
                    general_mat_mul(F::one(), &gv, &wv, F::zero(), &mut gx);
                    self.acc(grads, *x, gx.into_dyn());
                }
                if self.needs[w.0] {
                    let xv = as2(&self.values[x.0]);
                    let mut gw = Array2::<F>::zeros((gv.ncols(), xv.ncols()));
                    general_mat_mul(F::one(), &gv.t(), &xv, F::zero(), &mut gw);
                    self.acc(grads, *w, gw.into_dyn());
                }
            }
            Op::Add(a, b) => {
                if self.needs[a.0] {
                    self.acc(grads, *a, reduce_to(g.clone(), self.values[a.0].shape()));
                }
                if self.needs[b.0] {
                    self.acc(grads, *b, reduce_to(g.clone(), self.values[b.0].shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs[a.0] {
                    self.acc(grads, *a, reduce_to(g.clone(), self.values[a.0].shape()));
                }
                if self.needs[b.0] {
                    self.acc(grads, *b, reduce_to(g.mapv(|x| -x), self.values[b.0].shape()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs[a.0] {
                    let ga = g * &self.values[b.0];
                    self.acc(grads, *a, reduce_to(ga, self.values[a.0].shape()));
                }
                if self.needs[b.0] {
                    let gb = g * &self.values[a.0];
                    self.acc(grads, *b, reduce_to(gb, self.values[b.0].shape()));
                }
            }
            Op::Neg(a) => self.acc(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => {
                let cf = F::of(*c);
                self.acc(grads, *a, g.mapv(|x| x * cf));
            }
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, g * out),
            Op::Log(a) => self.acc(grads, *a, g / &self.values[a.0]),
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(out).for_each(|d, &t| *d *= F::one() - t * t);
                self.acc(grads, *a, ga);
            }
            Op::Square(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&self.values[a.0])
                    .for_each(|d, &x| *d *= x + x);
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&self.values[a.0]).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero()
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&self.values[a.0])
                    .for_each(|d, &x| *d *= sigmoid(x));
                self.acc(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (F::of(*lo), F::of(*hi));
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&self.values[a.0]).for_each(|d, &x| {
                    if x < l || x > h {
                        *d = F::zero()
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::Minimum(a, b) => {
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(&self.values[a.0])
                    .and(&self.values[b.0])
                    .for_each(|da, db, &x, &y| {
                        if x <= y {
                            *db = F::zero()
                        } else {
                            *da = F::zero()
                        }
                    });
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SumAll(a) => {
                let s = g.iter().next().copied().expect("scalar");
                self.acc(grads, *a, ArrayD::from_elem(self.values[a.0].raw_dim(), s));
            }
            Op::MeanAll(a) => {
                let n = F::of(self.values[a.0].len() as f64);
                let s = g.iter().next().copied().expect("scalar") / n;
                self.acc(grads, *a, ArrayD::from_elem(self.values[a.0].raw_dim(), s));
            }
            Op::SumCols(a) => {
                let shape = self.values[a.0].raw_dim();
                let gb = g.broadcast(shape).expect("broadcast").to_owned();
                self.acc(grads, *a, gb);
            }
            Op::LogSumExpCols(a) => {
                let mut ga = self.values[a.0].clone();
                let o = as2(out);
                let gv = as2(g);
                for (i, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    let (m, gi) = (o[[i, 0]], gv[[i, 0]]);
                    row.mapv_inplace(|x| (x - m).exp() * gi);
                }
                self.acc(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let gv = as2(g);
                let mut start = 0;
                for p in parts {
                    let w = self.values[p.0].shape()[1];
                    if self.needs[p.0] {
                        let part = gv.slice(ndarray::s![.., start..start + w]).to_owned();
                        self.acc(grads, *p, part.into_dyn());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = ArrayD::<F>::zeros(self.values[a.0].raw_dim());
                ga.slice_axis_mut(Axis(1), (*start..*end).into()).assign(g);
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.values[a.0].raw_dim())
                    .expect("shape");
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = ArrayD::<F>::zeros(self.values[a.0].raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(0), src);
                    dst += &g.index_axis(Axis(0), r);
                }
                self.acc(grads, *a, ga);
            }
            Op::GroupMaxPool(a, arg) => {
                let mut ga = Array2::<F>::zeros(as2(&self.values[a.0]).raw_dim());
                let gv = as2(g);
                let f = gv.ncols();
                for (t, &c) in arg.iter().enumerate() {
                    let (i, j) = (t / f, t % f);
                    ga[[i, c]] += gv[[i, j]];
                }
                self.acc(grads, *a, ga.into_dyn());
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for a bound parameter list, in order.
    pub fn collect(&self, vars: &[Var]) -> Vec<Option<ArrayD<F>>> {
        vars.iter().map(|v| self.wrt(*v).cloned()).collect()
    }
}

#[inline]
pub(crate) fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn blur3<F: Float>(x: &ArrayD<F>, w: [f64; 3]) -> ArrayD<F> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "blur expects (B,C,H,W)");
    let (h, wd) = (s[2], s[3]);
    let k = [F::of(w[0]), F::of(w[1]), F::of(w[2])];
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); src.len()];
    // Horizontal neighbour sums of every row, then combine three rows at a time.
    let mut side = vec![F::zero(); h * wd];
    for (plane, dst) in src.chunks(h * wd).zip(out.chunks_mut(h * wd)) {
        for (row, srow) in plane.chunks(wd).zip(side.chunks_mut(wd)) {
            for j in 0..wd {
                let l = if j > 0 { row[j - 1] } else { F::zero() };
                let r = if j + 1 < wd { row[j + 1] } else { F::zero() };
                srow[j] = l + r;
            }
        }
        for i in 0..h {
            let d = &mut dst[i * wd..(i + 1) * wd];
            let x0 = &plane[i * wd..(i + 1) * wd];
            let s0 = &side[i * wd..(i + 1) * wd];
            for j in 0..wd {
                d[j] = k[0] * x0[j] + k[1] * s0[j];
            }
            for n in [i.wrapping_sub(1), i + 1] {
                if n >= h {
                    continue;
                }
                let xn = &plane[n * wd..(n + 1) * wd];
                let sn = &side[n * wd..(n + 1) * wd];
                for j in 0..wd {
                    d[j] += k[1] * xn[j] + k[2] * sn[j];
                }
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).expect("shape")
}

fn im2col<F: Float>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array2<F> {
    let ncol = b * ho * wo;
    let mut cols = vec![F::zero(); c * k * k * ncol];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        let base = (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[base + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncol), cols).expect("shape")
}

fn col2im<F: Float>(
    cols: &Array2<F>,
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> ArrayD<F> {
    let ncol = b * ho * wo;
    let src_all = cols.as_slice().expect("contiguous");
    let mut x = vec![F::zero(); b * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &src_all[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let plane = &mut x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                plane[ih as usize * w + iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), x).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|i| ((i as f64 + 1.0) * 0.618 + seed as f64 * 0.37).sin())
            .collect();
        Array::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = arr(&[2, 3, 7, 7], 1);
        let w = arr(&[4, 3, 3, 3], 2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, stride, pad);
            let out = g.value(y);
            let ho = (7 + 2 * pad - 3) / stride + 1;
            assert_eq!(out.shape(), &[2, 4, ho, ho]);
            for b in 0..2 {
                for o in 0..4 {
                    for i in 0..ho {
                        for j in 0..ho {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let r = (i * stride + ki) as isize - pad as isize;
                                        let q = (j * stride + kj) as isize - pad as isize;
                                        if r >= 0 && q >= 0 && r < 7 && q < 7 {
                                            acc += w[[o, c, ki, kj]]
                                                * x[[b, c, r as usize, q as usize]];
                                        }
                                    }
                                }
                            }
                            assert!((out[[b, o, i, j]] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn group_max_pool_and_logsumexp_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let p = g.group_max_pool(x, 4);
        assert_eq!(g.scalar(p), 4.0);
        let l = g.logsumexp_cols(x);
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp() + 4f64.exp()).ln();
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(ArrayD::from_elem(IxDyn(&[1, 1]), 3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 7.0);
    }
}
