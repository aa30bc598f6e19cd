//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Images are stored as
//! `(height * width, channels)` matrices in row-major pixel order, vectors as
//! `(1, n)` rows. The tape is single-threaded; independent tapes can live on
//! different threads.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SumRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Resample(usize, Arc<Resampler>),
    Im2col(usize, Arc<ConvGeometry>),
    Col2im(usize, Arc<ConvGeometry>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::SumRows(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Reshape(a)
            | Op::Resample(a, _)
            | Op::Im2col(a, _)
            | Op::Col2im(a, _) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.id, v.dim())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `var`, or zeros if it did not
    /// influence the output.
    pub fn get(&self, var: Var<'_>) -> Array2<f64> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(var.value().dim()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Array2<f64> {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Array2::zeros(var.value().dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => true,
            other => other.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: false });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Array2<f64>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records an input. Leaves are the only nodes that keep their gradient.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from a scalar `(1, 1)` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let dim = output.value().dim();
        assert_eq!(dim, (1, 1), "backward expects a scalar output");
        self.backward_with_seed(output, Array2::ones((1, 1)))
    }

    /// Back-propagates an arbitrary upstream gradient `seed` for `output`.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Array2<f64>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), seed.dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Array2<f64> { &nodes[i].value };
            macro_rules! acc {
                ($id:expr, $g:expr) => {{
                    let target: usize = $id;
                    if nodes[target].requires_grad {
                        accumulate(&mut grads, target, $g);
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    acc!(*b, g.clone());
                    acc!(*a, g);
                }
                Op::Sub(a, b) => {
                    acc!(*b, -&g);
                    acc!(*a, g);
                }
                Op::Mul(a, b) => {
                    acc!(*a, &g * val(*b));
                    acc!(*b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    acc!(*a, &g / bv);
                    acc!(*b, Zip::from(&g).and(val(*a)).and(bv).map_collect(|&g, &a, &b| -g * a / (b * b)));
                }
                Op::AddRow(a, r) => {
                    acc!(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc!(*a, g);
                }
                Op::MulRow(a, r) => {
                    acc!(*r, (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc!(*a, &g * val(*r));
                }
                Op::MulCol(a, c) => {
                    acc!(*c, (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc!(*a, &g * val(*c));
                }
                Op::Scale(a, k) => acc!(*a, g * *k),
                Op::AddScalar(a) => acc!(*a, g),
                Op::MatMul(a, b) => {
                    acc!(*a, g.dot(&val(*b).t()));
                    acc!(*b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc!(*a, g.t().as_standard_layout().into_owned()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Zip::from(&g).and(&**y).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc!(*a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope });
                    acc!(*a, ga);
                }
                Op::Exp(a) => acc!(*a, &g * &*node.value),
                Op::Log(a) => acc!(*a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(&*node.value).map_collect(|&g, &y| 0.5 * g / y);
                    acc!(*a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| 2.0 * g * x);
                    acc!(*a, ga);
                }
                Op::Abs(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc!(*a, ga);
                }
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    acc!(*a, Array2::from_elem(val(*a).dim(), gs));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let gs = g[[0, 0]] / av.len() as f64;
                    acc!(*a, Array2::from_elem(av.dim(), gs));
                }
                Op::SumCols(a) => {
                    let dim = val(*a).dim();
                    let ga = g.broadcast(dim).expect("sum-cols broadcast").to_owned();
                    acc!(*a, ga);
                }
                Op::SumRows(a) => {
                    let dim = val(*a).dim();
                    let ga = g.broadcast(dim).expect("sum-rows broadcast").to_owned();
                    acc!(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &*node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc!(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &*node.value;
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let soft = y.mapv(f64::exp);
                    let ga = &g - &(&soft * &gsum);
                    acc!(*a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc!(*a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc!(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).ncols();
                        let gp = g.slice(s![.., offset..offset + width]).to_owned();
                        offset += width;
                        acc!(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let height = val(p).nrows();
                        let gp = g.slice(s![offset..offset + height, ..]).to_owned();
                        offset += height;
                        acc!(p, gp);
                    }
                }
                Op::Reshape(a) => {
                    let dim = val(*a).dim();
                    let flat: Vec<f64> = g.as_standard_layout().iter().copied().collect();
                    acc!(*a, Array2::from_shape_vec(dim, flat).expect("reshape"));
                }
                Op::Resample(a, r) => acc!(*a, r.adjoint(&g)),
                Op::Im2col(a, geo) => acc!(*a, geo.col2im(&g)),
                Op::Col2im(a, geo) => acc!(*a, geo.im2col(&g)),
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array2<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a `(1, 1)` variable.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(self, op: Op, value: Array2<f64>) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "add shape mismatch");
        self.tape.push(&*a + &*b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "sub shape mismatch");
        self.tape.push(&*a - &*b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
        self.tape.push(&*a * &*b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "div shape mismatch");
        self.tape.push(&*a / &*b, Op::Div(self.id, other.id))
    }

    /// Adds a `(1, cols)` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!((1, a.ncols()), r.dim(), "add_row shape mismatch");
        self.tape.push(&*a + &*r, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a `(1, cols)` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!((1, a.ncols()), r.dim(), "mul_row shape mismatch");
        self.tape.push(&*a * &*r, Op::MulRow(self.id, row.id))
    }

    /// Multiplies every column elementwise by a `(rows, 1)` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (a, c) = (self.value(), col.value());
        assert_eq!((a.nrows(), 1), c.dim(), "mul_col shape mismatch");
        self.tape.push(&*a * &*c, Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * k);
        self.unary(Op::Scale(self.id, k), v)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x + k);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch {:?} x {:?}", a.dim(), b.dim());
        self.tape.push(a.dot(&*b), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().as_standard_layout().into_owned();
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.unary(Op::Tanh(self.id), v)
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(self) -> Var<'t> {
        self.leaky_relu(0.0) + self.abs().neg().exp().add_scalar(1.0).ln()
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { x * slope });
        self.unary(Op::LeakyRelu(self.id, slope), v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().mapv(f64::abs);
        self.unary(Op::Abs(self.id), v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let v = Array2::from_elem((1, 1), a.sum() / a.len() as f64);
        self.unary(Op::Mean(self.id), v)
    }

    /// Sums across columns, producing a `(rows, 1)` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(Op::SumCols(self.id), v)
    }

    /// Sums across rows, producing a `(1, cols)` row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(Op::SumRows(self.id), v)
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.unary(Op::SoftmaxRows(self.id), v)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let mut out = a.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.unary(Op::LogSoftmaxRows(self.id), out)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..start + len]).to_owned();
        self.unary(Op::SliceCols(self.id, start), v)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let v = self.value().slice(s![start..start + len, ..]).to_owned();
        self.unary(Op::SliceRows(self.id, start), v)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let flat: Vec<f64> = self.value().as_standard_layout().iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.unary(Op::Reshape(self.id), v)
    }

    pub fn resample(self, r: &Arc<Resampler>) -> Var<'t> {
        let v = r.apply(&self.value());
        self.unary(Op::Resample(self.id, r.clone()), v)
    }

    pub fn im2col(self, geo: &Arc<ConvGeometry>) -> Var<'t> {
        let v = geo.im2col(&self.value());
        self.unary(Op::Im2col(self.id, geo.clone()), v)
    }

    pub fn col2im(self, geo: &Arc<ConvGeometry>) -> Var<'t> {
        let v = geo.col2im(&self.value());
        self.unary(Op::Col2im(self.id, geo.clone()), v)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

/// Row-wise softmax of a plain array.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total: f64 = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

/// Fixed linear spatial resampling of `(h * w, c)` maps, applied per channel.
#[derive(Debug, Clone)]
pub struct Resampler {
    in_pixels: usize,
    out_pixels: usize,
    /// `(out_pixel, in_pixel, weight)` sorted by output pixel.
    taps: Vec<(u32, u32, f64)>,
}

impl Resampler {
    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn bilinear(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 2]> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    let frac = src - lo as f64;
                    [(lo, 1.0 - frac), (hi, frac)]
                })
                .collect()
        };
        let ys = axis(h, out_h);
        let xs = axis(w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w * 4);
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let out = (oy * out_w + ox) as u32;
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            taps.push((out, (iy * w + ix) as u32, wgt));
                        }
                    }
                }
            }
        }
        Self { in_pixels: h * w, out_pixels: out_h * out_w, taps }
    }

    /// Box average over `factor x factor` blocks. `h` and `w` must be divisible by `factor`.
    pub fn average_pool(h: usize, w: usize, factor: usize) -> Self {
        assert!(factor > 0 && h % factor == 0 && w % factor == 0, "pool factor must divide size");
        let (oh, ow) = (h / factor, w / factor);
        let wgt = 1.0 / (factor * factor) as f64;
        let mut taps = Vec::with_capacity(h * w);
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let iy = oy * factor + dy;
                        let ix = ox * factor + dx;
                        taps.push(((oy * ow + ox) as u32, (iy * w + ix) as u32, wgt));
                    }
                }
            }
        }
        Self { in_pixels: h * w, out_pixels: oh * ow, taps }
    }

    pub fn out_pixels(&self) -> usize {
        self.out_pixels
    }

    pub fn in_pixels(&self) -> usize {
        self.in_pixels
    }

    /// The adjoint map as a resampler of its own.
    pub fn transposed(&self) -> Self {
        let mut taps: Vec<_> = self.taps.iter().map(|&(o, i, w)| (i, o, w)).collect();
        taps.sort_by_key(|t| (t.0, t.1));
        Self { in_pixels: self.out_pixels, out_pixels: self.in_pixels, taps }
    }

    pub fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        assert_eq!(input.nrows(), self.in_pixels, "resampler input size");
        let c = input.ncols();
        let input = input.as_standard_layout();
        let src = input.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.out_pixels * c];
        for &(o, i, wgt) in &self.taps {
            let (o, i) = (o as usize * c, i as usize * c);
            for ch in 0..c {
                out[o + ch] += wgt * src[i + ch];
            }
        }
        Array2::from_shape_vec((self.out_pixels, c), out).expect("resample shape")
    }

    pub fn adjoint(&self, grad: &Array2<f64>) -> Array2<f64> {
        let c = grad.ncols();
        let grad = grad.as_standard_layout();
        let src = grad.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.in_pixels * c];
        for &(o, i, wgt) in &self.taps {
            let (o, i) = (o as usize * c, i as usize * c);
            for ch in 0..c {
                out[i + ch] += wgt * src[o + ch];
            }
        }
        Array2::from_shape_vec((self.in_pixels, c), out).expect("resample shape")
    }
}

/// Border handling for [`ConvGeometry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Patch extraction layout for `k x k` same-size convolutions on `(h * w, c)` maps.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(height: usize, width: usize, kernel: usize, padding: Padding) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self { height, width, kernel, padding }
    }

    fn source(&self, y: usize, x: usize, dy: usize, dx: usize) -> Option<usize> {
        let r = (self.kernel / 2) as isize;
        let sy = y as isize + dy as isize - r;
        let sx = x as isize + dx as isize - r;
        let (h, w) = (self.height as isize, self.width as isize);
        match self.padding {
            Padding::Zero => {
                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                    None
                } else {
                    Some((sy * w + sx) as usize)
                }
            }
            Padding::Replicate => Some((sy.clamp(0, h - 1) * w + sx.clamp(0, w - 1)) as usize),
        }
    }

    /// `(h*w, c)` -> `(h*w, k*k*c)` with column blocks ordered by kernel offset.
    pub fn im2col(&self, input: &Array2<f64>) -> Array2<f64> {
        let pixels = self.height * self.width;
        assert_eq!(input.nrows(), pixels, "im2col input size");
        let c = input.ncols();
        let kk = self.kernel * self.kernel;
        let input = input.as_standard_layout();
        let src = input.as_slice().expect("standard layout");
        let mut out = vec![0.0; pixels * kk * c];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                for dy in 0..self.kernel {
                    for dx in 0..self.kernel {
                        if let Some(q) = self.source(y, x, dy, dx) {
                            let n = dy * self.kernel + dx;
                            let dst = p * kk * c + n * c;
                            out[dst..dst + c].copy_from_slice(&src[q * c..q * c + c]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((pixels, kk * c), out).expect("im2col shape")
    }

    /// Adjoint of [`ConvGeometry::im2col`].
    pub fn col2im(&self, cols: &Array2<f64>) -> Array2<f64> {
        let pixels = self.height * self.width;
        let kk = self.kernel * self.kernel;
        assert_eq!(cols.nrows(), pixels, "col2im input size");
        let c = cols.ncols() / kk;
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut out = vec![0.0; pixels * c];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                for dy in 0..self.kernel {
                    for dx in 0..self.kernel {
                        if let Some(q) = self.source(y, x, dy, dx) {
                            let n = dy * self.kernel + dx;
                            let from = p * kk * c + n * c;
                            for ch in 0..c {
                                out[q * c + ch] += src[from + ch];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((pixels, c), out).expect("col2im shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_diff(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + h;
            let fp = f(&xp);
            xp[[r, c]] = orig - h;
            let fm = f(&xp);
            xp[[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn check(build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, x: Array2<f64>) {
        let eval = |v: &Array2<f64>| {
            let tape = Tape::new();
            let x = tape.leaf(v.clone());
            build(&tape, x).scalar_value()
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(&tape, xv);
        let grads = tape.backward(out);
        let analytic = grads.get(xv);
        let numeric = finite_diff(eval, &x, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_and_reductions() {
        check(|_, x| x.tanh().square().sum(), sample(3, 4, 1));
        check(|_, x| x.leaky_relu(0.2).exp().mean(), sample(3, 4, 2));
        check(|_, x| x.square().add_scalar(0.5).sqrt().ln().sum(), sample(2, 5, 3));
        check(|_, x| x.div(x.square().add_scalar(1.0)).sum_cols().square().sum(), sample(4, 3, 4));
        check(|_, x| x.sum_rows().abs().sum(), sample(4, 3, 5));
    }

    #[test]
    fn matrix_ops() {
        let w = sample(4, 3, 9);
        check(
            move |tape, x| {
                let w = tape.leaf(w.clone());
                let r = x.slice_rows(0, 1);
                x.matmul(w).mul_row(r.matmul(w)).t().square().sum()
            },
            sample(5, 4, 6),
        );
        check(
            |_, x| {
                let c = x.slice_cols(1, 1);
                let joined = Var::concat_cols(&[x.mul_col(c), x.slice_cols(0, 2)]);
                Var::concat_rows(&[joined, joined.scale(0.3)]).reshape(2, 25).square().sum()
            },
            sample(5, 3, 7),
        );
    }

    #[test]
    fn softmax_paths() {
        let weights = sample(3, 4, 11);
        let w2 = weights.clone();
        check(move |tape, x| x.softmax_rows().mul(tape.leaf(weights.clone())).sum(), sample(3, 4, 10));
        check(move |tape, x| x.log_softmax_rows().mul(tape.leaf(w2.clone())).sum(), sample(3, 4, 12));
    }

    #[test]
    fn softmax_rows_sum_to_one_even_when_saturated() {
        let s = softmax_rows(&array![[1e9, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((s[[1, 2]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_ops() {
        let up = Arc::new(Resampler::bilinear(3, 4, 6, 8));
        let pool = Arc::new(Resampler::average_pool(6, 8, 2));
        let geo = Arc::new(ConvGeometry::new(3, 4, 3, Padding::Zero));
        let geo_r = Arc::new(ConvGeometry::new(3, 4, 3, Padding::Replicate));
        let mix = sample(12, 2, 21);
        check(
            move |tape, x| {
                let y = x.resample(&up).square().resample(&pool);
                let z = y.im2col(&geo).matmul(tape.leaf(sample(18, 2, 22)));
                z.im2col(&geo_r).col2im(&geo).mul(tape.leaf(Array2::from_elem((12, 2), 0.7))).tanh().sum()
                    + z.mul(tape.leaf(mix.clone())).sum()
            },
            sample(12, 2, 20),
        );
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let r = Resampler::bilinear(4, 4, 4, 4);
        let x = sample(16, 3, 30);
        let y = r.apply(&x);
        assert!((&y - &x).iter().all(|d| d.abs() < 1e-15));
        let up = Resampler::bilinear(4, 4, 16, 16);
        let c = up.apply(&Array2::from_elem((16, 1), 0.7));
        assert!(c.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geo = ConvGeometry::new(4, 5, 3, Padding::Replicate);
        let x = sample(20, 2, 40);
        let y = sample(20, 18, 41);
        let lhs = (&geo.im2col(&x) * &y).sum();
        let rhs = (&x * &geo.col2im(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
