//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass; [`Tape::backward`]
//! replays the record once in reverse and accumulates gradients for every
//! leaf created with [`Tape::leaf`]. The op set is exactly what the encoder
//! and the loss terms need: elementwise arithmetic, row/column broadcasts,
//! matmul, concat/slice, reductions, softmax (dense and segmented), the
//! transcendental maps used by constant-curvature geometry, and gather /
//! scatter for neighborhood aggregation.
//!
//! Conventions:
//! * shapes are matrices, scalars are 1x1;
//! * shape mismatches and domain violations (e.g. `log` of a nonpositive
//!   value) panic with the offending op named;
//! * `clamp` passes gradients unchanged strictly inside the interval and
//!   zeroes them at and beyond the boundaries;
//! * `abs` uses subgradient 0 at the origin;
//! * a tape can be differentiated once; a second `backward` is an error.

mod tensor;

pub use tensor::Tensor;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward called twice on the same tape")]
    TapeReused,
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite loss: first non-finite value produced by node {node} ({op})")]
    NonFiniteLoss { node: usize, op: &'static str },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Guarded denominators so that a zeroed clamp mask meets a large finite
/// number instead of `inf` (0 * inf would poison the whole gradient).
const DENOM_FLOOR: f64 = 1e-30;

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// (n x m) + (1 x m)
    AddRow(Var, Var),
    /// (n x m) - (1 x m)
    SubRow(Var, Var),
    /// (n x m) + (n x 1)
    AddCol(Var, Var),
    /// (n x m) - (n x 1)
    SubCol(Var, Var),
    /// (n x m) * (n x 1)
    MulCol(Var, Var),
    /// (n x m) / (n x 1)
    DivCol(Var, Var),
    /// tensor + scalar var
    AddSv(Var, Var),
    /// tensor - scalar var
    SubSv(Var, Var),
    /// tensor * scalar var
    MulSv(Var, Var),
    /// tensor / scalar var
    DivSv(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    PowConst(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Cosh(Var),
    Sinh(Var),
    Arcosh(Var),
    Cos(Var),
    Sin(Var),
    Arccos(Var),
    Tanh(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    GatherElems(Var, Rc<Vec<usize>>, Rc<Vec<usize>>),
    /// Softmax within contiguous segments of a column vector; offsets has
    /// n_segments + 1 entries.
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    RepeatRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::AddCol(..) => "add_col",
            Op::SubCol(..) => "sub_col",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::AddSv(..) => "add_scalar",
            Op::SubSv(..) => "sub_scalar",
            Op::MulSv(..) => "mul_scalar",
            Op::DivSv(..) => "div_scalar",
            Op::AddConst(_) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::PowConst(..) => "pow_const",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Cosh(..) => "cosh",
            Op::Sinh(..) => "sinh",
            Op::Arcosh(..) => "arcosh",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Arccos(..) => "arccos",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SumAll(..) => "sum_all",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::RepeatRows(..) => "repeat_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for the leaves of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros if the loss never touched it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    used: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_const(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of the forward value of `v` (for detached computations).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.as_scalar()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    // ---- elementwise arithmetic -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.add(y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.sub(y))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.mul(y))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x.zip(y, |p, q| p / q))
    }

    // ---- broadcasts -------------------------------------------------------------

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.broadcast_row(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    pub fn sub_row(&self, a: Var, row: Var) -> Var {
        self.broadcast_row(a, row, Op::SubRow(a, row), |x, y| x - y)
    }

    fn broadcast_row(&self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(rv.rows(), 1, "{}: rhs must be 1x{}", op.name(), av.cols());
            assert_eq!(rv.cols(), av.cols(), "{}: column count mismatch", op.name());
            let mut out = av.clone();
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    out.set(r, c, f(av.get(r, c), rv.get(0, c)));
                }
            }
            out
        };
        let needs = self.needs(a) || self.needs(row);
        self.push(value, op, needs)
    }

    pub fn add_col(&self, a: Var, col: Var) -> Var {
        self.broadcast_col(a, col, Op::AddCol(a, col), |x, y| x + y)
    }

    pub fn sub_col(&self, a: Var, col: Var) -> Var {
        self.broadcast_col(a, col, Op::SubCol(a, col), |x, y| x - y)
    }

    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.broadcast_col(a, col, Op::MulCol(a, col), |x, y| x * y)
    }

    pub fn div_col(&self, a: Var, col: Var) -> Var {
        self.broadcast_col(a, col, Op::DivCol(a, col), |x, y| x / y)
    }

    fn broadcast_col(&self, a: Var, col: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
            assert_eq!(cv.cols(), 1, "{}: rhs must be {}x1", op.name(), av.rows());
            assert_eq!(cv.rows(), av.rows(), "{}: row count mismatch", op.name());
            let mut out = av.clone();
            for r in 0..out.rows() {
                let k = cv.get(r, 0);
                for c in 0..out.cols() {
                    out.set(r, c, f(av.get(r, c), k));
                }
            }
            out
        };
        let needs = self.needs(a) || self.needs(col);
        self.push(value, op, needs)
    }

    fn scalar_broadcast(&self, a: Var, s: Var, op: Op, f: impl Fn(f64, f64) -> f64 + Sync) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            assert!(sv.is_scalar(), "{}: rhs must be 1x1", op.name());
            let k = sv.as_scalar();
            nodes[a.0].value.map(|x| f(x, k))
        };
        let needs = self.needs(a) || self.needs(s);
        self.push(value, op, needs)
    }

    pub fn add_sv(&self, a: Var, s: Var) -> Var {
        self.scalar_broadcast(a, s, Op::AddSv(a, s), |x, k| x + k)
    }

    pub fn sub_sv(&self, a: Var, s: Var) -> Var {
        self.scalar_broadcast(a, s, Op::SubSv(a, s), |x, k| x - k)
    }

    pub fn mul_sv(&self, a: Var, s: Var) -> Var {
        self.scalar_broadcast(a, s, Op::MulSv(a, s), |x, k| x * k)
    }

    pub fn div_sv(&self, a: Var, s: Var) -> Var {
        self.scalar_broadcast(a, s, Op::DivSv(a, s), |x, k| x / k)
    }

    pub fn add_const(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x.map(|v| v + k))
    }

    pub fn mul_const(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::MulConst(a, k), |x| x.map(|v| v * k))
    }

    /// `a^p` elementwise. Negative bases require an integral exponent.
    pub fn pow_const(&self, a: Var, p: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if p.fract() != 0.0 {
                if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
                    panic!("pow_const: negative base {bad} with fractional exponent {p}");
                }
            }
            x.map(|v| v.powf(p))
        };
        let needs = self.needs(a);
        self.push(value, Op::PowConst(a, p), needs)
    }

    // ---- unary maps -------------------------------------------------------------

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| x.map(|v| -v))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.map(f64::exp))
    }

    pub fn log(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                panic!("log: nonpositive input {bad}");
            }
            x.map(f64::ln)
        };
        let needs = self.needs(a);
        self.push(value, Op::Log(a), needs)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
                panic!("sqrt: negative input {bad}");
            }
            x.map(f64::sqrt)
        };
        let needs = self.needs(a);
        self.push(value, Op::Sqrt(a), needs)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.map(f64::abs))
    }

    pub fn cosh(&self, a: Var) -> Var {
        self.unary(a, Op::Cosh(a), |x| x.map(f64::cosh))
    }

    pub fn sinh(&self, a: Var) -> Var {
        self.unary(a, Op::Sinh(a), |x| x.map(f64::sinh))
    }

    pub fn arcosh(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(bad) = x.data().iter().find(|v| **v < 1.0) {
                panic!("arcosh: input {bad} below 1");
            }
            x.map(f64::acosh)
        };
        let needs = self.needs(a);
        self.push(value, Op::Arcosh(a), needs)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), |x| x.map(f64::cos))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.map(f64::sin))
    }

    pub fn arccos(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(bad) = x.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                panic!("arccos: input {bad} outside [-1, 1]");
            }
            x.map(f64::acos)
        };
        let needs = self.needs(a);
        self.push(value, Op::Arccos(a), needs)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.map(f64::tanh))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.map(softplus))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.map(|v| v.clamp(lo, hi)))
    }

    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    // ---- structure --------------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Matmul(a, b), |x, y| x.matmul(y))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), |x| x.transpose())
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Tensor::zeros(rows, total);
            let mut at = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.rows(), rows, "concat_cols: row count mismatch");
                for r in 0..rows {
                    for c in 0..t.cols() {
                        out.set(r, at + c, t.get(r, c));
                    }
                }
                at += t.cols();
            }
            out
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert!(start < end && end <= x.cols(), "slice_cols: bad range {start}..{end}");
            let mut out = Tensor::zeros(x.rows(), end - start);
            for r in 0..x.rows() {
                for c in start..end {
                    out.set(r, c - start, x.get(r, c));
                }
            }
            out
        };
        let needs = self.needs(a);
        self.push(value, Op::SliceCols(a, start, end), needs)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a), |x| Tensor::scalar(x.sum()))
    }

    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SumRows(a), |x| x.sum_rows())
    }

    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a), |x| x.sum_cols())
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SoftmaxRows(a), softmax_rows)
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(bad) = idx.iter().find(|i| **i >= x.rows()) {
                panic!("gather_rows: index {bad} out of range for {} rows", x.rows());
            }
            x.select_rows(&idx)
        };
        let needs = self.needs(a);
        self.push(value, Op::GatherRows(a, idx), needs)
    }

    /// Adds row `p` of the input into output row `idx[p]`.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert_eq!(x.rows(), idx.len(), "scatter_add_rows: index length mismatch");
            let mut out = Tensor::zeros(out_rows, x.cols());
            for (p, &i) in idx.iter().enumerate() {
                assert!(i < out_rows, "scatter_add_rows: index {i} out of range");
                for c in 0..x.cols() {
                    out.set(i, c, out.get(i, c) + x.get(p, c));
                }
            }
            out
        };
        let needs = self.needs(a);
        self.push(value, Op::ScatterAddRows(a, idx), needs)
    }

    /// Picks `a[rows[i], cols[i]]` into an nx1 column.
    pub fn gather_elems(&self, a: Var, rows: Rc<Vec<usize>>, cols: Rc<Vec<usize>>) -> Var {
        assert_eq!(rows.len(), cols.len(), "gather_elems: index length mismatch");
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = Vec::with_capacity(rows.len());
            for (&r, &c) in rows.iter().zip(cols.iter()) {
                assert!(r < x.rows() && c < x.cols(), "gather_elems: index ({r},{c}) out of range");
                out.push(x.get(r, c));
            }
            Tensor::column(out)
        };
        let needs = self.needs(a);
        self.push(value, Op::GatherElems(a, rows, cols), needs)
    }

    /// Softmax over contiguous segments of a column vector. `offsets` must
    /// start at 0, end at the vector length, and be nondecreasing.
    pub fn segment_softmax(&self, a: Var, offsets: Rc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert_eq!(x.cols(), 1, "segment_softmax: input must be a column");
            assert_eq!(*offsets.last().unwrap(), x.rows(), "segment_softmax: offsets must cover input");
            let mut out = x.clone();
            segment_softmax_inplace(out.data_mut(), &offsets);
            out
        };
        let needs = self.needs(a);
        self.push(value, Op::SegmentSoftmax(a, offsets), needs)
    }

    /// Tiles a 1xm row into an n x m matrix.
    pub fn repeat_rows(&self, a: Var, n: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert_eq!(x.rows(), 1, "repeat_rows: input must be a single row");
            let mut data = Vec::with_capacity(n * x.cols());
            for _ in 0..n {
                data.extend_from_slice(x.data());
            }
            Tensor::new(n, x.cols(), data)
        };
        let needs = self.needs(a);
        self.push(value, Op::RepeatRows(a), needs)
    }

    // ---- backward ---------------------------------------------------------------

    /// Accumulates gradients of a scalar `loss` into every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.used.replace(true) {
            return Err(DiffError::TapeReused);
        }
        let nodes = self.nodes.borrow();
        {
            let lv = &nodes[loss.0].value;
            if !lv.is_scalar() {
                return Err(DiffError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
            }
            if !lv.as_scalar().is_finite() {
                let first = nodes
                    .iter()
                    .enumerate()
                    .find(|(_, n)| !n.value.is_finite())
                    .map(|(i, n)| (i, n.op.name()))
                    .unwrap_or((loss.0, nodes[loss.0].op.name()));
                return Err(DiffError::NonFiniteLoss { node: first.0, op: first.1 });
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let keep_leaf = matches!(nodes[i].op, Op::Leaf);
            self.accumulate(&nodes, &mut grads, i, &g);
            if keep_leaf {
                grads[i] = Some(g);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut send = |v: Var, contrib: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(val(*b)));
                send(*b, g.mul(val(*a)));
            }
            Op::Div(a, b) => {
                send(*a, g.zip(val(*b), |gv, bv| gv / bv));
                let out = &nodes[i].value;
                send(*b, g.mul(out).zip(val(*b), |x, bv| -x / bv));
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                send(*r, g.sum_cols());
            }
            Op::SubRow(a, r) => {
                send(*a, g.clone());
                send(*r, g.sum_cols().scale(-1.0));
            }
            Op::AddCol(a, c) => {
                send(*a, g.clone());
                send(*c, g.sum_rows());
            }
            Op::SubCol(a, c) => {
                send(*a, g.clone());
                send(*c, g.sum_rows().scale(-1.0));
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let k = cv.get(r, 0);
                    for cc in 0..da.cols() {
                        da.set(r, cc, da.get(r, cc) * k);
                    }
                }
                send(*a, da);
                send(*c, g.mul(av).sum_rows());
            }
            Op::DivCol(a, c) => {
                let cv = val(*c);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let k = cv.get(r, 0);
                    for cc in 0..da.cols() {
                        da.set(r, cc, da.get(r, cc) / k);
                    }
                }
                send(*a, da);
                let out = &nodes[i].value;
                let mut dc = g.mul(out).sum_rows();
                for r in 0..dc.rows() {
                    dc.set(r, 0, -dc.get(r, 0) / cv.get(r, 0));
                }
                send(*c, dc);
            }
            Op::AddSv(a, s) => {
                send(*a, g.clone());
                send(*s, Tensor::scalar(g.sum()));
            }
            Op::SubSv(a, s) => {
                send(*a, g.clone());
                send(*s, Tensor::scalar(-g.sum()));
            }
            Op::MulSv(a, s) => {
                let k = val(*s).as_scalar();
                send(*a, g.scale(k));
                send(*s, Tensor::scalar(g.mul(val(*a)).sum()));
            }
            Op::DivSv(a, s) => {
                let k = val(*s).as_scalar();
                send(*a, g.scale(1.0 / k));
                let out = &nodes[i].value;
                send(*s, Tensor::scalar(-g.mul(out).sum() / k));
            }
            Op::AddConst(a) => send(*a, g.clone()),
            Op::MulConst(a, k) => send(*a, g.scale(*k)),
            Op::PowConst(a, p) => {
                let x = val(*a);
                send(*a, g.zip(x, |gv, xv| gv * p * xv.powf(p - 1.0)));
            }
            Op::Neg(a) => send(*a, g.scale(-1.0)),
            Op::Exp(a) => send(*a, g.mul(&nodes[i].value)),
            Op::Log(a) => send(*a, g.zip(val(*a), |gv, xv| gv / xv)),
            Op::Sqrt(a) => {
                let out = &nodes[i].value;
                send(*a, g.zip(out, |gv, ov| gv / (2.0 * ov.max(DENOM_FLOOR))));
            }
            Op::Abs(a) => send(*a, g.zip(val(*a), |gv, xv| gv * sign0(xv))),
            Op::Cosh(a) => send(*a, g.zip(val(*a), |gv, xv| gv * xv.sinh())),
            Op::Sinh(a) => send(*a, g.zip(val(*a), |gv, xv| gv * xv.cosh())),
            Op::Arcosh(a) => {
                send(*a, g.zip(val(*a), |gv, xv| gv / (xv * xv - 1.0).max(DENOM_FLOOR).sqrt()));
            }
            Op::Cos(a) => send(*a, g.zip(val(*a), |gv, xv| -gv * xv.sin())),
            Op::Sin(a) => send(*a, g.zip(val(*a), |gv, xv| gv * xv.cos())),
            Op::Arccos(a) => {
                send(*a, g.zip(val(*a), |gv, xv| -gv / (1.0 - xv * xv).max(DENOM_FLOOR).sqrt()));
            }
            Op::Tanh(a) => {
                let out = &nodes[i].value;
                send(*a, g.zip(out, |gv, ov| gv * (1.0 - ov * ov)));
            }
            Op::Softplus(a) => {
                send(*a, g.zip(val(*a), |gv, xv| gv * sigmoid(xv)));
            }
            Op::Clamp(a, lo, hi) => {
                send(*a, g.zip(val(*a), |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 }));
            }
            Op::Matmul(a, b) => {
                send(*a, g.matmul(&val(*b).transpose()));
                send(*b, val(*a).transpose().matmul(g));
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if nodes[p.0].needs_grad {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                dp.set(r, c, g.get(r, at + c));
                            }
                        }
                        send(*p, dp);
                    }
                    at += w;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, start + c, g.get(r, c));
                    }
                }
                send(*a, da);
            }
            Op::SumAll(a) => {
                let x = val(*a);
                send(*a, Tensor::full(x.rows(), x.cols(), g.as_scalar()));
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.get(r, 0);
                    for c in 0..x.cols() {
                        da.set(r, c, gv);
                    }
                }
                send(*a, da);
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        da.set(r, c, g.get(0, c));
                    }
                }
                send(*a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &nodes[i].value;
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                send(*a, da);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (p, &orig) in idx.iter().enumerate() {
                    for c in 0..x.cols() {
                        da.set(orig, c, da.get(orig, c) + g.get(p, c));
                    }
                }
                send(*a, da);
            }
            Op::ScatterAddRows(a, idx) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (p, &dest) in idx.iter().enumerate() {
                    for c in 0..x.cols() {
                        da.set(p, c, g.get(dest, c));
                    }
                }
                send(*a, da);
            }
            Op::GatherElems(a, rows, cols) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (p, (&r, &c)) in rows.iter().zip(cols.iter()).enumerate() {
                    da.set(r, c, da.get(r, c) + g.get(p, 0));
                }
                send(*a, da);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let y = &nodes[i].value;
                let mut da = Tensor::zeros(y.rows(), 1);
                for w in offsets.windows(2) {
                    let (s, e) = (w[0], w[1]);
                    let dot: f64 = (s..e).map(|r| g.get(r, 0) * y.get(r, 0)).sum();
                    for r in s..e {
                        da.set(r, 0, y.get(r, 0) * (g.get(r, 0) - dot));
                    }
                }
                send(*a, da);
            }
            Op::RepeatRows(a) => {
                send(*a, g.sum_cols());
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^-|x|): stable on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus` for positive targets, used to initialize
/// reparameterized positive parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs a positive target");
    y + (-(-y).exp_m1()).ln()
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * x.cols()..(r + 1) * x.cols()];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn segment_softmax_inplace(data: &mut [f64], offsets: &[usize]) {
    for w in offsets.windows(2) {
        let seg = &mut data[w[0]..w[1]];
        if seg.is_empty() {
            continue;
        }
        let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in seg.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in seg.iter_mut() {
            *v /= sum;
        }
    }
}
