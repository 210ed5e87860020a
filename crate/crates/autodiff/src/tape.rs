use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TapeError};
use crate::matrix::{gemm, Matrix};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn tape_id(self) -> u64 {
        self.tape
    }
}

/// Elementwise primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    /// `exp(x) - 1`, accurate near zero.
    Expm1,
    Log,
    Recip,
    Sqrt,
    Square,
    Abs,
    Tanh,
    Relu,
    LeakyRelu(f64),
    /// `ln(1 + exp(k x)) / k`.
    Softplus(f64),
    /// `1 / (1 + exp(-k x))`.
    Sigmoid(f64),
    Scale(f64),
    Offset(f64),
    /// `max(x, c)`; the gradient is blocked where the clamp is active.
    ClampMin(f64),
}

impl UnaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Expm1 => "expm1",
            UnaryOp::Log => "log",
            UnaryOp::Recip => "recip",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Abs => "abs",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::Softplus(_) => "softplus",
            UnaryOp::Sigmoid(_) => "sigmoid",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Offset(_) => "offset",
            UnaryOp::ClampMin(_) => "clamp_min",
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Expm1 => x.exp_m1(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Recip => 1.0 / x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            UnaryOp::Softplus(k) => softplus(k * x) / k,
            UnaryOp::Sigmoid(k) => sigmoid(k * x),
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Offset(c) => x + c,
            UnaryOp::ClampMin(c) => x.max(c),
        }
    }

    /// dy/dx given the input `x` and the recorded output `y`.
    #[inline]
    pub fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Exp => y,
            UnaryOp::Expm1 => y + 1.0,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Recip => -y * y,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            UnaryOp::Softplus(k) => sigmoid(k * x),
            UnaryOp::Sigmoid(k) => k * y * (1.0 - y),
            UnaryOp::Scale(c) => c,
            UnaryOp::Offset(_) => 1.0,
            UnaryOp::ClampMin(c) => {
                if x >= c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for UnaryOp {
    type Err = TapeError;

    /// Parses activation-style names such as `relu`, `tanh`, `softplus`
    /// (sharpness 1) or `softplus100` (sharpness 100).
    fn from_str(s: &str) -> Result<Self> {
        let op = match s {
            "neg" => UnaryOp::Neg,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "expm1" => UnaryOp::Expm1,
            "log" => UnaryOp::Log,
            "recip" => UnaryOp::Recip,
            "sqrt" => UnaryOp::Sqrt,
            "square" => UnaryOp::Square,
            "abs" => UnaryOp::Abs,
            "tanh" => UnaryOp::Tanh,
            "relu" => UnaryOp::Relu,
            "leaky_relu" => UnaryOp::LeakyRelu(0.01),
            "softplus" => UnaryOp::Softplus(1.0),
            "sigmoid" => UnaryOp::Sigmoid(1.0),
            _ => {
                let sharpness = s
                    .strip_prefix("softplus")
                    .and_then(|k| k.parse::<f64>().ok())
                    .filter(|k| *k > 0.0 && k.is_finite());
                match sharpness {
                    Some(k) => UnaryOp::Softplus(k),
                    None => return Err(TapeError::Unsupported(s.to_string())),
                }
            }
        };
        Ok(op)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise binary primitives with row-tiling / column broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Ties resolve to the left operand.
    Min,
    /// Ties resolve to the left operand.
    Max,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Min => "min",
            BinaryOp::Max => "max",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            BinaryOp::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives (d/da, d/db).
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
            BinaryOp::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinaryOp::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

/// A user-supplied primitive with an explicit vector-Jacobian product.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, x: &Matrix) -> Matrix;
    /// Gradient wrt `x` given the upstream gradient of the output `y`.
    fn backward(&self, x: &Matrix, y: &Matrix, grad_y: &Matrix) -> Matrix;
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter,
    Unary(usize, UnaryOp),
    Binary(usize, usize, BinaryOp),
    Broadcast(usize),
    MatMul(usize, usize),
    Sum(usize),
    RowSum(usize),
    ColSum(usize),
    RowMin {
        x: usize,
        arg: Vec<usize>,
    },
    Gather {
        x: usize,
        cols: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    SumTiles {
        x: usize,
        tiles: usize,
    },
    SumRowGroups {
        x: usize,
        group: usize,
    },
    CumSumExclusive(usize),
    SoftmaxRows(usize),
    LaplaceDensity {
        sdf: usize,
        beta: usize,
        mirrored: bool,
    },
    Custom(usize, Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Unary(_, u) => u.name(),
            Op::Binary(_, _, b) => b.name(),
            Op::Broadcast(_) => "broadcast",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::ColSum(_) => "col_sum",
            Op::RowMin { .. } => "row_min",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::SumTiles { .. } => "sum_tiles",
            Op::SumRowGroups { .. } => "sum_row_groups",
            Op::CumSumExclusive(_) => "cumsum_exclusive",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LaplaceDensity { .. } => "laplace_density",
            Op::Custom(..) => "custom",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Unary(x, _)
            | Op::Broadcast(x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::ColSum(x)
            | Op::RowMin { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape(x)
            | Op::SumTiles { x, .. }
            | Op::SumRowGroups { x, .. }
            | Op::CumSumExclusive(x)
            | Op::SoftmaxRows(x)
            | Op::Custom(x, _) => vec![*x],
            Op::Binary(a, b, _) | Op::MatMul(a, b) => vec![*a, *b],
            Op::LaplaceDensity { sdf, beta, .. } => vec![*sdf, *beta],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Define-by-run record of primitive operations over [`Matrix`] values.
///
/// Nodes are appended in evaluation order, so inputs always precede the nodes
/// that consume them. A tape is single-writer; build one per batch.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of a scalar wrt the parameter leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn tiled_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let rows = if a.0 == b.0 || (b.0 > 0 && a.0.is_multiple_of(b.0)) {
        a.0
    } else if a.0 > 0 && b.0.is_multiple_of(a.0) {
        b.0
    } else {
        return None;
    };
    let cols = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        return None;
    };
    Some((rows, cols))
}

fn row_min_with_arg(x: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = Matrix::zeros(x.rows(), 1);
    let mut arg = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let mut best = 0;
        for (c, v) in row.iter().enumerate().skip(1) {
            if *v < row[best] {
                best = c;
            }
        }
        out.set(r, 0, row[best]);
        arg.push(best);
    }
    (out, arg)
}

#[inline]
fn laplace_density(d: f64, beta: f64, mirrored: bool) -> f64 {
    let d = if mirrored { d } else { -d };
    if d <= 0.0 {
        (1.0 - 0.5 * (d / beta).exp()) / beta
    } else {
        0.5 * (-d / beta).exp() / beta
    }
}

/// (dσ/dd, dσ/dβ) for [`laplace_density`].
#[inline]
fn laplace_density_partials(d: f64, beta: f64, mirrored: bool) -> (f64, f64) {
    let sign = if mirrored { 1.0 } else { -1.0 };
    let d = sign * d;
    let b2 = beta * beta;
    let (dd, db) = if d <= 0.0 {
        let s = (d / beta).exp();
        (
            -0.5 * s / b2,
            -(1.0 - 0.5 * s) / b2 + 0.5 * s * d / (b2 * beta),
        )
    } else {
        let s = (-d / beta).exp();
        (-0.5 * s / b2, 0.5 * s * d / (b2 * beta) - 0.5 * s / b2)
    };
    (sign * dd, db)
}

/// Ordered rows map for a tiled operand.
#[inline]
fn tiled_index(r: usize, c: usize, shape: (usize, usize)) -> usize {
    let rr = r % shape.0;
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

fn broadcast_to(x: &Matrix, rows: usize, cols: usize) -> Matrix {
    if x.shape() == (rows, cols) {
        return x.clone();
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, x.data()[tiled_index(r, c, x.shape())]);
        }
    }
    out
}

/// Sums `g` down to `shape` (inverse of row tiling / column broadcast).
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    let data = out.data_mut();
    for r in 0..g.rows() {
        let row = g.row_slice(r);
        if shape.1 == 1 {
            let i = tiled_index(r, 0, shape);
            data[i] += row.iter().sum::<f64>();
        } else {
            let base = (r % shape.0) * shape.1;
            for (c, v) in row.iter().enumerate() {
                data[base + c] += v;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded value of `v`.
    ///
    /// Panics if `v` was created on a different tape.
    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(
            v.tape, self.id,
            "variable from tape {} used on tape {}",
            v.tape, self.id
        );
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Argmin columns recorded by a [`Tape::row_min`] node.
    pub fn row_argmin(&self, v: Var) -> Option<&[usize]> {
        assert_eq!(v.tape, self.id);
        match &self.nodes[v.index].op {
            Op::RowMin { arg, .. } => Some(arg),
            _ => None,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TapeError::ForeignVariable {
                expected: self.id,
                found: v.tape,
            });
        }
        debug_assert!(v.index < self.nodes.len());
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<Var> {
        let index = self.nodes.len();
        if value.first_non_finite().is_some() {
            return Err(TapeError::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        let needs_grad = match &op {
            Op::Parameter => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    /// Records a leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Matrix) -> Result<Var> {
        self.push(Op::Parameter, value)
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.val(xi).map(|v| op.apply(v));
        self.push(Op::Unary(xi, op), value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Neg)
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Cos)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Exp)
    }
    pub fn expm1(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Expm1)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Log)
    }
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Recip)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Square)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Abs)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Relu)
    }
    pub fn softplus(&mut self, x: Var, sharpness: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Softplus(sharpness))
    }
    pub fn sigmoid(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid(scale))
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Scale(c))
    }
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Offset(c))
    }
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryOp::ClampMin(c))
    }

    /// Elementwise binary op. The operands may differ in shape when one of
    /// them tiles the other: its row count divides the other's (a single row
    /// broadcasts) and its column count is equal or one.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        let shape = tiled_shape(sa, sb).ok_or(TapeError::ShapeMismatch {
            op: op.name(),
            lhs: sa,
            rhs: sb,
        })?;
        let value = binary_forward(self.val(ai), self.val(bi), shape, op);
        self.push(Op::Binary(ai, bi, op), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Min)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Max)
    }

    /// Explicit broadcast of `x` to `rows×cols` under the tiling rule of [`Tape::binary`].
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.val(xi).shape();
        if tiled_shape(s, (rows, cols)) != Some((rows, cols)) {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast",
                lhs: s,
                rhs: (rows, cols),
            });
        }
        let value = broadcast_to(self.val(xi), rows, cols);
        self.push(Op::Broadcast(xi), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        if sa.1 != sb.0 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = gemm(self.val(ai), false, self.val(bi), false);
        self.push(Op::MatMul(ai, bi), value)
    }

    /// Sum of all entries, as a `1×1` value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Matrix::scalar(self.val(xi).sum());
        self.push(Op::Sum(xi), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        let mut value = Matrix::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            value.set(r, 0, xv.row_slice(r).iter().sum());
        }
        self.push(Op::RowSum(xi), value)
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        let mut value = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (acc, v) in value.data_mut().iter_mut().zip(xv.row_slice(r)) {
                *acc += v;
            }
        }
        self.push(Op::ColSum(xi), value)
    }

    /// Per-row minimum (`n×1`). Ties resolve to the lowest column, which also
    /// receives the whole gradient.
    pub fn row_min(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        if self.val(xi).cols() == 0 {
            return Err(TapeError::InvalidArgument {
                op: "row_min",
                reason: "no columns".into(),
            });
        }
        let (value, arg) = row_min_with_arg(self.val(xi));
        self.push(Op::RowMin { x: xi, arg }, value)
    }

    /// Picks `x[r, cols[r]]` for every row (`n×1`).
    pub fn gather(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if cols.len() != xv.rows() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(TapeError::InvalidArgument {
                op: "gather",
                reason: format!("{} indices for a {:?} matrix", cols.len(), xv.shape()),
            });
        }
        let value = Matrix::from_vec(
            xv.rows(),
            1,
            cols.iter()
                .enumerate()
                .map(|(r, &c)| xv.get(r, c))
                .collect(),
        );
        self.push(Op::Gather { x: xi, cols }, value)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if start > end || end > xv.cols() {
            return Err(TapeError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{end} on {:?}", xv.shape()),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row_slice(r)[start..end]);
        }
        let value = Matrix::from_vec(xv.rows(), w, data);
        self.push(Op::SliceCols { x: xi, start, end }, value)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if start > end || end > xv.rows() {
            return Err(TapeError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} on {:?}", xv.shape()),
            });
        }
        let c = xv.cols();
        let value = Matrix::from_vec(end - start, c, xv.data()[start * c..end * c].to_vec());
        self.push(Op::SliceRows { x: xi, start, end }, value)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let rows = idx.first().map_or(0, |&i| self.val(i).rows());
        for &i in &idx {
            if self.val(i).rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.val(idx[0]).shape(),
                    rhs: self.val(i).shape(),
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row_slice(r));
            }
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(Op::ConcatCols(idx), value)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let cols = idx.first().map_or(0, |&i| self.val(i).cols());
        for &i in &idx {
            if self.val(i).cols() != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.val(idx[0]).shape(),
                    rhs: self.val(i).shape(),
                });
            }
        }
        let rows: usize = idx.iter().map(|&i| self.val(i).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &i in &idx {
            data.extend_from_slice(self.val(i).data());
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(idx), value)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if xv.len() != rows * cols {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                lhs: xv.shape(),
                rhs: (rows, cols),
            });
        }
        let value = Matrix::from_vec(rows, cols, xv.data().to_vec());
        self.push(Op::Reshape(xi), value)
    }

    /// Splits the rows into `tiles` equal consecutive blocks and sums them.
    pub fn sum_tiles(&mut self, x: Var, tiles: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if tiles == 0 || !xv.rows().is_multiple_of(tiles) {
            return Err(TapeError::InvalidArgument {
                op: "sum_tiles",
                reason: format!("{} rows not divisible into {tiles} tiles", xv.rows()),
            });
        }
        let block = xv.rows() / tiles * xv.cols();
        let mut data = xv.data()[..block].to_vec();
        for t in 1..tiles {
            for (acc, v) in data.iter_mut().zip(&xv.data()[t * block..(t + 1) * block]) {
                *acc += v;
            }
        }
        let value = Matrix::from_vec(xv.rows() / tiles, xv.cols(), data);
        self.push(Op::SumTiles { x: xi, tiles }, value)
    }

    /// Sums consecutive groups of `group` rows.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(TapeError::InvalidArgument {
                op: "sum_row_groups",
                reason: format!("{} rows not divisible into groups of {group}", xv.rows()),
            });
        }
        let c = xv.cols();
        let mut value = Matrix::zeros(xv.rows() / group, c);
        for r in 0..xv.rows() {
            let dst = r / group;
            for (j, v) in xv.row_slice(r).iter().enumerate() {
                value.data_mut()[dst * c + j] += v;
            }
        }
        self.push(Op::SumRowGroups { x: xi, group }, value)
    }

    /// `y[r, s] = Σ_{k<s} x[r, k]` within each row.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = cumsum_exclusive(self.val(xi));
        self.push(Op::CumSumExclusive(xi), value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = softmax_rows(self.val(xi));
        self.push(Op::SoftmaxRows(xi), value)
    }

    /// Laplace-CDF density of signed distances with a learnable `1×1` scale.
    ///
    /// With `mirrored` (the default used by the renderer) density is high
    /// inside (negative distance): `(1 - exp(d/β)/2)/β` for `d ≤ 0` and
    /// `exp(-d/β)/(2β)` otherwise. Without it the branches are applied to `-d`.
    pub fn laplace_density(&mut self, sdf: Var, beta: Var, mirrored: bool) -> Result<Var> {
        let si = self.check(sdf)?;
        let bi = self.check(beta)?;
        let bv = self.val(bi);
        if bv.shape() != (1, 1) || bv.item() <= 0.0 {
            return Err(TapeError::InvalidArgument {
                op: "laplace_density",
                reason: format!("beta must be a positive 1x1 value, got {bv:?}"),
            });
        }
        let b = bv.item();
        let value = self.val(si).map(|d| laplace_density(d, b, mirrored));
        self.push(
            Op::LaplaceDensity {
                sdf: si,
                beta: bi,
                mirrored,
            },
            value,
        )
    }

    pub fn custom(&mut self, x: Var, op: Arc<dyn CustomOp>) -> Result<Var> {
        let xi = self.check(x)?;
        let value = op.forward(self.val(xi));
        self.push(Op::Custom(xi, op), value)
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks the
    /// result against the cached value bit for bit.
    pub fn replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                Op::Constant | Op::Parameter => continue,
                Op::Unary(x, u) => self.val(*x).map(|v| u.apply(v)),
                Op::Binary(a, b, op) => {
                    binary_forward(self.val(*a), self.val(*b), node.value.shape(), *op)
                }
                Op::Broadcast(x) => {
                    broadcast_to(self.val(*x), node.value.rows(), node.value.cols())
                }
                Op::MatMul(a, b) => gemm(self.val(*a), false, self.val(*b), false),
                Op::Sum(x) => Matrix::scalar(self.val(*x).sum()),
                Op::RowSum(x) => {
                    let xv = self.val(*x);
                    Matrix::from_vec(
                        xv.rows(),
                        1,
                        (0..xv.rows())
                            .map(|r| xv.row_slice(r).iter().sum())
                            .collect(),
                    )
                }
                Op::ColSum(x) => {
                    let xv = self.val(*x);
                    let mut m = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        for (acc, v) in m.data_mut().iter_mut().zip(xv.row_slice(r)) {
                            *acc += v;
                        }
                    }
                    m
                }
                Op::RowMin { x, arg } => {
                    let (m, a) = row_min_with_arg(self.val(*x));
                    if &a != arg {
                        return Err(TapeError::ReplayMismatch { node: i });
                    }
                    m
                }
                Op::Gather { x, cols } => {
                    let xv = self.val(*x);
                    Matrix::from_vec(
                        cols.len(),
                        1,
                        cols.iter()
                            .enumerate()
                            .map(|(r, &c)| xv.get(r, c))
                            .collect(),
                    )
                }
                Op::SliceCols { x, start, end } => {
                    let xv = self.val(*x);
                    let mut data = Vec::new();
                    for r in 0..xv.rows() {
                        data.extend_from_slice(&xv.row_slice(r)[*start..*end]);
                    }
                    Matrix::from_vec(xv.rows(), end - start, data)
                }
                Op::SliceRows { x, start, end } => {
                    let xv = self.val(*x);
                    let c = xv.cols();
                    Matrix::from_vec(end - start, c, xv.data()[start * c..end * c].to_vec())
                }
                Op::ConcatCols(xs) => {
                    let rows = node.value.rows();
                    let mut data = Vec::new();
                    for r in 0..rows {
                        for &x in xs {
                            data.extend_from_slice(self.val(x).row_slice(r));
                        }
                    }
                    Matrix::from_vec(rows, node.value.cols(), data)
                }
                Op::ConcatRows(xs) => {
                    let mut data = Vec::new();
                    for &x in xs {
                        data.extend_from_slice(self.val(x).data());
                    }
                    Matrix::from_vec(node.value.rows(), node.value.cols(), data)
                }
                Op::Reshape(x) => Matrix::from_vec(
                    node.value.rows(),
                    node.value.cols(),
                    self.val(*x).data().to_vec(),
                ),
                Op::SumTiles { x, tiles } => {
                    let xv = self.val(*x);
                    let block = xv.rows() / tiles * xv.cols();
                    let mut data = xv.data()[..block].to_vec();
                    for t in 1..*tiles {
                        for (acc, v) in data.iter_mut().zip(&xv.data()[t * block..(t + 1) * block])
                        {
                            *acc += v;
                        }
                    }
                    Matrix::from_vec(node.value.rows(), node.value.cols(), data)
                }
                Op::SumRowGroups { x, group } => {
                    let xv = self.val(*x);
                    let c = xv.cols();
                    let mut m = Matrix::zeros(xv.rows() / group, c);
                    for r in 0..xv.rows() {
                        for (j, v) in xv.row_slice(r).iter().enumerate() {
                            m.data_mut()[(r / group) * c + j] += v;
                        }
                    }
                    m
                }
                Op::CumSumExclusive(x) => cumsum_exclusive(self.val(*x)),
                Op::SoftmaxRows(x) => softmax_rows(self.val(*x)),
                Op::LaplaceDensity {
                    sdf,
                    beta,
                    mirrored,
                } => {
                    let b = self.val(*beta).item();
                    self.val(*sdf).map(|d| laplace_density(d, b, *mirrored))
                }
                Op::Custom(x, op) => op.forward(self.val(*x)),
            };
            let same = recomputed.shape() == node.value.shape()
                && recomputed
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(TapeError::ReplayMismatch { node: i });
            }
        }
        Ok(())
    }

    /// Reverse pass from a `1×1` output. Returns gradients for every
    /// parameter leaf the output depends on.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let (rows, cols) = self.val(out).shape();
        if (rows, cols) != (1, 1) {
            return Err(TapeError::NotScalar { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out + 1];
        let mut result: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[out].needs_grad {
            grads[out] = Some(Matrix::scalar(1.0));
        }
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Parameter = node.op {
                if g.first_non_finite().is_some() {
                    return Err(TapeError::NonFiniteGradient { node: i });
                }
                result[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads: result,
        })
    }

    fn backward_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, m: Matrix| match &mut grads[j] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::Unary(x, u) => {
                let xv = self.val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(y.data()))
                    .map(|(gi, (xi, yi))| gi * u.derivative(*xi, *yi))
                    .collect();
                acc(*x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::Binary(a, b, op) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (na, nb) = (needs(*a), needs(*b));
                let mut ga = if na {
                    Some(Matrix::zeros(sa.0, sa.1))
                } else {
                    None
                };
                let mut gb = if nb {
                    Some(Matrix::zeros(sb.0, sb.1))
                } else {
                    None
                };
                if sa == sb {
                    for k in 0..g.len() {
                        let (pa, pb) = op.partials(av.data()[k], bv.data()[k]);
                        if let Some(ga) = ga.as_mut() {
                            ga.data_mut()[k] += g.data()[k] * pa;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb.data_mut()[k] += g.data()[k] * pb;
                        }
                    }
                } else {
                    for r in 0..y.rows() {
                        for c in 0..y.cols() {
                            let ia = tiled_index(r, c, sa);
                            let ib = tiled_index(r, c, sb);
                            let gk = g.get(r, c);
                            let (pa, pb) = op.partials(av.data()[ia], bv.data()[ib]);
                            if let Some(ga) = ga.as_mut() {
                                ga.data_mut()[ia] += gk * pa;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb.data_mut()[ib] += gk * pb;
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Broadcast(x) => acc(*x, reduce_to(g, self.val(*x).shape())),
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, gemm(g, false, self.val(*b), true));
                }
                if needs(*b) {
                    acc(*b, gemm(self.val(*a), true, g, false));
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                acc(*x, Matrix::filled(r, c, g.item()));
            }
            Op::RowSum(x) => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    m.row_slice_mut(row).fill(g.get(row, 0));
                }
                acc(*x, m);
            }
            Op::ColSum(x) => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    m.row_slice_mut(row).copy_from_slice(g.data());
                }
                acc(*x, m);
            }
            Op::RowMin { x, arg: cols } | Op::Gather { x, cols } => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for (row, &col) in cols.iter().enumerate() {
                    m.set(row, col, g.get(row, 0));
                }
                acc(*x, m);
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    m.row_slice_mut(row)[*start..*end].copy_from_slice(g.row_slice(row));
                }
                acc(*x, m);
            }
            Op::SliceRows { x, start, end } => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                m.data_mut()[start * c..end * c].copy_from_slice(g.data());
                acc(*x, m);
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.val(x).shape();
                    if needs(x) {
                        let mut m = Matrix::zeros(r, c);
                        for row in 0..r {
                            m.row_slice_mut(row)
                                .copy_from_slice(&g.row_slice(row)[offset..offset + c]);
                        }
                        acc(x, m);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.val(x).len();
                    if needs(x) {
                        let (r, c) = self.val(x).shape();
                        acc(
                            x,
                            Matrix::from_vec(r, c, g.data()[offset..offset + n].to_vec()),
                        );
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = self.val(*x).shape();
                acc(*x, Matrix::from_vec(r, c, g.data().to_vec()));
            }
            Op::SumTiles { x, tiles } => {
                let (r, c) = self.val(*x).shape();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..*tiles {
                    data.extend_from_slice(g.data());
                }
                acc(*x, Matrix::from_vec(r, c, data));
            }
            Op::SumRowGroups { x, group } => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    m.row_slice_mut(row)
                        .copy_from_slice(g.row_slice(row / group));
                }
                acc(*x, m);
            }
            Op::CumSumExclusive(x) => {
                let (r, c) = self.val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    let gr = g.row_slice(row);
                    let mr = m.row_slice_mut(row);
                    let mut running = 0.0;
                    for k in (0..c).rev() {
                        mr[k] = running;
                        running += gr[k];
                    }
                }
                acc(*x, m);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = y.shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    let yr = y.row_slice(row);
                    let gr = g.row_slice(row);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, out) in m.row_slice_mut(row).iter_mut().enumerate() {
                        *out = yr[k] * (gr[k] - dot);
                    }
                }
                acc(*x, m);
            }
            Op::LaplaceDensity {
                sdf,
                beta,
                mirrored,
            } => {
                let b = self.val(*beta).item();
                let dv = self.val(*sdf);
                let mut gd = Matrix::zeros(dv.rows(), dv.cols());
                let mut gb = 0.0;
                for k in 0..dv.len() {
                    let (pd, pb) = laplace_density_partials(dv.data()[k], b, *mirrored);
                    gd.data_mut()[k] = g.data()[k] * pd;
                    gb += g.data()[k] * pb;
                }
                if needs(*sdf) {
                    acc(*sdf, gd);
                }
                if needs(*beta) {
                    acc(*beta, Matrix::scalar(gb));
                }
            }
            Op::Custom(x, op) => acc(*x, op.backward(self.val(*x), y, g)),
        }
    }
}

fn binary_forward(a: &Matrix, b: &Matrix, shape: (usize, usize), op: BinaryOp) -> Matrix {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| op.apply(*x, *y))
            .collect();
        return Matrix::from_vec(shape.0, shape.1, data);
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    let (sa, sb) = (a.shape(), b.shape());
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            let v = op.apply(
                a.data()[tiled_index(r, c, sa)],
                b.data()[tiled_index(r, c, sb)],
            );
            out.set(r, c, v);
        }
    }
    out
}

fn cumsum_exclusive(x: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        let mr = m.row_slice_mut(r);
        let mut running = 0.0;
        for k in 0..xr.len() {
            mr[k] = running;
            running += xr[k];
        }
    }
    m
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mr = m.row_slice_mut(r);
        let mut total = 0.0;
        for (o, v) in mr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in mr.iter_mut() {
            *o /= total;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let v = t.parameter(Matrix::scalar(x)).unwrap();
        let y = f(&mut t, v).unwrap();
        let g = t.backward(y).unwrap();
        (t.value(y).item(), g.get(v).map_or(0.0, |m| m.item()))
    }

    #[test]
    fn min_tie_sends_gradient_to_left_operand() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::scalar(0.0)).unwrap();
        let b = t.parameter(Matrix::scalar(0.0)).unwrap();
        let m = t.min(a, b).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 1.0);
        assert_eq!(g.get(b).unwrap().item(), 0.0);
    }

    #[test]
    fn row_min_tie_picks_lowest_column() {
        let mut t = Tape::new();
        let x = t
            .parameter(Matrix::from_rows(&[[0.0, 0.0, 1.0], [2.0, -1.0, -1.0]]))
            .unwrap();
        let m = t.row_min(x).unwrap();
        assert_eq!(t.row_argmin(m).unwrap(), &[0, 1]);
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_output_has_no_parameter_gradient() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::row(&[1.0, 2.0])).unwrap();
        let c = t.constant(Matrix::scalar(3.0)).unwrap();
        let y = t.sum(c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_finite_value_reports_node() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(0.0)).unwrap();
        let err = t.log(x).unwrap_err();
        assert_eq!(err, TapeError::NonFinite { node: 1, op: "log" });
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.constant(Matrix::scalar(1.0)).unwrap();
        assert!(matches!(t2.exp(x), Err(TapeError::ForeignVariable { .. })));
    }

    #[test]
    fn unknown_activation_name_is_unsupported() {
        assert_eq!(
            "softplus100".parse::<UnaryOp>().unwrap(),
            UnaryOp::Softplus(100.0)
        );
        assert_eq!(
            "gelu".parse::<UnaryOp>().unwrap_err(),
            TapeError::Unsupported("gelu".into())
        );
    }

    #[test]
    fn tiled_broadcast_reduces_gradient_over_tiles() {
        let mut t = Tape::new();
        let a = t
            .parameter(Matrix::from_rows(&[
                [1.0, 2.0],
                [3.0, 4.0],
                [5.0, 6.0],
                [7.0, 8.0],
            ]))
            .unwrap();
        let b = t
            .parameter(Matrix::from_rows(&[[10.0, 20.0], [30.0, 40.0]]))
            .unwrap();
        let p = t.mul(a, b).unwrap();
        assert_eq!(
            t.value(p).data(),
            &[10.0, 40.0, 90.0, 160.0, 50.0, 120.0, 210.0, 320.0]
        );
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn cumsum_and_its_adjoint() {
        let mut t = Tape::new();
        let x = t.parameter(Matrix::from_rows(&[[1.0, 2.0, 3.0]])).unwrap();
        let c = t.cumsum_exclusive(x).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 3.0]);
        let w = t
            .constant(Matrix::from_rows(&[[1.0, 10.0, 100.0]]))
            .unwrap();
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[110.0, 100.0, 0.0]);
    }

    #[test]
    fn laplace_density_branches_and_partials() {
        let d0 = laplace_density(0.0, 0.1, true);
        assert!((d0 - 5.0).abs() < 1e-12);
        let h = 1e-6;
        for &d in &[-0.3, -0.05, 0.02, 0.4] {
            for &mirrored in &[true, false] {
                let (pd, pb) = laplace_density_partials(d, 0.1, mirrored);
                let fd_d = (laplace_density(d + h, 0.1, mirrored)
                    - laplace_density(d - h, 0.1, mirrored))
                    / (2.0 * h);
                let fd_b = (laplace_density(d, 0.1 + h, mirrored)
                    - laplace_density(d, 0.1 - h, mirrored))
                    / (2.0 * h);
                assert!(
                    (pd - fd_d).abs() < 1e-5 * (1.0 + fd_d.abs()),
                    "{d} {pd} {fd_d}"
                );
                assert!(
                    (pb - fd_b).abs() < 1e-5 * (1.0 + fd_b.abs()),
                    "{d} {pb} {fd_b}"
                );
            }
        }
    }

    #[test]
    fn softplus_is_overflow_safe() {
        let (v, g) = scalar_grad(|t, x| t.softplus(x, 100.0), 50.0);
        assert!((v - 50.0).abs() < 1e-12);
        assert!((g - 1.0).abs() < 1e-12);
        let (v, g) = scalar_grad(|t, x| t.sigmoid(x, 1.0), -800.0);
        assert!((0.0..1e-300).contains(&v));
        assert!(g >= 0.0);
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let mut t = Tape::new();
        let x = t
            .parameter(Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.1]]))
            .unwrap();
        let w = t
            .constant(Matrix::from_rows(&[[1.0, -0.5, 0.25], [0.5, 2.0, -1.0]]))
            .unwrap();
        let h = t.matmul(x, w).unwrap();
        let s = t.softplus(h, 100.0).unwrap();
        let m = t.row_min(s).unwrap();
        let sm = t.softmax_rows(s).unwrap();
        let c = t.concat_cols(&[m, sm]).unwrap();
        let total = t.sum(c).unwrap();
        assert!(t.replay().is_ok());
        assert!(t.backward(total).is_ok());
    }
}
