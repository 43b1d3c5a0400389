//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! Every value on the tape is a row-major `rows x cols` [`Tensor`]. A batch of
//! points is stored one point per row, so the same program differentiates a
//! single point or a whole mini-batch.
//!
//! The primitive set is closed:
//!
//! | primitive    | forward                                   |
//! |--------------|-------------------------------------------|
//! | `add`        | `a + b` (same shape)                      |
//! | `mul`        | `a * b` elementwise (same shape)          |
//! | `scale`      | `s * a` for a fixed scalar `s`            |
//! | `matvec`     | `x W^T + b`, one row of `x` per point     |
//! | `tanh`       | elementwise                               |
//! | `exp`        | `exp(clamp(a, -bound, bound))`            |
//! | `log`        | elementwise natural log                   |
//! | `clamp`      | elementwise clamp to `[lo, hi]`           |
//! | `sum`        | sum of all entries, `1 x 1`               |
//! | `sum_cols`   | per-row sum, `rows x 1`                   |
//! | `slice_cols` | contiguous column range                   |
//! | `concat_cols`| side-by-side concatenation                |
//!
//! `exp` clamps its argument to `[-EXP_CLAMP, EXP_CLAMP]` before
//! exponentiating; the derivative is zero outside that band. `clamp`
//! likewise passes gradient only strictly inside `(lo, hi)`.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Symmetric input clamp applied by the `exp` primitive.
pub const EXP_CLAMP: f64 = 30.0;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutogradError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn accumulate(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Trainable array. The shape is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    value: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self { value }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Mutable view of the entries; the shape cannot change through it.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatVec {
        x: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Tanh(usize),
    Exp(usize, f64),
    Log(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumCols(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward evaluation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.adjoints.get(var.index).and_then(|a| a.as_ref())
    }

    /// Adjoint of `var`, with zeros of the given shape when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn shape_of(&self, i: usize) -> (usize, usize) {
        self.nodes[i].value.shape()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Leaf holding an input array.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf holding a constant; identical to an input, but reads better.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf snapshotting a parameter's current value.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(Op::Leaf, p.value.clone())
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &|i| &self.nodes[i].value)?;
        Ok(self.push(op, value))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(AutogradError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", a, b)?;
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", a, b)?;
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Scale(a, s))
    }

    /// `a - b`, composed from `add` and `scale`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `x W^T + b` with `x: n x in`, `W: out x in`, `b: 1 x out`.
    pub fn matvec(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(weight)?);
        let (sx, sw) = (self.shape_of(xi), self.shape_of(wi));
        if sx.1 != sw.1 {
            return Err(AutogradError::ShapeMismatch {
                op: "matvec",
                left: sx,
                right: sw,
            });
        }
        let bias = match bias {
            Some(b) => {
                let bi = self.check(b)?;
                let sb = self.shape_of(bi);
                if sb != (1, sw.0) {
                    return Err(AutogradError::ShapeMismatch {
                        op: "matvec bias",
                        left: sw,
                        right: sb,
                    });
                }
                Some(bi)
            }
            None => None,
        };
        self.record(Op::MatVec {
            x: xi,
            weight: wi,
            bias,
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Tanh(a))
    }

    /// `exp` with the default [`EXP_CLAMP`] guard.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.exp_bounded(a, EXP_CLAMP)
    }

    /// `exp(clamp(a, -bound, bound))`; `bound` is capped at [`EXP_CLAMP`].
    pub fn exp_bounded(&mut self, a: Var, bound: f64) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Exp(a, bound.min(EXP_CLAMP)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Sum(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::SumCols(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let cols = self.shape_of(ai).1;
        if start + len > cols || len == 0 {
            return Err(AutogradError::ColumnRange {
                op: "slice_cols",
                start,
                end: start + len,
                cols,
            });
        }
        self.record(Op::SliceCols(ai, start, len))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.shape_of(ai), self.shape_of(bi));
        if sa.0 != sb.0 {
            return Err(AutogradError::ShapeMismatch {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        self.record(Op::ConcatCols(ai, bi))
    }

    /// Re-evaluates every node from the recorded leaf values and returns the
    /// value of `v`.
    pub fn replay(&self, v: Var) -> Result<Tensor> {
        let target = self.check(v)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(target + 1);
        for node in &self.nodes[..=target] {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, &|i| &values[i])?,
            };
            values.push(value);
        }
        Ok(values.swap_remove(target))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.check(root)?;
        let shape = self.shape_of(r);
        if shape != (1, 1) {
            return Err(AutogradError::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; r + 1];
        adj[r] = Some(Tensor::scalar(1.0));

        for i in (0..=r).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |j: usize| &self.nodes[j].value;
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(&mut adj, a, g.clone());
                    send(&mut adj, b, g.clone());
                }
                Op::Mul(a, b) => {
                    send(&mut adj, a, g.zip(val(b), |g, y| g * y));
                    send(&mut adj, b, g.zip(val(a), |g, x| g * x));
                }
                Op::Scale(a, s) => send(&mut adj, a, g.map(|g| g * s)),
                Op::MatVec { x, weight, bias } => {
                    let (xv, wv) = (val(x), val(weight));
                    let (n, inp, out) = (xv.rows, xv.cols, wv.rows);
                    let mut gx = Tensor::zeros(n, inp);
                    let mut gw = Tensor::zeros(out, inp);
                    for row in 0..n {
                        let grow = &g.data[row * out..(row + 1) * out];
                        let xrow = &xv.data[row * inp..(row + 1) * inp];
                        let gxrow = &mut gx.data[row * inp..(row + 1) * inp];
                        for (o, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &wv.data[o * inp..(o + 1) * inp];
                            let gwrow = &mut gw.data[o * inp..(o + 1) * inp];
                            for k in 0..inp {
                                gxrow[k] += go * wrow[k];
                                gwrow[k] += go * xrow[k];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let mut gb = Tensor::zeros(1, out);
                        for row in 0..n {
                            for o in 0..out {
                                gb.data[o] += g.data[row * out + o];
                            }
                        }
                        send(&mut adj, b, gb);
                    }
                    send(&mut adj, x, gx);
                    send(&mut adj, weight, gw);
                }
                Op::Tanh(a) => send(&mut adj, a, g.zip(&node.value, |g, y| g * (1.0 - y * y))),
                Op::Exp(a, bound) => {
                    let inner = val(a);
                    let mut ga = g.zip(&node.value, |g, y| g * y);
                    for (d, &x) in ga.data.iter_mut().zip(&inner.data) {
                        if !(x > -bound && x < bound) {
                            *d = 0.0;
                        }
                    }
                    send(&mut adj, a, ga);
                }
                Op::Log(a) => send(&mut adj, a, g.zip(val(a), |g, x| g / x)),
                Op::Clamp(a, lo, hi) => {
                    send(
                        &mut adj,
                        a,
                        g.zip(val(a), |g, x| if x > lo && x < hi { g } else { 0.0 }),
                    );
                }
                Op::Sum(a) => {
                    let (rows, cols) = val(a).shape();
                    send(&mut adj, a, Tensor::filled(rows, cols, g.item()));
                }
                Op::SumCols(a) => {
                    let (rows, cols) = val(a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for row in 0..rows {
                        ga.data[row * cols..(row + 1) * cols].fill(g.data[row]);
                    }
                    send(&mut adj, a, ga);
                }
                Op::SliceCols(a, start, len) => {
                    let (rows, cols) = val(a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for row in 0..rows {
                        ga.data[row * cols + start..row * cols + start + len]
                            .copy_from_slice(&g.data[row * len..(row + 1) * len]);
                    }
                    send(&mut adj, a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (val(a).cols, val(b).cols);
                    let rows = g.rows;
                    let mut ga = Tensor::zeros(rows, ca);
                    let mut gb = Tensor::zeros(rows, cb);
                    for row in 0..rows {
                        let src = &g.data[row * (ca + cb)..(row + 1) * (ca + cb)];
                        ga.data[row * ca..(row + 1) * ca].copy_from_slice(&src[..ca]);
                        gb.data[row * cb..(row + 1) * cb].copy_from_slice(&src[ca..]);
                    }
                    send(&mut adj, a, ga);
                    send(&mut adj, b, gb);
                }
            }
            adj[i] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }
}

fn send(adj: &mut [Option<Tensor>], target: usize, g: Tensor) {
    match &mut adj[target] {
        Some(acc) => acc.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn eval<'a>(op: &Op, val: &dyn Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(a).zip(val(b), |x, y| x + y),
        Op::Mul(a, b) => val(a).zip(val(b), |x, y| x * y),
        Op::Scale(a, s) => val(a).map(|x| x * s),
        Op::MatVec { x, weight, bias } => {
            let (xv, wv) = (val(x), val(weight));
            let (n, inp, out) = (xv.rows, xv.cols, wv.rows);
            let mut y = Tensor::zeros(n, out);
            for row in 0..n {
                let xrow = &xv.data[row * inp..(row + 1) * inp];
                for o in 0..out {
                    let wrow = &wv.data[o * inp..(o + 1) * inp];
                    let mut acc = match bias {
                        Some(b) => val(b).data[o],
                        None => 0.0,
                    };
                    for k in 0..inp {
                        acc += wrow[k] * xrow[k];
                    }
                    y.data[row * out + o] = acc;
                }
            }
            y
        }
        Op::Tanh(a) => val(a).map(f64::tanh),
        Op::Exp(a, bound) => val(a).map(|x| x.clamp(-bound, bound).exp()),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Clamp(a, lo, hi) => val(a).map(|x| x.clamp(lo, hi)),
        Op::Sum(a) => Tensor::scalar(val(a).data.iter().sum()),
        Op::SumCols(a) => {
            let v = val(a);
            Tensor {
                rows: v.rows,
                cols: 1,
                data: v.data.chunks(v.cols).map(|r| r.iter().sum()).collect(),
            }
        }
        Op::SliceCols(a, start, len) => {
            let v = val(a);
            let mut data = Vec::with_capacity(v.rows * len);
            for row in 0..v.rows {
                data.extend_from_slice(&v.data[row * v.cols + start..row * v.cols + start + len]);
            }
            Tensor {
                rows: v.rows,
                cols: len,
                data,
            }
        }
        Op::ConcatCols(a, b) => {
            let (va, vb) = (val(a), val(b));
            let mut data = Vec::with_capacity(va.rows * (va.cols + vb.cols));
            for row in 0..va.rows {
                data.extend_from_slice(va.row_slice(row));
                data.extend_from_slice(vb.row_slice(row));
            }
            Tensor {
                rows: va.rows,
                cols: va.cols + vb.cols,
                data,
            }
        }
    })
}

/// Output of [`record_forward`].
#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub output: Var,
    pub inputs: Vec<Var>,
    pub params: Vec<Var>,
}

impl Recording {
    pub fn output_value(&self) -> &Tensor {
        &self.tape.nodes[self.output.index].value
    }
}

/// Records `program` on a fresh tape with the given inputs and parameters
/// registered as leaves, in order.
pub fn record_forward<F>(inputs: &[Tensor], params: &[&Parameter], program: F) -> Result<Recording>
where
    F: FnOnce(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input_vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let param_vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let output = program(&mut tape, &input_vars, &param_vars)?;
    tape.check(output)?;
    Ok(Recording {
        tape,
        output,
        inputs: input_vars,
        params: param_vars,
    })
}
