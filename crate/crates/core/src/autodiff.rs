//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every scalar operation of a forward evaluation as a
//! node holding its value and the local partial derivatives with respect to
//! at most two predecessors. [`Tape::backward`] sweeps the nodes in reverse
//! index order and accumulates adjoints, producing the gradient of one output
//! with respect to every registered leaf in a single pass.
//!
//! Piecewise operations (`min`, `max`, `relu`, `clamp`) use fixed subgradient
//! conventions at their breakpoints:
//!
//! * `relu'(0) = 0`
//! * `max(a, b)` sends the whole adjoint to `a` only when `a > b`; ties go to `b`
//! * `min(a, b)` sends the whole adjoint to `a` only when `a < b`; ties go to `b`
//! * `clamp(x, lo, hi)` has slope 1 strictly inside `(lo, hi)` and 0 elsewhere
//!
//! Every piecewise decision is also appended to the tape's branch signature so
//! that finite-difference probes straddling a breakpoint can be detected.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

const NO_PRED: u32 = u32::MAX;

/// Errors raised while recording operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("leaf value {value} is not finite")]
    NonFiniteLeaf { value: f64 },
    #[error("{op} domain violation at node {node}: argument {value}")]
    Domain { op: &'static str, node: usize, value: f64 },
    #[error("{op} produced a non-finite value at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("{op} expects {expected} argument(s), got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("invalid clamp interval [{lo}, {hi}]")]
    ClampBounds { lo: f64, hi: f64 },
}

/// Operation kinds admitted on the tape. Constant operands are carried inline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// `base^exponent` with both operands on the tape; requires `base >= 0`.
    Pow,
    /// `x^p` for a constant `p`.
    PowConst(f64),
    /// `scale * x + offset`.
    Affine { scale: f64, offset: f64 },
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    Min,
    Max,
    MinConst(f64),
    MaxConst(f64),
    Clamp { lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Pow => "pow",
            Op::PowConst(_) => "pow_const",
            Op::Affine { .. } => "affine",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Min => "min",
            Op::Max => "max",
            Op::MinConst(_) => "min_const",
            Op::MaxConst(_) => "max_const",
            Op::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow | Op::Min | Op::Max => 2,
            _ => 1,
        }
    }
}

/// One recorded scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeNode {
    pub value: f64,
    preds: [u32; 2],
    partials: [f64; 2],
}

impl TapeNode {
    /// Predecessor indices together with the local partial for each.
    pub fn inputs(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.preds
            .iter()
            .zip(self.partials.iter())
            .filter(|(p, _)| **p != NO_PRED)
            .map(|(p, d)| (*p as usize, *d))
    }
}

/// A piecewise decision taken during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Branch {
    pub node: u32,
    pub arm: u8,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<TapeNode>,
    leaves: Vec<u32>,
    branches: Vec<Branch>,
}

/// Append-only record of one forward evaluation.
///
/// A tape is single-threaded; independent evaluations use independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a node of one particular tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value())
    }
}

/// Index of a registered leaf, in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId(pub usize);

/// Gradient of one output with respect to every registered leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    leaf_nodes: Vec<u32>,
    values: Vec<f64>,
}

impl Gradients {
    /// Gradient entries ordered by [`LeafId`].
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, leaf: LeafId) -> f64 {
        self.values[leaf.0]
    }

    /// Gradient with respect to `var`, which must be a leaf.
    pub fn wrt(&self, var: Var<'_>) -> Option<f64> {
        self.leaf_nodes
            .binary_search(&var.index)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                leaves: Vec::new(),
                branches: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf_count(&self) -> usize {
        self.inner.borrow().leaves.len()
    }

    /// Registers a trainable input.
    pub fn leaf(&self, value: f64) -> Result<Var<'_>, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteLeaf { value });
        }
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len() as u32;
        inner.nodes.push(TapeNode {
            value,
            preds: [NO_PRED; 2],
            partials: [0.0; 2],
        });
        inner.leaves.push(index);
        Ok(Var { tape: self, index })
    }

    /// Registers leaves for every entry of `values`, in order.
    pub fn leaves(&self, values: &[f64]) -> Result<Vec<Var<'_>>, AdError> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// Records a value that no gradient is requested for.
    pub fn constant(&self, value: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len() as u32;
        inner.nodes.push(TapeNode {
            value,
            preds: [NO_PRED; 2],
            partials: [0.0; 2],
        });
        Var { tape: self, index }
    }

    pub fn node(&self, index: usize) -> TapeNode {
        self.inner.borrow().nodes[index]
    }

    pub fn nodes(&self) -> Vec<TapeNode> {
        self.inner.borrow().nodes.clone()
    }

    /// Sequence of piecewise decisions taken so far.
    pub fn branch_signature(&self) -> Vec<Branch> {
        self.inner.borrow().branches.clone()
    }

    /// Records a data-dependent decision made outside the built-in piecewise ops
    /// (an `if` on a forward value in user code).
    pub fn record_branch(&self, arm: u8) {
        let mut inner = self.inner.borrow_mut();
        let node = inner.nodes.len() as u32;
        inner.branches.push(Branch { node, arm });
    }

    fn check_owner(&self, var: &Var<'_>) {
        assert!(
            std::ptr::eq(self, var.tape),
            "variable #{} belongs to a different tape",
            var.index
        );
    }

    /// Records `op` applied to `args`.
    pub fn apply<'t>(&'t self, op: Op, args: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        if args.len() != op.arity() {
            return Err(AdError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: args.len(),
            });
        }
        for a in args {
            self.check_owner(a);
        }
        let mut inner = self.inner.borrow_mut();
        let node = inner.nodes.len();
        let x = inner.nodes[args[0].index as usize].value;
        let y = if args.len() == 2 {
            inner.nodes[args[1].index as usize].value
        } else {
            0.0
        };
        let mut branch = None;
        let (value, dx, dy) = match op {
            Op::Add => (x + y, 1.0, 1.0),
            Op::Sub => (x - y, 1.0, -1.0),
            Op::Mul => (x * y, y, x),
            Op::Div => {
                if y == 0.0 {
                    return Err(AdError::Domain { op: "div", node, value: y });
                }
                (x / y, 1.0 / y, -x / (y * y))
            }
            Op::Pow => {
                if x < 0.0 {
                    return Err(AdError::Domain { op: "pow", node, value: x });
                }
                if x == 0.0 {
                    // 0^b = 0 for b > 0; the exponent partial b * 0^(b-1) is 0 for b > 1.
                    let d = if y == 1.0 { 1.0 } else { 0.0 };
                    (0.0, d, 0.0)
                } else {
                    let v = x.powf(y);
                    (v, y * x.powf(y - 1.0), v * x.ln())
                }
            }
            Op::PowConst(p) => {
                if x < 0.0 && p.fract() != 0.0 {
                    return Err(AdError::Domain { op: "pow_const", node, value: x });
                }
                if x == 0.0 && p < 1.0 {
                    return Err(AdError::Domain { op: "pow_const", node, value: x });
                }
                (x.powf(p), p * x.powf(p - 1.0), 0.0)
            }
            Op::Affine { scale, offset } => (scale * x + offset, scale, 0.0),
            Op::Exp => {
                let v = x.exp();
                (v, v, 0.0)
            }
            Op::Ln => {
                if x <= 0.0 {
                    return Err(AdError::Domain { op: "ln", node, value: x });
                }
                (x.ln(), 1.0 / x, 0.0)
            }
            Op::Sigmoid => {
                let s = sigmoid(x);
                (s, s * (1.0 - s), 0.0)
            }
            Op::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t, 0.0)
            }
            Op::Relu => {
                let on = x > 0.0;
                branch = Some(on as u8);
                if on {
                    (x, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Op::Max => {
                let first = x > y;
                branch = Some(first as u8);
                if first {
                    (x, 1.0, 0.0)
                } else {
                    (y, 0.0, 1.0)
                }
            }
            Op::Min => {
                let first = x < y;
                branch = Some(first as u8);
                if first {
                    (x, 1.0, 0.0)
                } else {
                    (y, 0.0, 1.0)
                }
            }
            Op::MaxConst(c) => {
                let first = x > c;
                branch = Some(first as u8);
                if first {
                    (x, 1.0, 0.0)
                } else {
                    (c, 0.0, 0.0)
                }
            }
            Op::MinConst(c) => {
                let first = x < c;
                branch = Some(first as u8);
                if first {
                    (x, 1.0, 0.0)
                } else {
                    (c, 0.0, 0.0)
                }
            }
            Op::Clamp { lo, hi } => {
                if !(lo <= hi) {
                    return Err(AdError::ClampBounds { lo, hi });
                }
                if x <= lo {
                    branch = Some(0);
                    (lo, 0.0, 0.0)
                } else if x >= hi {
                    branch = Some(2);
                    (hi, 0.0, 0.0)
                } else {
                    branch = Some(1);
                    (x, 1.0, 0.0)
                }
            }
        };
        if !value.is_finite() || !dx.is_finite() || !dy.is_finite() {
            return Err(AdError::NonFinite { op: op.name(), node });
        }
        let preds = if args.len() == 2 {
            [args[0].index, args[1].index]
        } else {
            [args[0].index, NO_PRED]
        };
        inner.nodes.push(TapeNode {
            value,
            preds,
            partials: [dx, dy],
        });
        if let Some(arm) = branch {
            inner.branches.push(Branch { node: node as u32, arm });
        }
        Ok(Var { tape: self, index: node as u32 })
    }

    /// Accumulates adjoints from `output` back to every leaf.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        self.check_owner(&output);
        let inner = self.inner.borrow();
        let out = output.index as usize;
        let mut adjoint = vec![0.0; out + 1];
        adjoint[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = &inner.nodes[i];
            for k in 0..2 {
                let p = node.preds[k];
                if p != NO_PRED {
                    adjoint[p as usize] += node.partials[k] * a;
                }
            }
        }
        let values = inner
            .leaves
            .iter()
            .map(|&l| adjoint.get(l as usize).copied().unwrap_or(0.0))
            .collect();
        Gradients {
            leaf_nodes: inner.leaves.clone(),
            values,
        }
    }

    /// Scans the tape and confirms that every predecessor precedes its node.
    pub fn is_topologically_sound(&self) -> bool {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs().all(|(p, _)| p < i))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.index as usize].value
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op) -> Var<'t> {
        // Only called for ops whose domain is the whole real line.
        self.tape
            .apply(op, &[self])
            .unwrap_or_else(|e| panic!("infallible op failed: {e}"))
    }

    fn binary(self, op: Op, other: Var<'t>) -> Var<'t> {
        self.tape
            .apply(op, &[self, other])
            .unwrap_or_else(|e| panic!("infallible op failed: {e}"))
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::Div, &[self, other])
    }

    pub fn ln(self) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::Ln, &[self])
    }

    pub fn exp(self) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::Exp, &[self])
    }

    pub fn pow(self, exponent: Var<'t>) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::Pow, &[self, exponent])
    }

    pub fn pow_const(self, p: f64) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::PowConst(p), &[self])
    }

    pub fn square(self) -> Var<'t> {
        self.binary(Op::Mul, self)
    }

    pub fn affine(self, scale: f64, offset: f64) -> Var<'t> {
        self.unary(Op::Affine { scale, offset })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu)
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.binary(Op::Max, other)
    }

    pub fn min(self, other: Var<'t>) -> Var<'t> {
        self.binary(Op::Min, other)
    }

    pub fn max_const(self, c: f64) -> Var<'t> {
        self.unary(Op::MaxConst(c))
    }

    pub fn min_const(self, c: f64) -> Var<'t> {
        self.unary(Op::MinConst(c))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>, AdError> {
        self.tape.apply(Op::Clamp { lo, hi }, &[self])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Add, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Sub, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(Op::Mul, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.affine(1.0, rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.affine(1.0, -rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.affine(rhs, 0.0)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs.affine(1.0, self)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.affine(-1.0, self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.affine(self, 0.0)
    }
}

/// Sum of a non-empty sequence of variables, folded left to right.
pub fn sum<'t>(vars: impl IntoIterator<Item = Var<'t>>) -> Option<Var<'t>> {
    vars.into_iter().reduce(|a, b| a + b)
}

/// One coordinate of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    /// The branch signature differed between the probe points.
    pub breakpoint: bool,
    /// Evaluation failure at a probe point.
    pub failure: Option<String>,
}

impl CoordinateCheck {
    pub fn usable(&self) -> bool {
        !self.breakpoint && self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub value: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    /// Largest relative error among coordinates that are neither flagged nor failed.
    pub fn max_relative_error(&self) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.usable())
            .map(|c| c.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> usize {
        self.coordinates.iter().filter(|c| c.breakpoint).count()
    }

    pub fn failed(&self) -> usize {
        self.coordinates.iter().filter(|c| c.failure.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coordinate,analytic,numeric,relative_error,breakpoint,failure\n");
        for c in &self.coordinates {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.coordinate,
                c.analytic,
                c.numeric,
                c.relative_error,
                c.breakpoint,
                c.failure.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of `f` at `point` against central differences.
///
/// The probe step for coordinate `i` is `step * max(1, |point[i]|)`. A
/// coordinate is flagged as a breakpoint hit when the branch signature at
/// either probe differs from the one at `point`.
pub fn grad_check<F, E>(f: F, point: &[f64], step: f64) -> Result<GradCheckReport, String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: fmt::Display,
{
    let eval = |x: &[f64]| -> Result<(f64, Vec<Branch>), String> {
        let tape = Tape::new();
        let leaves = tape.leaves(x).map_err(|e| e.to_string())?;
        let out = f(&tape, &leaves).map_err(|e| e.to_string())?;
        Ok((out.value(), tape.branch_signature()))
    };

    let tape = Tape::new();
    let leaves = tape.leaves(point).map_err(|e| e.to_string())?;
    let out = f(&tape, &leaves).map_err(|e| e.to_string())?;
    let value = out.value();
    let grads = tape.backward(out);
    let signature = tape.branch_signature();
    drop(tape);

    let mut coordinates = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let h = step * 1f64.max(point[i].abs());
        probe[i] = point[i] + h;
        let plus = eval(&probe);
        probe[i] = point[i] - h;
        let minus = eval(&probe);
        probe[i] = point[i];
        let analytic = grads.get(LeafId(i));
        let check = match (plus, minus) {
            (Ok((fp, sp)), Ok((fm, sm))) => {
                let numeric = (fp - fm) / (2.0 * h);
                CoordinateCheck {
                    coordinate: i,
                    analytic,
                    numeric,
                    relative_error: relative_error(analytic, numeric),
                    breakpoint: sp != signature || sm != signature,
                    failure: None,
                }
            }
            (Err(e), _) | (_, Err(e)) => CoordinateCheck {
                coordinate: i,
                analytic,
                numeric: f64::NAN,
                relative_error: f64::NAN,
                breakpoint: false,
                failure: Some(e),
            },
        };
        coordinates.push(check);
    }
    Ok(GradCheckReport { value, coordinates })
}
