//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! A [`Tape`] records every elementary operation of a forward computation as
//! an append-only node list; [`Tape::backward`] then sweeps the list in
//! reverse to accumulate adjoints. Block fitting problems are tiny (a few
//! hundred parameters, at most a few thousand pixels), so a scalar tape is
//! both fast enough and bit-for-bit deterministic.
//!
//! The [`Scalar`] trait lets the renderer and loss code run the exact same
//! expressions either on the tape (as [`Var`], differentiable) or on plain
//! `f64` (fast, for decoding). Both instantiations share the forward
//! formulas in [`forward_unary`] / [`forward_binary`], so their results are
//! bit-identical.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Floor applied by `log_guarded`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Elementary operations supported on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Max2,
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    LogGuarded,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Abs,
        OpKind::Max2,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::LogGuarded,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Max2 => 2,
            _ => 1,
        }
    }
}

/// Logistic function; the single definition shared by both `Scalar` impls.
#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward value of a unary operation.
#[inline]
pub fn forward_unary(kind: OpKind, a: f64) -> f64 {
    match kind {
        OpKind::Neg => -a,
        OpKind::Abs => a.abs(),
        OpKind::Relu => {
            if a > 0.0 {
                a
            } else {
                0.0
            }
        }
        OpKind::Sigmoid => sigmoid_f64(a),
        OpKind::Square => a * a,
        OpKind::Sqrt => a.sqrt(),
        OpKind::LogGuarded => a.max(LOG_FLOOR).ln(),
        _ => unreachable!("binary kind used as unary"),
    }
}

/// Forward value of a binary operation.
#[inline]
pub fn forward_binary(kind: OpKind, a: f64, b: f64) -> f64 {
    match kind {
        OpKind::Add => a + b,
        OpKind::Sub => a - b,
        OpKind::Mul => a * b,
        OpKind::Div => a / b,
        OpKind::Max2 => {
            if a >= b {
                a
            } else {
                b
            }
        }
        _ => unreachable!("unary kind used as binary"),
    }
}

#[derive(Clone, Copy)]
enum NodeOp {
    /// Constant; contributes no adjoint.
    Const,
    /// Gradient root created by [`Tape::variable`].
    Input,
    Unary(OpKind, u32),
    Binary(OpKind, u32, u32),
}

#[derive(Clone, Copy)]
struct Node {
    op: NodeOp,
    value: f64,
}

/// Append-only record of a forward computation.
///
/// Single-threaded by design; distinct tapes are independent and may live on
/// different threads. Higher layers create one tape per block and step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Smallest distance to a subgradient kink seen while recording
    /// (relu/abs at 0, max2 ties, the log/sqrt guards). Used by gradient
    /// checks to reject probes too close to non-smooth points.
    kink_margin: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all nodes but keep the allocation. Requires `&mut self` so no
    /// `Var` referencing the old contents can survive the call.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.kink_margin.set(f64::INFINITY);
    }

    /// Smallest kink distance observed since the last clear.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    fn note_kink(&self, distance: f64) {
        if distance < self.kink_margin.get() {
            self.kink_margin.set(distance);
        }
    }

    fn push(&self, op: NodeOp, value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx,
            value,
        }
    }

    /// Record a constant. Constants take no adjoint.
    pub fn lift(&self, value: f64) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::domain(format!("lift of non-finite value {value}")));
        }
        Ok(self.push(NodeOp::Const, value))
    }

    /// Record a gradient root.
    pub fn variable(&self, value: f64) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::domain(format!(
                "variable with non-finite initial value {value}"
            )));
        }
        Ok(self.push(NodeOp::Input, value))
    }

    /// Checked application of an elementary operation.
    ///
    /// Domain requirements: `Div` needs `|denominator| > 0`, `Sqrt` needs a
    /// non-negative operand; `LogGuarded` clamps its operand to
    /// [`LOG_FLOOR`] and so has no requirement.
    pub fn apply<'t>(&'t self, kind: OpKind, operands: &[Var<'t>]) -> Result<Var<'t>> {
        if operands.len() != kind.arity() {
            return Err(Error::contract(format!(
                "{kind:?} expects {} operand(s), got {}",
                kind.arity(),
                operands.len()
            )));
        }
        for v in operands {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::contract(
                    "operand belongs to a different tape".to_string(),
                ));
            }
        }
        let a = operands[0];
        match kind.arity() {
            1 => {
                if kind == OpKind::Sqrt && a.value < 0.0 {
                    return Err(Error::domain(format!(
                        "sqrt of negative operand {} at node {}",
                        a.value, a.idx
                    )));
                }
                Ok(self.push_unary(kind, a))
            }
            _ => {
                let b = operands[1];
                if kind == OpKind::Div && b.value == 0.0 {
                    return Err(Error::domain(format!(
                        "division by zero denominator at node {}",
                        b.idx
                    )));
                }
                Ok(self.push_binary(kind, a, b))
            }
        }
    }

    fn push_unary<'t>(&'t self, kind: OpKind, a: Var<'t>) -> Var<'t> {
        match kind {
            OpKind::Relu | OpKind::Abs => self.note_kink(a.value.abs()),
            OpKind::LogGuarded => self.note_kink((a.value - LOG_FLOOR).abs()),
            OpKind::Sqrt => self.note_kink(a.value.abs()),
            _ => {}
        }
        self.push(NodeOp::Unary(kind, a.idx), forward_unary(kind, a.value))
    }

    fn push_binary<'t>(&'t self, kind: OpKind, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        if kind == OpKind::Max2 {
            self.note_kink((a.value - b.value).abs());
        }
        self.push(
            NodeOp::Binary(kind, a.idx, b.idx),
            forward_binary(kind, a.value, b.value),
        )
    }

    /// Reverse sweep from `output`, returning the adjoint of every node.
    ///
    /// Deterministic for a fixed tape: the sweep visits nodes in strictly
    /// decreasing index order and accumulates in that order.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(output.tape, self),
            "backward called with a Var from a different tape"
        );
        let nodes = self.nodes.borrow();
        let n = output.idx as usize + 1;
        let tape_id = self as *const Tape;
        let mut adj = vec![0.0; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let u = adj[i];
            if u == 0.0 {
                continue;
            }
            match nodes[i].op {
                NodeOp::Const | NodeOp::Input => {}
                NodeOp::Unary(kind, ai) => {
                    let a = nodes[ai as usize].value;
                    let d = match kind {
                        OpKind::Neg => -u,
                        // abs'(0) = 0 by convention.
                        OpKind::Abs => {
                            if a > 0.0 {
                                u
                            } else if a < 0.0 {
                                -u
                            } else {
                                0.0
                            }
                        }
                        // relu'(0) = 0 by convention.
                        OpKind::Relu => {
                            if a > 0.0 {
                                u
                            } else {
                                0.0
                            }
                        }
                        OpKind::Sigmoid => {
                            let s = nodes[i].value;
                            u * s * (1.0 - s)
                        }
                        OpKind::Square => u * 2.0 * a,
                        OpKind::Sqrt => u / (2.0 * nodes[i].value),
                        // Zero gradient inside the clamped region.
                        OpKind::LogGuarded => {
                            if a >= LOG_FLOOR {
                                u / a
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    adj[ai as usize] += d;
                }
                NodeOp::Binary(kind, ai, bi) => {
                    let a = nodes[ai as usize].value;
                    let b = nodes[bi as usize].value;
                    match kind {
                        OpKind::Add => {
                            adj[ai as usize] += u;
                            adj[bi as usize] += u;
                        }
                        OpKind::Sub => {
                            adj[ai as usize] += u;
                            adj[bi as usize] -= u;
                        }
                        OpKind::Mul => {
                            adj[ai as usize] += u * b;
                            adj[bi as usize] += u * a;
                        }
                        OpKind::Div => {
                            adj[ai as usize] += u / b;
                            adj[bi as usize] -= u * a / (b * b);
                        }
                        // Ties route the full gradient to the first operand.
                        OpKind::Max2 => {
                            if a >= b {
                                adj[ai as usize] += u;
                            } else {
                                adj[bi as usize] += u;
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
        Gradients { adj, tape_id }
    }
}

/// A value recorded on a tape. Cheap to copy; combining two `Var`s from
/// different tapes panics.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.idx as usize
    }

    fn same_tape(self, other: Var<'t>) -> &'t Tape {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "combined Vars from two different tapes"
        );
        self.tape
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Relu, self)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Sigmoid, self)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Abs, self)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Square, self)
    }

    /// Caller must ensure the operand is non-negative (see [`Tape::apply`]
    /// for the checked route).
    pub fn sqrt(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Sqrt, self)
    }

    pub fn log_guarded(self) -> Var<'t> {
        self.tape.push_unary(OpKind::LogGuarded, self)
    }

    pub fn max2(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other).push_binary(OpKind::Max2, self, other)
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.same_tape(rhs).push_binary($kind, self, rhs)
            }
        }
    };
}

var_binop!(Add, add, OpKind::Add);
var_binop!(Sub, sub, OpKind::Sub);
var_binop!(Mul, mul, OpKind::Mul);
var_binop!(Div, div, OpKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push_unary(OpKind::Neg, self)
    }
}

/// Adjoints produced by [`Tape::backward`], keyed by node index.
pub struct Gradients {
    adj: Vec<f64>,
    tape_id: *const Tape,
}

impl Gradients {
    /// Adjoint of `v`; zero for nodes the output does not depend on.
    /// Panics if `v` lives on a different tape.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        assert!(
            std::ptr::eq(v.tape, self.tape_id),
            "gradient lookup with a Var from a different tape"
        );
        self.adj.get(v.index()).copied().unwrap_or(0.0)
    }
}

/// The numeric type the renderer and losses are written against.
///
/// `f64` gives the plain fast path, [`Var`] the differentiable one. Both
/// compute forward values through [`forward_unary`] / [`forward_binary`], so
/// the two paths agree bit for bit.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Whatever is needed to mint constants: `()` for `f64`, the tape for `Var`.
    type Ctx: Copy;

    fn lift(ctx: Self::Ctx, value: f64) -> Self;
    fn value(self) -> f64;
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    fn abs(self) -> Self;
    fn square(self) -> Self;
    /// Caller must guard the domain (operand >= 0).
    fn sqrt(self) -> Self;
    fn log_guarded(self) -> Self;
    fn max2(self, other: Self) -> Self;
}

impl Scalar for f64 {
    type Ctx = ();

    fn lift(_: (), value: f64) -> f64 {
        value
    }
    fn value(self) -> f64 {
        self
    }
    fn relu(self) -> f64 {
        forward_unary(OpKind::Relu, self)
    }
    fn sigmoid(self) -> f64 {
        forward_unary(OpKind::Sigmoid, self)
    }
    fn abs(self) -> f64 {
        forward_unary(OpKind::Abs, self)
    }
    fn square(self) -> f64 {
        forward_unary(OpKind::Square, self)
    }
    fn sqrt(self) -> f64 {
        forward_unary(OpKind::Sqrt, self)
    }
    fn log_guarded(self) -> f64 {
        forward_unary(OpKind::LogGuarded, self)
    }
    fn max2(self, other: f64) -> f64 {
        forward_binary(OpKind::Max2, self, other)
    }
}

impl<'t> Scalar for Var<'t> {
    type Ctx = &'t Tape;

    fn lift(ctx: &'t Tape, value: f64) -> Var<'t> {
        ctx.lift(value)
            .expect("lift of non-finite constant in generic code")
    }
    fn value(self) -> f64 {
        Var::value(self)
    }
    fn relu(self) -> Var<'t> {
        Var::relu(self)
    }
    fn sigmoid(self) -> Var<'t> {
        Var::sigmoid(self)
    }
    fn abs(self) -> Var<'t> {
        Var::abs(self)
    }
    fn square(self) -> Var<'t> {
        Var::square(self)
    }
    fn sqrt(self) -> Var<'t> {
        Var::sqrt(self)
    }
    fn log_guarded(self) -> Var<'t> {
        Var::log_guarded(self)
    }
    fn max2(self, other: Var<'t>) -> Var<'t> {
        Var::max2(self, other)
    }
}

/// Numerically stable softmax, written for both scalar types.
///
/// exp is not an elementary tape operation; after subtracting the (detached)
/// maximum every exponent t is <= 0 and `exp(t) = sigmoid(t) / sigmoid(-t)`
/// holds exactly, with the denominator bounded below by 1/2. Subtracting a
/// constant leaves softmax values and gradients unchanged.
pub fn softmax<N: Scalar>(scores: &[N], ctx: N::Ctx) -> Vec<N> {
    debug_assert!(!scores.is_empty());
    let m = scores
        .iter()
        .map(|s| s.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = N::lift(ctx, m);
    let exps: Vec<N> = scores
        .iter()
        .map(|&s| {
            let t = s - shift;
            t.sigmoid() / (-t).sigmoid()
        })
        .collect();
    let mut total = exps[0];
    for &e in &exps[1..] {
        total = total + e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

/// Maximum relative error between the analytic gradient of `f` and central
/// finite differences at `point`.
///
/// The error per coordinate is `|analytic - fd| / max(1, |analytic|, |fd|)`;
/// a non-finite evaluation makes that coordinate's error infinite. The
/// closure must build the same expression for any tape it is given.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("step must be > 0, got {step}")));
    }

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point
        .iter()
        .map(|&v| tape.variable(v))
        .collect::<Result<_>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out);
    let analytic: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |coords: &[f64]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = coords
            .iter()
            .map(|&v| t.variable(v))
            .collect::<Result<_>>()?;
        Ok(f(&t, &vs)?.value())
    };

    let mut max_err = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let hi = eval(&probe)?;
        probe[i] = point[i] - step;
        let lo = eval(&probe)?;
        probe[i] = point[i];
        let fd = (hi - lo) / (2.0 * step);
        let err = if fd.is_finite() && analytic[i].is_finite() {
            (analytic[i] - fd).abs() / 1.0f64.max(analytic[i].abs()).max(fd.abs())
        } else {
            f64::INFINITY
        };
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_and_variable_values() {
        let tape = Tape::new();
        assert_eq!(tape.lift(0.0).unwrap().value(), 0.0);
        assert_eq!(tape.variable(2.5).unwrap().value(), 2.5);
    }

    #[test]
    fn lift_rejects_non_finite() {
        let tape = Tape::new();
        assert!(tape.lift(f64::INFINITY).is_err());
        assert!(tape.variable(f64::NAN).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.lift(0.0).unwrap();
        assert_eq!(x.sigmoid().value(), 0.5);
    }

    #[test]
    fn relu_negative_is_zero_with_zero_adjoint() {
        let tape = Tape::new();
        let x = tape.variable(-2.0).unwrap();
        let y = x.relu();
        assert_eq!(y.value(), 0.0);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.variable(2.0).unwrap();
        let y = tape.variable(3.0).unwrap();
        let z = x * y;
        assert_eq!(z.value(), 6.0);
        let g = tape.backward(z);
        assert_eq!(g.wrt(x), 3.0);
        assert_eq!(g.wrt(y), 2.0);
    }

    #[test]
    fn backward_of_constant_is_empty() {
        let tape = Tape::new();
        let x = tape.variable(1.0).unwrap();
        let c = tape.lift(5.0).unwrap();
        let g = tape.backward(c);
        // no variable received any adjoint
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn square_via_mul() {
        let tape = Tape::new();
        let x = tape.variable(3.0).unwrap();
        let f = x * x;
        let g = tape.backward(f);
        assert_eq!(g.wrt(x), 6.0);
    }

    #[test]
    fn sigmoid_chain_rule() {
        let tape = Tape::new();
        let x = tape.variable(0.0).unwrap();
        let two = tape.lift(2.0).unwrap();
        let f = (two * x).sigmoid();
        let g = tape.backward(f);
        // sigma'(0) = 1/4, chain factor 2
        assert!((g.wrt(x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn apply_checks_arity_and_domains() {
        let tape = Tape::new();
        let a = tape.lift(1.0).unwrap();
        let zero = tape.lift(0.0).unwrap();
        let neg = tape.lift(-1.0).unwrap();
        assert!(matches!(
            tape.apply(OpKind::Add, &[a]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            tape.apply(OpKind::Div, &[a, zero]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            tape.apply(OpKind::Sqrt, &[neg]),
            Err(Error::Domain(_))
        ));
        // log_guarded clamps instead of failing
        let lg = tape.apply(OpKind::LogGuarded, &[neg]).unwrap();
        assert_eq!(lg.value(), LOG_FLOOR.ln());
    }

    #[test]
    fn apply_rejects_cross_tape_operands() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.lift(1.0).unwrap();
        let b = t2.lift(2.0).unwrap();
        assert!(matches!(
            t1.apply(OpKind::Add, &[a, b]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn max2_tie_takes_first_operand() {
        let tape = Tape::new();
        let a = tape.variable(1.0).unwrap();
        let b = tape.variable(1.0).unwrap();
        let m = a.max2(b);
        let g = tape.backward(m);
        assert_eq!(g.wrt(a), 1.0);
        assert_eq!(g.wrt(b), 0.0);
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |_t, v| {
                let x = v[0];
                Ok(x.square())
            },
            &[1.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_product() {
        let err = grad_check(|_t, v| Ok(v[0] * v[1]), &[2.0, 3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_requires_positive_step() {
        assert!(grad_check(|_t, v| Ok(v[0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn backward_is_linear() {
        // gradient of a*f + b*g equals a*grad f + b*grad g
        let (a, b) = (2.5, -1.25);
        let point = [0.7, -0.3];
        let grad_of = |build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>| {
            let tape = Tape::new();
            let vs: Vec<Var<'_>> = point.iter().map(|&v| tape.variable(v).unwrap()).collect();
            let out = build(&tape, &vs);
            let g = tape.backward(out);
            vs.iter().map(|&v| g.wrt(v)).collect::<Vec<_>>()
        };
        fn f<'t>(_t: &'t Tape, v: &[Var<'t>]) -> Var<'t> {
            v[0] * v[1]
        }
        fn g<'t>(_t: &'t Tape, v: &[Var<'t>]) -> Var<'t> {
            v[0].sigmoid() + v[1].square()
        }
        let gf = grad_of(&|t, v| f(t, v));
        let gg = grad_of(&|t, v| g(t, v));
        let combined = grad_of(&|t, v| {
            let ca = t.lift(a).unwrap();
            let cb = t.lift(b).unwrap();
            ca * f(t, v) + cb * g(t, v)
        });
        for i in 0..point.len() {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.variable(0.37).unwrap();
            let y = tape.variable(-1.91).unwrap();
            let e = (x * y).sigmoid() + (x - y).abs().sqrt();
            let g = tape.backward(e);
            (e.value(), g.wrt(x), g.wrt(y))
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_matches_direct_exp() {
        let scores = [0.3, -1.2, 2.7, 0.0];
        let got = softmax::<f64>(&scores, ());
        let m = 2.7;
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / total).abs() < 1e-12);
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_var_forward_matches_f64() {
        let scores = [0.9, -0.4, 0.05];
        let plain = softmax::<f64>(&scores, ());
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = scores.iter().map(|&s| tape.variable(s).unwrap()).collect();
        let soft = softmax(&vars, &tape);
        for (p, v) in plain.iter().zip(&soft) {
            assert_eq!(*p, v.value());
        }
    }

    #[test]
    fn softmax_gradient_is_correct() {
        // d/dz_j of softmax component 0, against finite differences
        let err = grad_check(
            |t, v| {
                let s = softmax(v, t);
                Ok(s[0])
            },
            &[0.2, -0.7, 1.1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn kink_margin_tracks_relu_and_max2() {
        let tape = Tape::new();
        let x = tape.variable(0.03).unwrap();
        let y = tape.variable(0.05).unwrap();
        let _ = x.relu();
        let _ = x.max2(y);
        assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
    }
}
