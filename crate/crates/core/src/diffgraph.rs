//! Reverse-mode automatic differentiation over real scalars.
//!
//! A [`Tape`] records every operation applied to its variables as a node
//! holding parent ids and local partial derivatives. Parents always precede
//! children, so [`Var::backward`] is a single reverse sweep.
//!
//! Constants never touch the tape: a [`Var`] without a node is a plain
//! number, and mixed expressions record only the variable side. Complex
//! arithmetic is built from (re, im) pairs in [`Cx`]; all losses are real.
//!
//! Numeric code that must run both with and without gradients is written
//! against the [`Real`] trait, implemented for `f64` and `Var`.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("log of non-positive value {0}")]
    Log(f64),
    #[error("sqrt of negative value {0}")]
    Sqrt(f64),
    #[error("division by zero")]
    DivByZero,
    #[error("operation {op:?} expects {expected} arguments, got {got}")]
    Arity {
        op: Op,
        expected: usize,
        got: usize,
    },
    #[error("arguments live on different tapes")]
    ForeignTape,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    PowConst(f64),
    /// `min(x, c)`; the unclamped branch wins ties.
    MinConstClamp(f64),
    Sigmoid,
}

impl Op {
    fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    // (start, len) into `edges`
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
}

/// Append-only recording of a computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let id = self.push(value, &[]);
        Var {
            val: value,
            node: Some((self, id)),
        }
    }

    fn push(&self, value: f64, parents: &[(u32, f64)]) -> u32 {
        let mut t = self.inner.borrow_mut();
        let id = t.values.len() as u32;
        let start = t.edges.len() as u32;
        t.edges.extend_from_slice(parents);
        t.spans.push((start, parents.len() as u32));
        t.values.push(value);
        id
    }

    /// Node with caller-supplied local partials. Constant parents are
    /// dropped; returns a constant if no parent is on a tape.
    pub fn custom<'t>(&'t self, value: f64, parents: &[(Var<'t>, f64)]) -> Var<'t> {
        let edges: Vec<(u32, f64)> = parents
            .iter()
            .filter_map(|(v, d)| match v.node {
                Some((t, id)) => {
                    debug_assert!(std::ptr::eq(t, self), "foreign tape");
                    Some((id, *d))
                }
                None => None,
            })
            .collect();
        if edges.is_empty() {
            return Var::constant(value);
        }
        let id = self.push(value, &edges);
        Var {
            val: value,
            node: Some((self, id)),
        }
    }

    /// Checked entry point for the primitive operations.
    pub fn record<'t>(&'t self, op: Op, args: &[Var<'t>]) -> Result<Var<'t>, DomainError> {
        if args.len() != op.arity() {
            return Err(DomainError::Arity {
                op,
                expected: op.arity(),
                got: args.len(),
            });
        }
        for a in args {
            if let Some((t, _)) = a.node {
                if !std::ptr::eq(t, self) {
                    return Err(DomainError::ForeignTape);
                }
            }
        }
        let x = args[0];
        let out = match op {
            Op::Add => x + args[1],
            Op::Sub => x - args[1],
            Op::Mul => x * args[1],
            Op::Div => {
                if args[1].val == 0.0 {
                    return Err(DomainError::DivByZero);
                }
                x / args[1]
            }
            Op::Neg => -x,
            Op::Exp => x.exp(),
            Op::Log => {
                if !(x.val > 0.0) {
                    return Err(DomainError::Log(x.val));
                }
                x.ln()
            }
            Op::Sqrt => {
                if !(x.val >= 0.0) {
                    return Err(DomainError::Sqrt(x.val));
                }
                x.sqrt()
            }
            Op::Sin => x.sin(),
            Op::Cos => x.cos(),
            Op::PowConst(p) => x.powf(p),
            Op::MinConstClamp(c) => x.min_const(c),
            Op::Sigmoid => x.sigmoid(),
        };
        Ok(out)
    }

    fn backward_from(&self, root: u32) -> Gradients {
        let t = self.inner.borrow();
        let n = root as usize + 1;
        let mut grads = vec![0.0; n];
        grads[root as usize] = 1.0;
        for i in (0..n).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let (start, len) = t.spans[i];
            for &(p, d) in &t.edges[start as usize..(start + len) as usize] {
                grads[p as usize] += d * g;
            }
        }
        Gradients { grads }
    }
}

/// A scalar that may carry a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    node: Option<(&'t Tape, u32)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, id)) => write!(f, "Var({} @{id})", self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Self {
            val: value,
            node: None,
        }
    }

    pub fn value(&self) -> f64 {
        self.val
    }

    pub fn id(&self) -> Option<usize> {
        self.node.map(|(_, id)| id as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn tape(&self) -> Option<&'t Tape> {
        self.node.map(|(t, _)| t)
    }

    fn unary(self, value: f64, d: f64) -> Self {
        match self.node {
            None => Var::constant(value),
            Some((t, id)) => Var {
                val: value,
                node: Some((t, t.push(value, &[(id, d)]))),
            },
        }
    }

    fn binary(self, o: Var<'t>, value: f64, da: f64, db: f64) -> Self {
        match (self.node, o.node) {
            (None, None) => Var::constant(value),
            (Some((t, a)), None) => Var {
                val: value,
                node: Some((t, t.push(value, &[(a, da)]))),
            },
            (None, Some((t, b))) => Var {
                val: value,
                node: Some((t, t.push(value, &[(b, db)]))),
            },
            (Some((t, a)), Some((t2, b))) => {
                debug_assert!(std::ptr::eq(t, t2), "arguments on different tapes");
                Var {
                    val: value,
                    node: Some((t, t.push(value, &[(a, da), (b, db)]))),
                }
            }
        }
    }

    /// Reverse accumulation from this scalar.
    pub fn backward(&self) -> Gradients {
        match self.node {
            None => Gradients { grads: Vec::new() },
            Some((t, id)) => t.backward_from(id),
        }
    }
}

/// Gradient of one root with respect to every earlier node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        v.id().map_or(0.0, |id| self.by_id(id))
    }

    pub fn by_id(&self, id: usize) -> f64 {
        self.grads.get(id).copied().unwrap_or(0.0)
    }
}

/// Scalar arithmetic shared by plain `f64` evaluation and taped evaluation.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(c: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn sigmoid(self) -> Self;
    fn min_const(self, c: f64) -> Self;
    fn log10(self) -> Self {
        self.ln() * std::f64::consts::LOG10_E
    }
}

impl Real for f64 {
    fn cst(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn min_const(self, c: f64) -> Self {
        if self <= c {
            self
        } else {
            c
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(c: f64) -> Self {
        Var::constant(c)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn powf(self, p: f64) -> Self {
        self.unary(self.val.powf(p), p * self.val.powf(p - 1.0))
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn min_const(self, c: f64) -> Self {
        if self.val <= c {
            self.unary(self.val, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.unary(self - v.val, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        let q = self / v.val;
        v.unary(q, -q / v.val)
    }
}

/// Sum a slice of reals in order.
pub fn sum<T: Real>(xs: &[T]) -> T {
    let mut it = xs.iter();
    match it.next() {
        None => T::cst(0.0),
        Some(&first) => it.fold(first, |acc, &x| acc + x),
    }
}

/// Complex number as a pair of reals.
#[derive(Debug, Clone, Copy)]
pub struct Cx<T> {
    pub re: T,
    pub im: T,
}

impl<T: Real> Cx<T> {
    pub fn new(re: T, im: T) -> Self {
        Self { re, im }
    }

    pub fn zero() -> Self {
        Self::new(T::cst(0.0), T::cst(0.0))
    }

    pub fn from_c64(c: Complex64) -> Self {
        Self::new(T::cst(c.re), T::cst(c.im))
    }

    pub fn from_real(re: T) -> Self {
        Self::new(re, T::cst(0.0))
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    pub fn abs2(self) -> T {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> T {
        self.abs2().sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    pub fn scale_f(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    /// `self · c` for a constant complex `c`.
    pub fn mul_c(self, c: Complex64) -> Self {
        Self::new(
            self.re * c.re - self.im * c.im,
            self.re * c.im + self.im * c.re,
        )
    }

    /// `e^{jθ}`.
    pub fn exp_j(theta: T) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    /// Principal square root for values with positive real part, using the
    /// form `re = √((|z|+x)/2)`, `im = y/(2 re)` which stays smooth as y → 0.
    pub fn sqrt_pos_re(self) -> Self {
        let r = self.abs();
        let re = ((r + self.re) * 0.5).sqrt();
        let im = self.im / (re * 2.0);
        Self::new(re, im)
    }
}

impl<T: Real> Add for Cx<T> {
    type Output = Cx<T>;
    fn add(self, o: Cx<T>) -> Cx<T> {
        Cx::new(self.re + o.re, self.im + o.im)
    }
}

impl<T: Real> Sub for Cx<T> {
    type Output = Cx<T>;
    fn sub(self, o: Cx<T>) -> Cx<T> {
        Cx::new(self.re - o.re, self.im - o.im)
    }
}

impl<T: Real> Mul for Cx<T> {
    type Output = Cx<T>;
    fn mul(self, o: Cx<T>) -> Cx<T> {
        Cx::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

impl<T: Real> Div for Cx<T> {
    type Output = Cx<T>;
    fn div(self, o: Cx<T>) -> Cx<T> {
        let den = o.abs2();
        let n = self * o.conj();
        Cx::new(n.re / den, n.im / den)
    }
}

impl<T: Real> Neg for Cx<T> {
    type Output = Cx<T>;
    fn neg(self) -> Cx<T> {
        Cx::new(-self.re, -self.im)
    }
}

/// Function of a parameter vector, evaluable on any [`Real`].
pub trait ScalarFn {
    fn eval<T: Real>(&self, params: &[T]) -> T;
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tape_grad: Vec<f64>,
    pub fd_grad: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl FdReport {
    /// Every component within `rel` relative error, or within `abs` absolute.
    pub fn passes(&self, rel: f64, abs: f64) -> bool {
        self.tape_grad.iter().zip(&self.fd_grad).all(|(&g, &f)| {
            let d = (g - f).abs();
            d <= abs || d <= rel * g.abs().max(f.abs())
        })
    }
}

/// Gradient from the tape versus central differences with step `h`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, point: &[f64], h: f64) -> FdReport {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|&x| tape.var(x)).collect();
    let out = f.eval(&vars);
    let grads = out.backward();
    let tape_grad: Vec<f64> = vars.iter().map(|v| grads.wrt(v)).collect();

    let mut x = point.to_vec();
    let fd_grad: Vec<f64> = (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let fp = f.eval(&x);
            x[i] = point[i] - h;
            let fm = f.eval(&x);
            x[i] = point[i];
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (&g, &fd) in tape_grad.iter().zip(&fd_grad) {
        let d = (g - fd).abs();
        max_abs = max_abs.max(d);
        let scale = g.abs().max(fd.abs());
        if scale > 0.0 {
            max_rel = max_rel.max(d / scale);
        }
    }
    FdReport {
        tape_grad,
        fd_grad,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exp_of_zero() {
        let t = Tape::new();
        let x = t.var(0.0);
        let y = t.record(Op::Exp, &[x]).unwrap();
        assert_eq!(y.value(), 1.0);
        assert_eq!(y.backward().wrt(&x), 1.0);
    }

    #[test]
    fn mul_partials() {
        let t = Tape::new();
        let (a, b) = (t.var(3.0), t.var(4.0));
        let y = t.record(Op::Mul, &[a, b]).unwrap();
        assert_eq!(y.value(), 12.0);
        let g = y.backward();
        assert_eq!((g.wrt(&a), g.wrt(&b)), (4.0, 3.0));
    }

    #[test]
    fn sigmoid_at_zero() {
        let t = Tape::new();
        let x = t.var(0.0);
        let y = t.record(Op::Sigmoid, &[x]).unwrap();
        assert_eq!(y.value(), 0.5);
        assert_eq!(y.backward().wrt(&x), 0.25);
    }

    #[test]
    fn domain_errors() {
        let t = Tape::new();
        let z = t.var(0.0);
        let m = t.var(-1.0);
        let one = t.var(1.0);
        assert_eq!(t.record(Op::Log, &[z]).unwrap_err(), DomainError::Log(0.0));
        assert_eq!(t.record(Op::Sqrt, &[m]).unwrap_err(), DomainError::Sqrt(-1.0));
        assert_eq!(
            t.record(Op::Div, &[one, z]).unwrap_err(),
            DomainError::DivByZero
        );
        assert!(matches!(
            t.record(Op::Add, &[one]),
            Err(DomainError::Arity { .. })
        ));
        let other = Tape::new();
        let w = other.var(2.0);
        assert_eq!(
            t.record(Op::Add, &[one, w]).unwrap_err(),
            DomainError::ForeignTape
        );
        assert!(t.record(Op::Sqrt, &[z]).is_ok());
    }

    #[test]
    fn identity_and_product() {
        let t = Tape::new();
        let x = t.var(2.0);
        assert_eq!(x.backward().wrt(&x), 1.0);
        let y = t.var(3.0);
        let g = (x * y).backward();
        assert_eq!((g.wrt(&x), g.wrt(&y)), (3.0, 2.0));
    }

    #[test]
    fn min_const_clamp_branches() {
        let t = Tape::new();
        let x = t.var(2.0);
        let a = x.min_const(5.0);
        assert_eq!((a.value(), a.backward().wrt(&x)), (2.0, 1.0));
        let b = x.min_const(1.0);
        assert_eq!((b.value(), b.backward().wrt(&x)), (1.0, 0.0));
        let c = x.min_const(2.0);
        assert_eq!(c.backward().wrt(&x), 1.0, "tie goes to the unclamped branch");
    }

    #[test]
    fn constant_gradient_is_exactly_zero() {
        let t = Tape::new();
        let x = t.var(1.5);
        let c = Var::constant(3.0) * 2.0 + Var::constant(1.0).exp();
        assert!(c.is_constant());
        assert_eq!(c.backward().wrt(&x), 0.0);
        let y = x * 0.0 + 4.0;
        let g = (Var::constant(7.0) + y * 0.0).backward();
        assert_eq!(g.wrt(&x), 0.0);
    }

    struct PhaseRotate;
    impl ScalarFn for PhaseRotate {
        // |e^{jx} · a|² with a = (p1 + j p2)
        fn eval<T: Real>(&self, p: &[T]) -> T {
            let z = Cx::exp_j(p[0]) * Cx::new(p[1], p[2]);
            let w = z * z.conj() + z * Cx::new(p[1], p[0]);
            w.abs2() + z.abs2()
        }
    }

    #[test]
    fn complex_chain_matches_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r = finite_diff_check(&PhaseRotate, &x, 1e-6);
            assert!(r.passes(1e-5, 1e-9), "{r:?}");
        }
    }

    struct Quadratic;
    impl ScalarFn for Quadratic {
        fn eval<T: Real>(&self, p: &[T]) -> T {
            let a = [[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]];
            let mut acc = T::cst(0.0);
            for i in 0..3 {
                for j in 0..3 {
                    acc = acc + p[i] * p[j] * a[i][j];
                }
            }
            acc
        }
    }

    #[test]
    fn quadratic_form_fd_exact() {
        let r = finite_diff_check(&Quadratic, &[0.3, -1.2, 2.0], 1e-3);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn complex_division_and_sqrt() {
        let a = Cx::<f64>::new(1.0, 2.0);
        let b = Cx::<f64>::new(-0.5, 0.25);
        let q = (a / b).value();
        let e = Complex64::new(1.0, 2.0) / Complex64::new(-0.5, 0.25);
        assert!((q - e).norm() < 1e-14);
        let s = Cx::<f64>::new(2.0, -5.0).sqrt_pos_re().value();
        let e = Complex64::new(2.0, -5.0).sqrt();
        assert!((s - e).norm() < 1e-14);
    }

    #[test]
    fn custom_node_chains() {
        let t = Tape::new();
        let x = t.var(2.0);
        let y = t.var(-1.0);
        // f = x² y with hand partials
        let f = t.custom(-4.0, &[(x, -(2.0 * 2.0)), (y, 4.0), (Var::constant(3.0), 9.0)]);
        let g = (f * 3.0).backward();
        assert_eq!((g.wrt(&x), g.wrt(&y)), (-12.0, 12.0));
        assert!(t.custom(1.0, &[(Var::constant(1.0), 1.0)]).is_constant());
    }

    proptest! {
        #[test]
        fn linearity(a in -3.0..3.0f64, b in -3.0..3.0f64, x0 in 0.1..2.0f64, y0 in -2.0..2.0f64) {
            let t = Tape::new();
            let x = t.var(x0);
            let y = t.var(y0);
            let f = x.ln() * y + x.sin();
            let g = (x * y).exp() + y.cos();
            let combo = f * a + g * b;
            let gc = combo.backward();
            let gf = f.backward();
            let gg = g.backward();
            for v in [&x, &y] {
                let lhs = gc.wrt(v);
                let rhs = a * gf.wrt(v) + b * gg.wrt(v);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            }
        }

        #[test]
        fn deterministic_retaping(x0 in -2.0..2.0f64) {
            let run = || {
                let t = Tape::new();
                let x = t.var(x0);
                let y = (x * x + 1.0).sqrt().sigmoid() / (x.cos() + 2.0);
                (y.value(), y.backward().wrt(&x))
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }
}
