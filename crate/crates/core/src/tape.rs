//! Scalar reverse-mode differentiation with double-backward support.
//!
//! Every value is a node on an append-only [`Tape`]. Operands always precede
//! the node that uses them, so the node order is a topological order and a
//! single reverse sweep computes adjoints.
//!
//! [`Tape::backward`] returns plain numbers. [`Tape::backward_as_graph`]
//! records the adjoint sweep itself as new nodes, so the returned gradients
//! can be differentiated again. The unrolled phase-shift loop relies on the
//! latter to carry meta-gradients through its update steps.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest pivot magnitude accepted by [`Tape::solve_on_tape`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Elementary operation recorded by a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Leaf: inputs, parameters and literal constants.
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    /// `max(x, 0)`, with subgradient 0 at the kink.
    Hinge,
    /// `base.powf(exponent)`.
    Pow,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Const => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => 2,
            _ => 1,
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Op::Const => unreachable!("constants carry their own value"),
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => a / b,
            Op::Neg => -a,
            Op::Exp => a.exp(),
            Op::Log => a.ln(),
            Op::Sin => a.sin(),
            Op::Cos => a.cos(),
            Op::Tanh => a.tanh(),
            Op::Sqrt => a.sqrt(),
            Op::Hinge => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            Op::Pow => a.powf(b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Node {
    pub value: f64,
    a: u32,
    b: u32,
    pub op: Op,
}

impl Node {
    /// Operand indices, in order.
    pub fn operands(&self) -> impl Iterator<Item = Var> {
        [self.a, self.b].into_iter().take(self.op.arity()).map(Var)
    }
}

/// Append-only differentiation graph. Single writer.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Complex number stored as two real tape nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.index()]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    /// Appends a leaf holding `x`.
    pub fn constant(&mut self, x: f64) -> Result<Var> {
        self.push(Op::Const, 0, 0, x)
    }

    pub fn constants(&mut self, xs: &[f64]) -> Result<Vec<Var>> {
        xs.iter().map(|&x| self.constant(x)).collect()
    }

    /// Evaluates `op` eagerly on `operands` and appends the result.
    ///
    /// Panics if the operand count does not match the arity of `op` or an
    /// operand does not live on this tape.
    pub fn record(&mut self, op: Op, operands: &[Var]) -> Result<Var> {
        assert_eq!(operands.len(), op.arity(), "wrong operand count for {op:?}");
        assert!(op != Op::Const, "use Tape::constant for leaves");
        let a = operands[0];
        let b = operands.get(1).copied().unwrap_or(a);
        assert!(
            a.index() < self.nodes.len() && b.index() < self.nodes.len(),
            "operand not on tape"
        );
        let value = op.eval(self.value(a), self.value(b));
        self.push(op, a.0, b.0, value)
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, value: f64) -> Result<Var> {
        let index = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { op, index });
        }
        self.nodes.push(Node { value, a, b, op });
        Ok(Var(index as u32))
    }

    #[inline]
    fn binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        let value = op.eval(self.value(a), self.value(b));
        self.push(op, a.0, b.0, value)
    }

    #[inline]
    fn unary(&mut self, op: Op, a: Var) -> Result<Var> {
        let value = op.eval(self.value(a), 0.0);
        self.push(op, a.0, a.0, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b)
    }
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        self.binary(Op::Pow, base, exponent)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Cos, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a)
    }
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Hinge, a)
    }

    /// `a * c` for a literal `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.constant(c)?;
        self.mul(a, c)
    }

    pub fn powf(&mut self, base: Var, exponent: f64) -> Result<Var> {
        let e = self.constant(exponent)?;
        self.pow(base, e)
    }

    /// Left-to-right sum. An empty slice yields a new zero constant.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return self.constant(0.0);
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `acc + a * b`, or just `a * b` when there is no accumulator yet.
    #[inline]
    pub fn mul_add(&mut self, acc: Option<Var>, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        match acc {
            Some(acc) => self.add(acc, p),
            None => Ok(p),
        }
    }

    /// Re-evaluates every node from its operands.
    pub fn replay(&self) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Const => node.value,
                op => op.eval(values[node.a as usize], values[node.b as usize]),
            };
            values.push(v);
        }
        values
    }

    /// Gradient of `output` with respect to each of `wrt`, as plain numbers.
    /// Leaves the tape unchanged.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Vec<f64> {
        let out = output.index();
        let lo = wrt.iter().map(|v| v.index()).min().unwrap_or(out).min(out);
        let mut adj = vec![0.0f64; out + 1 - lo];
        adj[out - lo] = 1.0;
        for i in (lo..=out).rev() {
            let g = adj[i - lo];
            if g == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let (a, b) = (node.a as usize, node.b as usize);
            let (da, db) = match node.op {
                Op::Const => continue,
                Op::Add => (g, g),
                Op::Sub => (g, -g),
                Op::Mul => (g * self.nodes[b].value, g * self.nodes[a].value),
                Op::Div => {
                    let q = g / self.nodes[b].value;
                    (q, -q * node.value)
                }
                Op::Neg => (-g, 0.0),
                Op::Exp => (g * node.value, 0.0),
                Op::Log => (g / self.nodes[a].value, 0.0),
                Op::Sin => (g * self.nodes[a].value.cos(), 0.0),
                Op::Cos => (-g * self.nodes[a].value.sin(), 0.0),
                Op::Tanh => (g * (1.0 - node.value * node.value), 0.0),
                Op::Sqrt => (g / (2.0 * node.value), 0.0),
                Op::Hinge => (if self.nodes[a].value > 0.0 { g } else { 0.0 }, 0.0),
                Op::Pow => {
                    let (x, p) = (self.nodes[a].value, self.nodes[b].value);
                    let dp = if x > 0.0 { g * node.value * x.ln() } else { 0.0 };
                    (g * p * x.powf(p - 1.0), dp)
                }
            };
            if a >= lo {
                adj[a - lo] += da;
            }
            if node.op.arity() == 2 && b >= lo {
                adj[b - lo] += db;
            }
        }
        wrt.iter()
            .map(|v| {
                let i = v.index();
                if i >= lo && i <= out {
                    adj[i - lo]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Like [`Tape::backward`], but records the adjoint sweep on the tape and
    /// returns the gradients as nodes, so they can be differentiated again.
    ///
    /// Only nodes that depend on some `wrt` entry receive adjoints.
    pub fn backward_as_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = output.index();
        let lo = wrt.iter().map(|v| v.index()).min().unwrap_or(out).min(out);
        let width = out + 1 - lo;

        let mut dep = vec![false; width];
        for v in wrt {
            if v.index() <= out {
                dep[v.index() - lo] = true;
            }
        }
        for i in lo..=out {
            if dep[i - lo] {
                continue;
            }
            let node = &self.nodes[i];
            if node.op == Op::Const {
                continue;
            }
            let (a, b) = (node.a as usize, node.b as usize);
            dep[i - lo] = (a >= lo && dep[a - lo]) || (b >= lo && dep[b - lo]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; width];
        let seed = self.constant(1.0)?;
        if dep[out - lo] {
            adj[out - lo] = Some(seed);
        }
        let mut one: Option<Var> = None;

        for i in (lo..=out).rev() {
            let Some(g) = adj[i - lo] else { continue };
            let node = self.nodes[i];
            let y = Var(i as u32);
            let (a, b) = (Var(node.a), Var(node.b));
            let wants = |v: Var| v.index() >= lo && dep[v.index() - lo];
            match node.op {
                Op::Const => {}
                Op::Add => {
                    if wants(a) {
                        self.accumulate(&mut adj[a.index() - lo], g, false)?;
                    }
                    if wants(b) {
                        self.accumulate(&mut adj[b.index() - lo], g, false)?;
                    }
                }
                Op::Sub => {
                    if wants(a) {
                        self.accumulate(&mut adj[a.index() - lo], g, false)?;
                    }
                    if wants(b) {
                        self.accumulate(&mut adj[b.index() - lo], g, true)?;
                    }
                }
                Op::Mul => {
                    if wants(a) {
                        let c = self.mul(g, b)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                    if wants(b) {
                        let c = self.mul(g, a)?;
                        self.accumulate(&mut adj[b.index() - lo], c, false)?;
                    }
                }
                Op::Div => {
                    let q = self.div(g, b)?;
                    if wants(a) {
                        self.accumulate(&mut adj[a.index() - lo], q, false)?;
                    }
                    if wants(b) {
                        let c = self.mul(q, y)?;
                        self.accumulate(&mut adj[b.index() - lo], c, true)?;
                    }
                }
                Op::Neg => {
                    if wants(a) {
                        self.accumulate(&mut adj[a.index() - lo], g, true)?;
                    }
                }
                Op::Exp => {
                    if wants(a) {
                        let c = self.mul(g, y)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                }
                Op::Log => {
                    if wants(a) {
                        let c = self.div(g, a)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                }
                Op::Sin => {
                    if wants(a) {
                        let d = self.cos(a)?;
                        let c = self.mul(g, d)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                }
                Op::Cos => {
                    if wants(a) {
                        let d = self.sin(a)?;
                        let c = self.mul(g, d)?;
                        self.accumulate(&mut adj[a.index() - lo], c, true)?;
                    }
                }
                Op::Tanh => {
                    if wants(a) {
                        // g * (1 - y^2) written as g - g*y*y
                        let yy = self.mul(y, y)?;
                        let gyy = self.mul(g, yy)?;
                        let c = self.sub(g, gyy)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                }
                Op::Sqrt => {
                    if wants(a) {
                        let twice = self.add(y, y)?;
                        let c = self.div(g, twice)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                }
                Op::Hinge => {
                    if wants(a) && self.value(a) > 0.0 {
                        self.accumulate(&mut adj[a.index() - lo], g, false)?;
                    }
                }
                Op::Pow => {
                    if wants(a) {
                        let one = match one {
                            Some(v) => v,
                            None => *one.insert(self.constant(1.0)?),
                        };
                        let pm1 = self.sub(b, one)?;
                        let xp = self.pow(a, pm1)?;
                        let d = self.mul(b, xp)?;
                        let c = self.mul(g, d)?;
                        self.accumulate(&mut adj[a.index() - lo], c, false)?;
                    }
                    if wants(b) && self.value(a) > 0.0 {
                        let l = self.ln(a)?;
                        let yl = self.mul(y, l)?;
                        let c = self.mul(g, yl)?;
                        self.accumulate(&mut adj[b.index() - lo], c, false)?;
                    }
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for v in wrt {
            let i = v.index();
            let g = if i >= lo && i <= out { adj[i - lo] } else { None };
            grads.push(match g {
                Some(g) => g,
                None => self.constant(0.0)?,
            });
        }
        Ok(grads)
    }

    #[inline]
    fn accumulate(&mut self, slot: &mut Option<Var>, contribution: Var, negate: bool) -> Result<()> {
        *slot = Some(match (*slot, negate) {
            (None, false) => contribution,
            (None, true) => self.neg(contribution)?,
            (Some(acc), false) => self.add(acc, contribution)?,
            (Some(acc), true) => self.sub(acc, contribution)?,
        });
        Ok(())
    }

    // Complex arithmetic on real pairs.

    pub fn c_constant(&mut self, z: Complex64) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: self.constant(z.re)?,
            im: self.constant(z.im)?,
        })
    }

    pub fn c_value(&self, z: ComplexVar) -> Complex64 {
        Complex64::new(self.value(z.re), self.value(z.im))
    }

    pub fn c_add(&mut self, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: self.add(x.re, y.re)?,
            im: self.add(x.im, y.im)?,
        })
    }

    pub fn c_sub(&mut self, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: self.sub(x.re, y.re)?,
            im: self.sub(x.im, y.im)?,
        })
    }

    pub fn c_mul(&mut self, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
        let rr = self.mul(x.re, y.re)?;
        let ii = self.mul(x.im, y.im)?;
        let ri = self.mul(x.re, y.im)?;
        let ir = self.mul(x.im, y.re)?;
        Ok(ComplexVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    /// `conj(x) * y`.
    pub fn c_conj_mul(&mut self, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
        let rr = self.mul(x.re, y.re)?;
        let ii = self.mul(x.im, y.im)?;
        let ri = self.mul(x.re, y.im)?;
        let ir = self.mul(x.im, y.re)?;
        Ok(ComplexVar {
            re: self.add(rr, ii)?,
            im: self.sub(ri, ir)?,
        })
    }

    pub fn c_conj(&mut self, x: ComplexVar) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: x.re,
            im: self.neg(x.im)?,
        })
    }

    /// `|x|^2` as a real node.
    pub fn c_abs2(&mut self, x: ComplexVar) -> Result<Var> {
        let rr = self.mul(x.re, x.re)?;
        let ii = self.mul(x.im, x.im)?;
        self.add(rr, ii)
    }

    /// Multiplies by a real node.
    pub fn c_scale(&mut self, x: ComplexVar, s: Var) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: self.mul(x.re, s)?,
            im: self.mul(x.im, s)?,
        })
    }

    pub fn c_div_real(&mut self, x: ComplexVar, s: Var) -> Result<ComplexVar> {
        Ok(ComplexVar {
            re: self.div(x.re, s)?,
            im: self.div(x.im, s)?,
        })
    }

    /// `sum_i conj(x_i) * y_i`.
    pub fn c_inner(&mut self, x: &[ComplexVar], y: &[ComplexVar]) -> Result<ComplexVar> {
        assert_eq!(x.len(), y.len());
        let mut re: Option<Var> = None;
        let mut im: Option<Var> = None;
        for (&a, &b) in x.iter().zip(y) {
            // conj(a) b = (ar br + ai bi) + j (ar bi - ai br)
            re = Some(self.mul_add(re, a.re, b.re)?);
            re = Some(self.mul_add(re, a.im, b.im)?);
            im = Some(self.mul_add(im, a.re, b.im)?);
            let t = self.mul(a.im, b.re)?;
            im = Some(self.sub(im.expect("set above"), t)?);
        }
        match (re, im) {
            (Some(re), Some(im)) => Ok(ComplexVar { re, im }),
            _ => self.c_constant(Complex64::new(0.0, 0.0)),
        }
    }

    /// `1 / x`.
    pub fn c_recip(&mut self, x: ComplexVar) -> Result<ComplexVar> {
        let m = self.c_abs2(x)?;
        let re = self.div(x.re, m)?;
        let q = self.div(x.im, m)?;
        let im = self.neg(q)?;
        Ok(ComplexVar { re, im })
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting, every
    /// scalar step recorded on the tape.
    pub fn solve_on_tape(&mut self, a: &[Vec<ComplexVar>], b: &[ComplexVar]) -> Result<Vec<ComplexVar>> {
        let columns: Vec<Vec<ComplexVar>> = b.iter().map(|&z| vec![z]).collect();
        let x = self.solve_many(a, &columns)?;
        Ok(x.into_iter().map(|row| row[0]).collect())
    }

    /// Solves `A X = B` for several right-hand sides at once. `b` is row-major
    /// with one row per equation; the result has the same shape.
    pub fn solve_many(&mut self, a: &[Vec<ComplexVar>], b: &[Vec<ComplexVar>]) -> Result<Vec<Vec<ComplexVar>>> {
        let n = a.len();
        assert_eq!(b.len(), n, "right-hand side has wrong row count");
        let nrhs = b.first().map_or(0, Vec::len);
        let mut rows: Vec<Vec<ComplexVar>> = a
            .iter()
            .zip(b)
            .map(|(ar, br)| {
                assert_eq!(ar.len(), n, "matrix must be square");
                ar.iter().chain(br).copied().collect()
            })
            .collect();

        let mut pivots_inv = Vec::with_capacity(n);
        for col in 0..n {
            let (best, magnitude) = (col..n)
                .map(|r| (r, self.c_value(rows[r][col]).norm()))
                .fold((col, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if magnitude < PIVOT_TOLERANCE {
                return Err(Error::SingularMatrix { pivot: magnitude });
            }
            rows.swap(col, best);
            let inv = self.c_recip(rows[col][col])?;
            pivots_inv.push(inv);
            for r in col + 1..n {
                let factor = self.c_mul(rows[r][col], inv)?;
                for c in col + 1..n + nrhs {
                    let t = self.c_mul(factor, rows[col][c])?;
                    rows[r][c] = self.c_sub(rows[r][c], t)?;
                }
            }
        }

        let mut x: Vec<Vec<ComplexVar>> = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let mut xi = Vec::with_capacity(nrhs);
            for k in 0..nrhs {
                let mut acc = rows[i][n + k];
                for j in i + 1..n {
                    let t = self.c_mul(rows[i][j], x[j][k])?;
                    acc = self.c_sub(acc, t)?;
                }
                xi.push(self.c_mul(acc, pivots_inv[i])?);
            }
            x[i] = xi;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300).max(a.abs()).max(1e-12)
    }

    /// Central difference of a closure that rebuilds its graph on a fresh tape.
    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn record_square() {
        let mut t = Tape::new();
        let x = t.constant(3.0).unwrap();
        let y = t.record(Op::Mul, &[x, x]).unwrap();
        assert_eq!(t.value(y), 9.0);
    }

    #[test]
    fn record_exp_zero() {
        let mut t = Tape::new();
        let x = t.constant(0.0).unwrap();
        let y = t.record(Op::Exp, &[x]).unwrap();
        assert_eq!(t.value(y), 1.0);
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut t = Tape::new();
        let one = t.constant(1.0).unwrap();
        let zero = t.constant(0.0).unwrap();
        let before = t.len();
        let err = t.record(Op::Div, &[one, zero]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { op: Op::Div, .. }));
        assert_eq!(t.len(), before);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.constant(3.0).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y, &[x]), vec![6.0]);
    }

    #[test]
    fn backward_exp_plus() {
        let mut t = Tape::new();
        let x = t.constant(0.0).unwrap();
        let y = t.constant(5.0).unwrap();
        let e = t.exp(x).unwrap();
        let f = t.add(e, y).unwrap();
        assert_eq!(t.backward(f, &[x, y]), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_tanh_matches_finite_difference() {
        let mut t = Tape::new();
        let x = t.constant(0.5).unwrap();
        let y = t.tanh(x).unwrap();
        let g = t.backward(y, &[x])[0];
        let fd = central_difference(f64::tanh, 0.5, 1e-6);
        assert!(rel_err(g, fd) < 1e-7, "{g} vs {fd}");
    }

    #[test]
    fn plain_backward_leaves_tape_untouched() {
        let mut t = Tape::new();
        let x = t.constant(1.3).unwrap();
        let y = t.sin(x).unwrap();
        let len = t.len();
        t.backward(y, &[x]);
        assert_eq!(t.len(), len);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.constant(2.0).unwrap();
        let x2 = t.mul(x, x).unwrap();
        let f = t.mul(x2, x).unwrap();
        let before = t.len();
        let g = t.backward_as_graph(f, &[x]).unwrap()[0];
        assert!(t.len() > before);
        assert_eq!(t.value(g), 12.0);
        assert_eq!(t.backward(g, &[x]), vec![12.0]);
    }

    #[test]
    fn cross_partial() {
        let mut t = Tape::new();
        let x = t.constant(2.0).unwrap();
        let y = t.constant(3.0).unwrap();
        let f = t.mul(x, y).unwrap();
        let gx = t.backward_as_graph(f, &[x]).unwrap()[0];
        assert_eq!(t.value(gx), 3.0);
        assert_eq!(t.backward(gx, &[y]), vec![1.0]);
    }

    /// loss(w, v, x) = (v * tanh(w x) - 1)^2 for one hidden unit.
    fn tiny_net_loss(t: &mut Tape, w: Var, v: Var, x: f64) -> Var {
        let xc = t.constant(x).unwrap();
        let wx = t.mul(w, xc).unwrap();
        let h = t.tanh(wx).unwrap();
        let o = t.mul(v, h).unwrap();
        let one = t.constant(1.0).unwrap();
        let e = t.sub(o, one).unwrap();
        t.mul(e, e).unwrap()
    }

    #[test]
    fn double_backward_tiny_network_matches_fd_of_gradient() {
        let grad_w = |w: f64, v: f64| {
            let mut t = Tape::new();
            let wv = t.constant(w).unwrap();
            let vv = t.constant(v).unwrap();
            let l = tiny_net_loss(&mut t, wv, vv, 0.7);
            t.backward(l, &[wv])[0]
        };
        let (w0, v0) = (0.4, 1.7);
        let mut t = Tape::new();
        let w = t.constant(w0).unwrap();
        let v = t.constant(v0).unwrap();
        let l = tiny_net_loss(&mut t, w, v, 0.7);
        let gw = t.backward_as_graph(l, &[w]).unwrap()[0];
        let second = t.backward(gw, &[w, v]);
        let h = 1e-6;
        let fd_ww = (grad_w(w0 + h, v0) - grad_w(w0 - h, v0)) / (2.0 * h);
        let fd_wv = (grad_w(w0, v0 + h) - grad_w(w0, v0 - h)) / (2.0 * h);
        assert!(rel_err(second[0], fd_ww) < 1e-5, "{} vs {fd_ww}", second[0]);
        assert!(rel_err(second[1], fd_wv) < 1e-5, "{} vs {fd_wv}", second[1]);
    }

    #[test]
    fn hinge_subgradient_at_kink_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(0.0).unwrap();
        let y = t.hinge(x).unwrap();
        assert_eq!(t.backward(y, &[x]), vec![0.0]);
        let g = t.backward_as_graph(y, &[x]).unwrap()[0];
        assert_eq!(t.value(g), 0.0);
    }

    #[test]
    fn every_op_first_and_second_order_against_fd() {
        // (op, input point) pairs chosen inside each op's domain.
        let cases: &[(Op, f64)] = &[
            (Op::Neg, 0.3),
            (Op::Exp, 0.4),
            (Op::Log, 1.9),
            (Op::Sin, 0.8),
            (Op::Cos, 1.1),
            (Op::Tanh, -0.6),
            (Op::Sqrt, 2.5),
            (Op::Hinge, 0.9),
        ];
        for &(op, x0) in cases {
            // f(x) = op(x) * x keeps second derivatives nonzero for linear ops
            let eval = |x: f64| {
                let mut t = Tape::new();
                let xv = t.constant(x).unwrap();
                let y = t.record(op, &[xv]).unwrap();
                let f = t.mul(y, xv).unwrap();
                (t.value(f), t.backward(f, &[xv])[0])
            };
            let h = 1e-6 * x0.abs().max(1.0);
            let fd1 = (eval(x0 + h).0 - eval(x0 - h).0) / (2.0 * h);
            let fd2 = (eval(x0 + h).1 - eval(x0 - h).1) / (2.0 * h);
            let mut t = Tape::new();
            let xv = t.constant(x0).unwrap();
            let y = t.record(op, &[xv]).unwrap();
            let f = t.mul(y, xv).unwrap();
            let g = t.backward_as_graph(f, &[xv]).unwrap()[0];
            let gg = t.backward(g, &[xv])[0];
            assert!(rel_err(t.value(g), fd1) < 1e-5, "{op:?} first order");
            assert!(rel_err(gg, fd2) < 1e-4, "{op:?} second order: {gg} vs {fd2}");
        }
        // binary ops: f(x, y) at a fixed point, gradient in both arguments
        for op in [Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow] {
            let (x0, y0) = (1.3, 0.7);
            let eval = |x: f64, y: f64| {
                let mut t = Tape::new();
                let xv = t.constant(x).unwrap();
                let yv = t.constant(y).unwrap();
                let f = t.record(op, &[xv, yv]).unwrap();
                let f = t.mul(f, f).unwrap();
                (t.value(f), t.backward(f, &[xv, yv]))
            };
            let h = 1e-6;
            let mut t = Tape::new();
            let xv = t.constant(x0).unwrap();
            let yv = t.constant(y0).unwrap();
            let f = t.record(op, &[xv, yv]).unwrap();
            let f = t.mul(f, f).unwrap();
            let g = t.backward_as_graph(f, &[xv, yv]).unwrap();
            let fdx = (eval(x0 + h, y0).0 - eval(x0 - h, y0).0) / (2.0 * h);
            let fdy = (eval(x0, y0 + h).0 - eval(x0, y0 - h).0) / (2.0 * h);
            assert!(rel_err(t.value(g[0]), fdx) < 1e-5, "{op:?} d/dx");
            assert!(rel_err(t.value(g[1]), fdy) < 1e-5, "{op:?} d/dy");
            let hxy = t.backward(g[0], &[yv])[0];
            let fd_xy = (eval(x0, y0 + h).1[0] - eval(x0, y0 - h).1[0]) / (2.0 * h);
            assert!((hxy - fd_xy).abs() <= 1e-4 * fd_xy.abs().max(1e-3), "{op:?} d2/dxdy");
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let x = t.constant(0.37).unwrap();
        let y = t.constant(-1.2).unwrap();
        let a = t.tanh(x).unwrap();
        let b = t.mul(a, y).unwrap();
        let c = t.exp(b).unwrap();
        let d = t.powf(c, 1.5).unwrap();
        let _ = t.backward_as_graph(d, &[x, y]).unwrap();
        let replayed = t.replay();
        for (node, v) in t.nodes().iter().zip(&replayed) {
            assert_eq!(node.value.to_bits(), v.to_bits());
        }
    }

    fn c(t: &mut Tape, re: f64, im: f64) -> ComplexVar {
        t.c_constant(Complex64::new(re, im)).unwrap()
    }

    #[test]
    fn solve_identity() {
        let mut t = Tape::new();
        let (one, zero) = (c(&mut t, 1.0, 0.0), c(&mut t, 0.0, 0.0));
        let a = vec![vec![one, zero], vec![zero, one]];
        let b = vec![c(&mut t, 1.0, 0.0), c(&mut t, 0.0, 2.0)];
        let x = t.solve_on_tape(&a, &b).unwrap();
        assert_eq!(t.c_value(x[0]), Complex64::new(1.0, 0.0));
        assert_eq!(t.c_value(x[1]), Complex64::new(0.0, 2.0));
    }

    #[test]
    fn solve_diagonal() {
        let mut t = Tape::new();
        let zero = c(&mut t, 0.0, 0.0);
        let a = vec![vec![c(&mut t, 2.0, 0.0), zero], vec![zero, c(&mut t, 4.0, 0.0)]];
        let b = vec![c(&mut t, 2.0, 0.0), c(&mut t, 4.0, 0.0)];
        let x = t.solve_on_tape(&a, &b).unwrap();
        assert_eq!(t.c_value(x[0]), Complex64::new(1.0, 0.0));
        assert_eq!(t.c_value(x[1]), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn solve_singular() {
        let mut t = Tape::new();
        let zero = c(&mut t, 0.0, 0.0);
        let one = c(&mut t, 1.0, 0.0);
        let a = vec![vec![one, one], vec![one, one]];
        let err = t.solve_on_tape(&a, &[one, zero]).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    /// Hermitian positive definite A = B^H B + I from a fixed B.
    fn hpd3() -> Vec<Vec<Complex64>> {
        let b = [
            [Complex64::new(0.3, -0.2), Complex64::new(1.1, 0.4), Complex64::new(-0.5, 0.9)],
            [Complex64::new(0.7, 0.1), Complex64::new(-0.2, -0.6), Complex64::new(0.4, 0.3)],
            [Complex64::new(-0.9, 0.5), Complex64::new(0.2, 0.2), Complex64::new(0.6, -1.0)],
        ];
        let mut a = vec![vec![Complex64::new(0.0, 0.0); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
                for row in &b {
                    s += row[i].conj() * row[j];
                }
                a[i][j] = s;
            }
        }
        a
    }

    #[test]
    fn solve_random_hpd_residual_and_gradient() {
        let a0 = hpd3();
        let rhs = [Complex64::new(1.0, -0.5), Complex64::new(0.25, 2.0), Complex64::new(-1.5, 0.75)];
        // objective: |x_0|^2 + Re(x_2), differentiated w.r.t. Re(A[1][1])
        let objective = |delta: f64| -> (f64, Vec<Complex64>, f64) {
            let mut t = Tape::new();
            let mut a = Vec::new();
            let mut probe = None;
            for (i, row) in a0.iter().enumerate() {
                let mut r = Vec::new();
                for (j, &z) in row.iter().enumerate() {
                    let z = if i == 1 && j == 1 { z + delta } else { z };
                    let cv = t.c_constant(z).unwrap();
                    if i == 1 && j == 1 {
                        probe = Some(cv.re);
                    }
                    r.push(cv);
                }
                a.push(r);
            }
            let b: Vec<_> = rhs.iter().map(|&z| t.c_constant(z).unwrap()).collect();
            let x = t.solve_on_tape(&a, &b).unwrap();
            let n0 = t.c_abs2(x[0]).unwrap();
            let f = t.add(n0, x[2].re).unwrap();
            let g = t.backward(f, &[probe.unwrap()])[0];
            (t.value(f), x.iter().map(|&z| t.c_value(z)).collect(), g)
        };
        let (_, x, g) = objective(0.0);
        for i in 0..3 {
            let mut r = -rhs[i];
            for j in 0..3 {
                r += a0[i][j] * x[j];
            }
            assert!(r.norm() < 1e-10);
        }
        let h = 1e-6;
        let fd = (objective(h).0 - objective(-h).0) / (2.0 * h);
        assert!(rel_err(g, fd) < 1e-5, "{g} vs {fd}");
    }
}
