//! Scalar reverse-mode automatic differentiation over an append-only
//! expression arena.
//!
//! Every quantity is a node in a [`Graph`]. Derivatives requested with
//! `create_graph` are themselves emitted as ordinary nodes, so they can be
//! differentiated again to any order. [`Graph::stop_gradient`] and
//! [`Graph::magicbox`] provide the two primitives needed by the DiCE family
//! of objectives.

mod linalg;

pub use linalg::linear_solve;

use thiserror::Error;

/// Errors raised while building or differentiating an expression graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("log of non-positive value {value} at node {node}")]
    LogDomain { node: usize, value: f64 },
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("pow of negative base {base} with non-integer exponent {exponent} at node {node}")]
    PowDomain {
        node: usize,
        base: f64,
        exponent: f64,
    },
    #[error("non-finite value {value} produced by `{op}` at node {node}")]
    NonFinite {
        node: usize,
        op: &'static str,
        value: f64,
    },
    #[error("node {node} is not a variable and cannot be differentiated against")]
    NotAVariable { node: usize },
    #[error("singular linear system: pivot {pivot:e} in column {column}")]
    Singular { column: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`], carrying the node's cached value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExprRef {
    index: usize,
    value: f64,
}

impl ExprRef {
    #[inline]
    pub fn value(self) -> f64 {
        self.value
    }

    #[inline]
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Variable,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    StopGradient(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
}

/// A request for the derivatives of `output` with respect to `wrt`.
#[derive(Debug, Clone)]
pub struct GradientRequest {
    pub output: ExprRef,
    pub wrt: Vec<ExprRef>,
    /// Emit the derivatives as differentiable graph nodes.
    pub create_graph: bool,
}

/// Append-only expression arena. Parents always precede children, so node
/// order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_variable(&self, x: ExprRef) -> bool {
        matches!(self.nodes[x.index].op, Op::Variable)
    }

    fn is_constant(&self, x: ExprRef) -> bool {
        matches!(self.nodes[x.index].op, Op::Constant)
    }

    fn handle(&self, index: usize) -> ExprRef {
        ExprRef {
            index,
            value: self.nodes[index].value,
        }
    }

    fn push(&mut self, op: Op, value: f64) -> Result<ExprRef> {
        let index = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: index,
                op: op.name(),
                value,
            });
        }
        self.nodes.push(Node { op, value });
        Ok(ExprRef { index, value })
    }

    pub fn variable(&mut self, value: f64) -> Result<ExprRef> {
        self.push(Op::Variable, value)
    }

    pub fn constant(&mut self, value: f64) -> Result<ExprRef> {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: ExprRef, b: ExprRef) -> Result<ExprRef> {
        self.push(Op::Add(a.index, b.index), a.value + b.value)
    }

    pub fn sub(&mut self, a: ExprRef, b: ExprRef) -> Result<ExprRef> {
        self.push(Op::Sub(a.index, b.index), a.value - b.value)
    }

    pub fn mul(&mut self, a: ExprRef, b: ExprRef) -> Result<ExprRef> {
        self.push(Op::Mul(a.index, b.index), a.value * b.value)
    }

    pub fn div(&mut self, a: ExprRef, b: ExprRef) -> Result<ExprRef> {
        if b.value == 0.0 {
            return Err(AutodiffError::DivisionByZero {
                node: self.nodes.len(),
            });
        }
        self.push(Op::Div(a.index, b.index), a.value / b.value)
    }

    pub fn neg(&mut self, a: ExprRef) -> Result<ExprRef> {
        self.push(Op::Neg(a.index), -a.value)
    }

    pub fn exp(&mut self, a: ExprRef) -> Result<ExprRef> {
        self.push(Op::Exp(a.index), a.value.exp())
    }

    pub fn log(&mut self, a: ExprRef) -> Result<ExprRef> {
        if a.value <= 0.0 {
            return Err(AutodiffError::LogDomain {
                node: self.nodes.len(),
                value: a.value,
            });
        }
        self.push(Op::Log(a.index), a.value.ln())
    }

    /// `a` raised to a constant real exponent.
    pub fn pow(&mut self, a: ExprRef, exponent: f64) -> Result<ExprRef> {
        if a.value < 0.0 && exponent.fract() != 0.0 {
            return Err(AutodiffError::PowDomain {
                node: self.nodes.len(),
                base: a.value,
                exponent,
            });
        }
        if a.value == 0.0 && exponent < 0.0 {
            return Err(AutodiffError::DivisionByZero {
                node: self.nodes.len(),
            });
        }
        self.push(Op::Pow(a.index, exponent), a.value.powf(exponent))
    }

    /// Identity on evaluation; contributes nothing to derivatives of any order.
    pub fn stop_gradient(&mut self, a: ExprRef) -> Result<ExprRef> {
        self.push(Op::StopGradient(a.index), a.value)
    }

    /// `exp(x - stop_gradient(x))`: evaluates to exactly 1.0 while every
    /// derivative reproduces the corresponding derivative of `exp(x)` at
    /// the evaluation point.
    pub fn magicbox(&mut self, x: ExprRef) -> Result<ExprRef> {
        let frozen = self.stop_gradient(x)?;
        let shifted = self.sub(x, frozen)?;
        self.exp(shifted)
    }

    /// Multiply by a plain number.
    pub fn scale(&mut self, a: ExprRef, factor: f64) -> Result<ExprRef> {
        let c = self.constant(factor)?;
        self.mul(a, c)
    }

    /// Left-to-right sum; an empty slice yields the constant 0.
    pub fn sum(&mut self, terms: &[ExprRef]) -> Result<ExprRef> {
        let Some((&first, rest)) = terms.split_first() else {
            return self.constant(0.0);
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Derivatives of `req.output` with respect to each `req.wrt` entry, in order.
    ///
    /// Variables the output does not depend on get the constant 0.
    pub fn grad(&mut self, req: &GradientRequest) -> Result<Vec<ExprRef>> {
        for w in &req.wrt {
            if !self.is_variable(*w) {
                return Err(AutodiffError::NotAVariable { node: w.index });
            }
        }
        if req.create_graph {
            self.backward_graph(req.output, &req.wrt)
        } else {
            let values = self.backward_values(req.output, &req.wrt)?;
            values.into_iter().map(|v| self.constant(v)).collect()
        }
    }

    /// Shorthand for a graph-building [`grad`](Self::grad) call.
    pub fn grad_graph(&mut self, output: ExprRef, wrt: &[ExprRef]) -> Result<Vec<ExprRef>> {
        self.grad(&GradientRequest {
            output,
            wrt: wrt.to_vec(),
            create_graph: true,
        })
    }

    /// Numeric derivatives without touching the graph.
    pub fn grad_values(&self, output: ExprRef, wrt: &[ExprRef]) -> Result<Vec<f64>> {
        for w in wrt {
            if !self.is_variable(*w) {
                return Err(AutodiffError::NotAVariable { node: w.index });
            }
        }
        self.backward_values(output, wrt)
    }

    /// Marks the nodes in `0..=output` whose value depends on one of `wrt`
    /// through differentiable edges.
    fn active_set(&self, output: usize, wrt: &[ExprRef]) -> Vec<bool> {
        let mut active = vec![false; output + 1];
        for w in wrt {
            if w.index <= output {
                active[w.index] = true;
            }
        }
        for i in 0..=output {
            if active[i] {
                continue;
            }
            active[i] = match self.nodes[i].op {
                Op::Variable | Op::Constant | Op::StopGradient(_) => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    active[a] || active[b]
                }
                Op::Neg(a) | Op::Exp(a) | Op::Log(a) | Op::Pow(a, _) => active[a],
            };
        }
        active
    }

    fn backward_values(&self, output: ExprRef, wrt: &[ExprRef]) -> Result<Vec<f64>> {
        let out = output.index;
        let active = self.active_set(out, wrt);
        let mut adj = vec![0.0_f64; out + 1];
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let g = adj[i];
            if g == 0.0 || !active[i] {
                continue;
            }
            let node = self.nodes[i];
            let val = |j: usize| self.nodes[j].value;
            match node.op {
                Op::Variable | Op::Constant | Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a] += g * val(b);
                    adj[b] += g * val(a);
                }
                Op::Div(a, b) => {
                    adj[a] += g / val(b);
                    adj[b] -= g * node.value / val(b);
                }
                Op::Neg(a) => adj[a] -= g,
                Op::Exp(a) => adj[a] += g * node.value,
                Op::Log(a) => adj[a] += g / val(a),
                Op::Pow(a, p) => {
                    if p != 0.0 {
                        adj[a] += g * p * val(a).powf(p - 1.0);
                    }
                }
            }
        }
        wrt.iter()
            .map(|w| {
                let v = if w.index <= out { adj[w.index] } else { 0.0 };
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(AutodiffError::NonFinite {
                        node: w.index,
                        op: "adjoint",
                        value: v,
                    })
                }
            })
            .collect()
    }

    fn backward_graph(&mut self, output: ExprRef, wrt: &[ExprRef]) -> Result<Vec<ExprRef>> {
        let out = output.index;
        let active = self.active_set(out, wrt);
        let mut adj: Vec<Option<ExprRef>> = vec![None; out + 1];
        adj[out] = Some(self.constant(1.0)?);
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            if !active[i] {
                continue;
            }
            let node = self.nodes[i];
            let this = self.handle(i);
            match node.op {
                Op::Variable | Op::Constant | Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, &active, a, g)?;
                    self.accumulate(&mut adj, &active, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, &active, a, g)?;
                    if active[b] {
                        let ng = self.neg(g)?;
                        self.accumulate(&mut adj, &active, b, ng)?;
                    }
                }
                Op::Mul(a, b) => {
                    if active[a] {
                        let gb = self.mul_folded(g, self.handle(b))?;
                        self.accumulate(&mut adj, &active, a, gb)?;
                    }
                    if active[b] {
                        let ga = self.mul_folded(g, self.handle(a))?;
                        self.accumulate(&mut adj, &active, b, ga)?;
                    }
                }
                Op::Div(a, b) => {
                    let hb = self.handle(b);
                    if active[a] {
                        let ga = self.div(g, hb)?;
                        self.accumulate(&mut adj, &active, a, ga)?;
                    }
                    if active[b] {
                        let q = self.div(this, hb)?;
                        let gq = self.mul_folded(g, q)?;
                        let ngq = self.neg(gq)?;
                        self.accumulate(&mut adj, &active, b, ngq)?;
                    }
                }
                Op::Neg(a) => {
                    let ng = self.neg(g)?;
                    self.accumulate(&mut adj, &active, a, ng)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul_folded(g, this)?;
                    self.accumulate(&mut adj, &active, a, ga)?;
                }
                Op::Log(a) => {
                    let ga = self.div(g, self.handle(a))?;
                    self.accumulate(&mut adj, &active, a, ga)?;
                }
                Op::Pow(a, p) => {
                    if p != 0.0 {
                        let base = self.handle(a);
                        let lowered = if p == 1.0 {
                            self.constant(1.0)?
                        } else {
                            self.pow(base, p - 1.0)?
                        };
                        let coef = self.scale(lowered, p)?;
                        let ga = self.mul_folded(g, coef)?;
                        self.accumulate(&mut adj, &active, a, ga)?;
                    }
                }
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.index).copied().flatten() {
                Some(d) => Ok(d),
                None => self.constant(0.0),
            })
            .collect()
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<ExprRef>],
        active: &[bool],
        target: usize,
        contribution: ExprRef,
    ) -> Result<()> {
        if !active[target] {
            return Ok(());
        }
        adj[target] = Some(match adj[target] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }

    /// Product with unit and constant folding, used when emitting adjoints.
    fn mul_folded(&mut self, a: ExprRef, b: ExprRef) -> Result<ExprRef> {
        let a_const = self.is_constant(a);
        let b_const = self.is_constant(b);
        if a_const && a.value == 1.0 {
            return Ok(b);
        }
        if b_const && b.value == 1.0 {
            return Ok(a);
        }
        if a_const && b_const {
            return self.constant(a.value * b.value);
        }
        self.mul(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nth_derivative(g: &mut Graph, f: ExprRef, x: ExprRef, n: usize) -> ExprRef {
        let mut cur = f;
        for _ in 0..n {
            cur = g.grad_graph(cur, &[x]).unwrap()[0];
        }
        cur
    }

    #[test]
    fn arithmetic_evaluates() {
        let mut g = Graph::new();
        let a = g.variable(3.0).unwrap();
        let b = g.variable(4.0).unwrap();
        assert_eq!(g.mul(a, b).unwrap().value(), 12.0);
    }

    #[test]
    fn exp_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(0.0).unwrap();
        let e = g.exp(x).unwrap();
        assert_eq!(g.grad_values(e, &[x]).unwrap(), vec![1.0]);
    }

    #[test]
    fn third_derivative_of_quartic() {
        // d³/dx³ x⁴ = 24x = 48 at x = 2.
        let mut g = Graph::new();
        let x = g.variable(2.0).unwrap();
        let f = g.pow(x, 4.0).unwrap();
        let d3 = nth_derivative(&mut g, f, x, 3);
        assert!((d3.value() - 48.0).abs() < 1e-12);
    }

    #[test]
    fn second_derivative_of_quartic_matches_central_differences() {
        let second = |x0: f64| {
            let mut g = Graph::new();
            let x = g.variable(x0).unwrap();
            let f = g.pow(x, 4.0).unwrap();
            nth_derivative(&mut g, f, x, 2).value()
        };
        let h = 1e-5;
        let fd = (second(2.0 + h) - second(2.0 - h)) / (2.0 * h);
        assert!((fd - 48.0).abs() < 1e-4);
    }

    #[test]
    fn stop_gradient_blocks_every_order() {
        let mut g = Graph::new();
        let x = g.variable(5.0).unwrap();
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(s.value(), 5.0);
        assert_eq!(g.grad_values(s, &[x]).unwrap(), vec![0.0]);

        let x3 = g.variable(3.0).unwrap();
        let s3 = g.stop_gradient(x3).unwrap();
        let prod = g.mul(s3, x3).unwrap();
        assert_eq!(g.grad_values(prod, &[x3]).unwrap(), vec![3.0]);
        let d1 = g.grad_graph(prod, &[x3]).unwrap()[0];
        assert_eq!(g.grad_values(d1, &[x3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn magicbox_value_and_derivatives() {
        let mut g = Graph::new();
        let x = g.variable(-2.3).unwrap();
        let m = g.magicbox(x).unwrap();
        assert_eq!(m.value(), 1.0);

        let x = g.variable(0.7).unwrap();
        let m = g.magicbox(x).unwrap();
        let d1 = g.grad_graph(m, &[x]).unwrap()[0];
        assert_eq!(d1.value(), 1.0);
        let d2 = g.grad_graph(d1, &[x]).unwrap()[0];
        assert_eq!(d2.value(), 1.0);
        let d3 = g.grad_graph(d2, &[x]).unwrap()[0];
        assert_eq!(d3.value(), 1.0);
    }

    #[test]
    fn bilinear_gradient() {
        let mut g = Graph::new();
        let x = g.variable(2.0).unwrap();
        let y = g.variable(5.0).unwrap();
        let p = g.mul(x, y).unwrap();
        let d = g
            .grad(&GradientRequest {
                output: p,
                wrt: vec![x, y],
                create_graph: false,
            })
            .unwrap();
        assert_eq!(d[0].value(), 5.0);
        assert_eq!(d[1].value(), 2.0);
    }

    #[test]
    fn nested_exp_gradient() {
        let mut g = Graph::new();
        let x = g.variable(1.0).unwrap();
        let e = g.exp(x).unwrap();
        let d = nth_derivative(&mut g, e, x, 2);
        assert!((d.value() - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn magicbox_of_sum_times_constant() {
        let mut g = Graph::new();
        let a = g.variable(0.3).unwrap();
        let b = g.variable(-1.1).unwrap();
        let c = g.constant(4.0).unwrap();
        let s = g.add(a, b).unwrap();
        let m = g.magicbox(s).unwrap();
        let f = g.mul(m, c).unwrap();
        assert_eq!(g.grad_values(f, &[a]).unwrap(), vec![4.0]);
    }

    #[test]
    fn unreachable_variable_has_zero_derivative() {
        let mut g = Graph::new();
        let x = g.variable(1.0).unwrap();
        let y = g.variable(2.0).unwrap();
        let f = g.exp(x).unwrap();
        let d = g.grad_graph(f, &[y]).unwrap();
        assert_eq!(d[0].value(), 0.0);
        // Variables created after the output are unreachable too.
        let z = g.variable(3.0).unwrap();
        assert_eq!(g.grad_values(f, &[z]).unwrap(), vec![0.0]);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let z = g.constant(0.0).unwrap();
        let n = g.constant(-1.0).unwrap();
        let one = g.constant(1.0).unwrap();
        assert!(matches!(g.log(z), Err(AutodiffError::LogDomain { .. })));
        assert!(matches!(g.log(n), Err(AutodiffError::LogDomain { .. })));
        assert!(matches!(
            g.div(one, z),
            Err(AutodiffError::DivisionByZero { .. })
        ));
        assert!(matches!(
            g.pow(n, 0.5),
            Err(AutodiffError::PowDomain { .. })
        ));
        assert_eq!(g.pow(n, 3.0).unwrap().value(), -1.0);
    }

    #[test]
    fn overflow_is_reported_with_node() {
        let mut g = Graph::new();
        let big = g.constant(1000.0).unwrap();
        let before = g.len();
        match g.exp(big) {
            Err(AutodiffError::NonFinite { node, op, .. }) => {
                assert_eq!(node, before);
                assert_eq!(op, "exp");
            }
            other => panic!("expected overflow error, got {other:?}"),
        }
        assert_eq!(g.len(), before);
    }

    #[test]
    fn grad_rejects_non_variables() {
        let mut g = Graph::new();
        let x = g.variable(1.0).unwrap();
        let c = g.constant(2.0).unwrap();
        let f = g.mul(x, c).unwrap();
        let err = g.grad_graph(f, &[c]).unwrap_err();
        assert_eq!(err, AutodiffError::NotAVariable { node: c.index() });
    }

    #[test]
    fn sum_of_empty_is_zero() {
        let mut g = Graph::new();
        assert_eq!(g.sum(&[]).unwrap().value(), 0.0);
    }

    #[test]
    fn pow_edge_exponents() {
        let mut g = Graph::new();
        let x = g.variable(1.7).unwrap();
        let p0 = g.pow(x, 0.0).unwrap();
        assert_eq!(p0.value(), 1.0);
        assert_eq!(g.grad_values(p0, &[x]).unwrap(), vec![0.0]);
        let p1 = g.pow(x, 1.0).unwrap();
        let d = g.grad_graph(p1, &[x]).unwrap()[0];
        assert_eq!(d.value(), 1.0);
        assert_eq!(g.grad_values(d, &[x]).unwrap(), vec![0.0]);
    }

    #[test]
    fn evaluation_is_stable() {
        let mut g = Graph::new();
        let x = g.variable(0.3).unwrap();
        let e = g.exp(x).unwrap();
        let l = g.log(e).unwrap();
        let again = g.handle(l.index());
        assert_eq!(l.value().to_bits(), again.value().to_bits());
    }
}
