//! Finite-difference checks and random expression graphs for testing the
//! autodiff engine.

use rand::Rng as _;

use crate::autodiff::{ExprRef, Graph};
use crate::error::Result;
use crate::rng::RngSeed;

/// Largest component-wise `|a − b| / max(|b|, 1e-3 · max|b|)`.
///
/// The floor keeps near-zero components of `b` from dominating when the
/// rest of the vector is large.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every `i`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point)?;
        point[i] = x[i] - h;
        let minus = f(&point)?;
        point[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a / (b² + 1)`
    SafeDiv(usize, usize),
    /// `exp(c · a)`
    Exp(usize, f64),
    /// `log(a² + 1)`
    LogSquare(usize),
    /// `(a² + 1)^p`
    PowSquare(usize, f64),
    Neg(usize),
    Scale(usize, f64),
}

/// A random smooth expression of `n_inputs` variables, defined everywhere.
/// The output is the sum of every intermediate node.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomExpr {
    n_inputs: usize,
    steps: Vec<Step>,
}

impl RandomExpr {
    pub fn generate(n_inputs: usize, n_steps: usize, seed: RngSeed) -> Self {
        assert!(n_inputs > 0, "need at least one input");
        let mut rng = seed.rng();
        let mut steps = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let slots = n_inputs + k;
            let a = rng.random_range(0..slots);
            let b = rng.random_range(0..slots);
            let step = match rng.random_range(0..9) {
                0 => Step::Add(a, b),
                1 => Step::Sub(a, b),
                2 => Step::Mul(a, b),
                3 => Step::SafeDiv(a, b),
                4 => Step::Exp(a, rng.random_range(-0.5..0.5)),
                5 => Step::LogSquare(a),
                6 => Step::PowSquare(a, rng.random_range(-1.5..1.5)),
                7 => Step::Neg(a),
                _ => Step::Scale(a, rng.random_range(-2.0..2.0)),
            };
            steps.push(step);
        }
        Self { n_inputs, steps }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn build(&self, g: &mut Graph, inputs: &[ExprRef]) -> Result<ExprRef> {
        assert_eq!(inputs.len(), self.n_inputs, "input count");
        let mut slots = inputs.to_vec();
        let one = g.constant(1.0)?;
        for step in &self.steps {
            let node = match *step {
                Step::Add(a, b) => g.add(slots[a], slots[b])?,
                Step::Sub(a, b) => g.sub(slots[a], slots[b])?,
                Step::Mul(a, b) => g.mul(slots[a], slots[b])?,
                Step::SafeDiv(a, b) => {
                    let sq = g.mul(slots[b], slots[b])?;
                    let den = g.add(sq, one)?;
                    g.div(slots[a], den)?
                }
                Step::Exp(a, c) => {
                    let x = g.scale(slots[a], c)?;
                    g.exp(x)?
                }
                Step::LogSquare(a) => {
                    let sq = g.mul(slots[a], slots[a])?;
                    let x = g.add(sq, one)?;
                    g.log(x)?
                }
                Step::PowSquare(a, p) => {
                    let sq = g.mul(slots[a], slots[a])?;
                    let x = g.add(sq, one)?;
                    g.pow(x, p)?
                }
                Step::Neg(a) => g.neg(slots[a])?,
                Step::Scale(a, c) => g.scale(slots[a], c)?,
            };
            slots.push(node);
        }
        Ok(g.sum(&slots[self.n_inputs..])?)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let inputs = x
            .iter()
            .map(|&v| g.constant(v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.build(&mut g, &inputs)?.value())
    }

    /// Autodiff gradient at `x`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = x
            .iter()
            .map(|&v| g.variable(v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = self.build(&mut g, &vars)?;
        Ok(g.grad_values(out, &vars)?)
    }

    /// Autodiff Hessian at `x` (row `i` is the gradient of `∂f/∂x_i`).
    pub fn hessian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = x
            .iter()
            .map(|&v| g.variable(v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = self.build(&mut g, &vars)?;
        let grad = g.grad_graph(out, &vars)?;
        grad.iter().map(|&d| Ok(g.grad_values(d, &vars)?)).collect()
    }
}

/// Errors of one finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// Gradient vs central differences of the value.
    pub order1: f64,
    /// Hessian rows vs central differences of the gradient.
    pub order2: f64,
    /// Largest `|H_ij − H_ji|` relative to the largest Hessian entry.
    pub asymmetry: f64,
}

pub fn check_expression(expr: &RandomExpr, x: &[f64], h: f64) -> Result<CheckReport> {
    let grad = expr.gradient(x)?;
    let fd = central_difference(|p| expr.eval(p), x, h)?;
    let order1 = max_relative_error(&grad, &fd);

    let hess = expr.hessian(x)?;
    let n = x.len();
    let mut fd_hess = vec![vec![0.0; n]; n];
    let mut point = x.to_vec();
    for j in 0..n {
        point[j] = x[j] + h;
        let plus = expr.gradient(&point)?;
        point[j] = x[j] - h;
        let minus = expr.gradient(&point)?;
        point[j] = x[j];
        for i in 0..n {
            fd_hess[i][j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    let flat: Vec<f64> = hess.iter().flatten().copied().collect();
    let fd_flat: Vec<f64> = fd_hess.iter().flatten().copied().collect();
    let order2 = max_relative_error(&flat, &fd_flat);
    let scale = flat
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asymmetry = asymmetry.max((hess[i][j] - hess[j][i]).abs() / scale);
        }
    }
    Ok(CheckReport {
        order1,
        order2,
        asymmetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic_is_exact() {
        let d = central_difference(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, -1.0], 0.5).unwrap();
        assert!((d[0] - 4.0).abs() < 1e-12);
        assert!((d[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_floors_small_components() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = max_relative_error(&[1.0, 1e-9], &[1.0, 0.0]);
        assert!(e < 1e-5);
    }

    #[test]
    fn random_expressions_are_reproducible() {
        let a = RandomExpr::generate(3, 10, RngSeed(4));
        let b = RandomExpr::generate(3, 10, RngSeed(4));
        assert_eq!(a, b);
        assert_eq!(
            a.eval(&[0.1, 0.2, 0.3]).unwrap(),
            b.eval(&[0.1, 0.2, 0.3]).unwrap()
        );
    }

    #[test]
    fn a_few_random_expressions_pass() {
        for s in 0..10 {
            let e = RandomExpr::generate(3, 12, RngSeed(s));
            let r = check_expression(&e, &[0.3, -0.7, 0.5], 1e-5).unwrap();
            assert!(
                r.order1 < 1e-4 && r.order2 < 1e-4 && r.asymmetry < 1e-10,
                "{s}: {r:?}"
            );
        }
    }
}
