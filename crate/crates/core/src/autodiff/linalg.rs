use super::{AutodiffError, ExprRef, Graph, Result};

const PIVOT_TOLERANCE: f64 = 1e-12;

/// Solves `a · x = b` by Gaussian elimination with partial pivoting, emitting
/// every arithmetic step as graph nodes so the solution is differentiable to
/// any order. Pivot rows are chosen from the current values.
pub fn linear_solve(g: &mut Graph, a: &[Vec<ExprRef>], b: &[ExprRef]) -> Result<Vec<ExprRef>> {
    let n = a.len();
    if b.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(AutodiffError::Dimension(format!(
            "linear_solve expects a square {n}x{n} system with a length-{n} right-hand side"
        )));
    }
    let mut m: Vec<Vec<ExprRef>> = a.to_vec();
    let mut rhs: Vec<ExprRef> = b.to_vec();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].value().abs().total_cmp(&m[j][col].value().abs()))
            .expect("non-empty pivot range");
        let pivot = m[pivot_row][col].value();
        if pivot.abs() < PIVOT_TOLERANCE {
            return Err(AutodiffError::Singular { column: col, pivot });
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);

        for row in col + 1..n {
            if m[row][col].value() == 0.0 {
                continue;
            }
            let factor = g.div(m[row][col], m[col][col])?;
            for k in col + 1..n {
                let t = g.mul(factor, m[col][k])?;
                m[row][k] = g.sub(m[row][k], t)?;
            }
            let t = g.mul(factor, rhs[col])?;
            rhs[row] = g.sub(rhs[row], t)?;
        }
    }

    let mut x: Vec<Option<ExprRef>> = vec![None; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            let t = g.mul(m[row][k], x[k].expect("solved above"))?;
            acc = g.sub(acc, t)?;
        }
        x[row] = Some(g.div(acc, m[row][row])?);
    }
    Ok(x.into_iter().map(|v| v.expect("all rows solved")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(g: &mut Graph, rows: &[&[f64]]) -> Vec<Vec<ExprRef>> {
        rows.iter()
            .map(|r| r.iter().map(|&v| g.constant(v).unwrap()).collect())
            .collect()
    }

    #[test]
    fn identity_system_returns_rhs() {
        let mut g = Graph::new();
        let a = constants(
            &mut g,
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
        );
        let b: Vec<_> = [1.5, -2.0, 7.25]
            .iter()
            .map(|&v| g.constant(v).unwrap())
            .collect();
        let x = linear_solve(&mut g, &a, &b).unwrap();
        let vals: Vec<f64> = x.iter().map(|e| e.value()).collect();
        assert_eq!(vals, vec![1.5, -2.0, 7.25]);
    }

    #[test]
    fn scalar_geometric_value() {
        let mut g = Graph::new();
        let gamma = 0.5;
        let a = constants(&mut g, &[&[1.0 - gamma]]);
        let r = g.constant(1.0).unwrap();
        let x = linear_solve(&mut g, &a, &[r]).unwrap();
        assert_eq!(x[0].value(), 2.0);
    }

    #[test]
    fn needs_pivoting() {
        let mut g = Graph::new();
        let a = constants(&mut g, &[&[0.0, 2.0], &[3.0, 1.0]]);
        let b: Vec<_> = [4.0, 5.0].iter().map(|&v| g.constant(v).unwrap()).collect();
        let x = linear_solve(&mut g, &a, &b).unwrap();
        assert!((x[0].value() - 1.0).abs() < 1e-15);
        assert!((x[1].value() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_is_rejected() {
        let mut g = Graph::new();
        let a = constants(&mut g, &[&[1.0, 2.0], &[2.0, 4.0]]);
        let b: Vec<_> = [1.0, 1.0].iter().map(|&v| g.constant(v).unwrap()).collect();
        assert!(matches!(
            linear_solve(&mut g, &a, &b),
            Err(AutodiffError::Singular { column: 1, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = constants(&mut g, &[&[1.0, 2.0]]);
        let b = vec![g.constant(1.0).unwrap()];
        assert!(matches!(
            linear_solve(&mut g, &a, &b),
            Err(AutodiffError::Dimension(_))
        ));
    }

    #[test]
    fn solution_is_differentiable() {
        // x = r / (1 - γ); dx/dγ = r / (1 - γ)².
        let mut g = Graph::new();
        let gamma = g.variable(0.5).unwrap();
        let one = g.constant(1.0).unwrap();
        let diag = g.sub(one, gamma).unwrap();
        let r = g.constant(3.0).unwrap();
        let x = linear_solve(&mut g, &[vec![diag]], &[r]).unwrap()[0];
        let d = g.grad_graph(x, &[gamma]).unwrap()[0];
        assert!((d.value() - 12.0).abs() < 1e-12);
        // d²x/dγ² = 2r / (1 - γ)³ = 48.
        let d2 = g.grad_values(d, &[gamma]).unwrap()[0];
        assert!((d2 - 48.0).abs() < 1e-10);
    }
}
