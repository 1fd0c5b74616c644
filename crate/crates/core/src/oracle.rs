//! Ground truth for tabular MDPs.
//!
//! Two oracles are provided. [`exact_value`] gives the infinite-horizon
//! expected discounted return `V̄ = P₀ᵀ (I − γM)⁻¹ R`, where `M` is the
//! state kernel induced by the policy, as a differentiable expression.
//! [`enumerate_expectation`] sums a trajectory functional over every
//! trajectory of a short horizon, which makes estimator expectations exact.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_solve, ExprRef, Graph};
use crate::error::{Error, Result};
use crate::mdp::{Mdp, PolicyTable, TabularPolicy, Trajectory};
use crate::rng::RngSeed;

/// Largest number of trajectories [`enumerate_expectation`] will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValueSource {
    Exact,
    FiniteHorizon { horizon: usize },
    Perturbed { sigma: f64, seed: RngSeed },
}

/// State and state-action values.
///
/// Infinite-horizon tables hold a single stationary row. Finite-horizon
/// tables are indexed by time: `v(t, s)` is the value with `T − t` steps to
/// go, and `v(T, s) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub source: ValueSource,
    n_states: usize,
    n_actions: usize,
    v: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

impl ValueTable {
    /// Stationary table from state values; `Q` follows by one Bellman step.
    pub fn from_state_values(mdp: &Mdp, v: Vec<f64>, source: ValueSource) -> Self {
        let q = bellman_q(mdp, &v);
        Self {
            source,
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            v: vec![v],
            q: vec![q],
        }
    }

    pub fn is_time_indexed(&self) -> bool {
        self.v.len() > 1
    }

    /// `V̂_t(s)`; zero past the end of a finite-horizon table.
    #[inline]
    pub fn v(&self, t: usize, s: usize) -> f64 {
        if !self.is_time_indexed() {
            self.v[0][s]
        } else {
            self.v.get(t).map_or(0.0, |row| row[s])
        }
    }

    #[inline]
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        if !self.is_time_indexed() {
            self.q[0][s * self.n_actions + a]
        } else {
            self.q.get(t).map_or(0.0, |row| row[s * self.n_actions + a])
        }
    }

    /// The stationary (or time-0) state values.
    pub fn state_values(&self) -> &[f64] {
        &self.v[0]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

fn bellman_q(mdp: &Mdp, next_v: &[f64]) -> Vec<f64> {
    let mut q = Vec::with_capacity(mdp.n_params());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let future: f64 = mdp.transition[s][a]
                .iter()
                .zip(next_v)
                .map(|(p, v)| p * v)
                .sum();
            q.push(mdp.reward[s] + mdp.gamma * future);
        }
    }
    q
}

/// Induced kernel `M[s][s'] = Σ_a π(a|s) P(s,a,s')` built from policy nodes.
fn induced_kernel(g: &mut Graph, mdp: &Mdp, policy: &TabularPolicy) -> Result<Vec<Vec<ExprRef>>> {
    let mut m = Vec::with_capacity(mdp.n_states);
    for s in 0..mdp.n_states {
        let mut row = Vec::with_capacity(mdp.n_states);
        for next in 0..mdp.n_states {
            let mut terms = Vec::with_capacity(mdp.n_actions);
            for a in 0..mdp.n_actions {
                let p = mdp.p(s, a, next);
                if p != 0.0 {
                    terms.push(g.scale(policy.prob(s, a), p)?);
                }
            }
            row.push(g.sum(&terms)?);
        }
        m.push(row);
    }
    Ok(m)
}

fn dot_constants(g: &mut Graph, weights: &[f64], xs: &[ExprRef]) -> Result<ExprRef> {
    let mut terms = Vec::with_capacity(xs.len());
    for (&w, &x) in weights.iter().zip(xs) {
        if w != 0.0 {
            terms.push(g.scale(x, w)?);
        }
    }
    Ok(g.sum(&terms)?)
}

/// Expected discounted return `V̄` of the policy as a differentiable
/// expression, plus its value table.
pub fn exact_value(
    g: &mut Graph,
    mdp: &Mdp,
    policy: &TabularPolicy,
) -> Result<(ExprRef, ValueTable)> {
    let m = induced_kernel(g, mdp, policy)?;
    let n = mdp.n_states;
    let mut system = Vec::with_capacity(n);
    for (s, row) in m.iter().enumerate() {
        let mut out = Vec::with_capacity(n);
        for (next, &entry) in row.iter().enumerate() {
            let scaled = g.scale(entry, -mdp.gamma)?;
            out.push(if s == next {
                let one = g.constant(1.0)?;
                g.add(one, scaled)?
            } else {
                scaled
            });
        }
        system.push(out);
    }
    let rhs = mdp
        .reward
        .iter()
        .map(|&r| g.constant(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let v = linear_solve(g, &system, &rhs)?;
    let v_bar = dot_constants(g, &mdp.initial, &v)?;
    let table = ValueTable::from_state_values(
        mdp,
        v.iter().map(|x| x.value()).collect(),
        ValueSource::Exact,
    );
    Ok((v_bar, table))
}

/// Numeric infinite-horizon value table for a fixed policy.
pub fn exact_table(mdp: &Mdp, policy: &PolicyTable) -> Result<ValueTable> {
    let v = solve_state_values(mdp, &mdp.induced_transition(policy))?;
    Ok(ValueTable::from_state_values(mdp, v, ValueSource::Exact))
}

/// `V̄` of a fixed policy as a plain number.
pub fn expected_return(mdp: &Mdp, policy: &PolicyTable) -> Result<f64> {
    let table = exact_table(mdp, policy)?;
    Ok(mdp
        .initial
        .iter()
        .zip(table.state_values())
        .map(|(p, v)| p * v)
        .sum())
}

fn solve_state_values(mdp: &Mdp, kernel: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let n = mdp.n_states;
    let mut system = Vec::with_capacity(n);
    for (s, row) in kernel.iter().enumerate() {
        let entries = row
            .iter()
            .enumerate()
            .map(|(next, &m)| g.constant(if s == next { 1.0 } else { 0.0 } - mdp.gamma * m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        system.push(entries);
    }
    let rhs = mdp
        .reward
        .iter()
        .map(|&r| g.constant(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(linear_solve(&mut g, &system, &rhs)?
        .into_iter()
        .map(|x| x.value())
        .collect())
}

/// `E[Σ_{t<T} γ^t R(s_t)]` as a differentiable expression.
pub fn finite_horizon_value(
    g: &mut Graph,
    mdp: &Mdp,
    policy: &TabularPolicy,
    horizon: usize,
) -> Result<ExprRef> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let m = induced_kernel(g, mdp, policy)?;
    // V_{T-1} = R.
    let mut v = mdp
        .reward
        .iter()
        .map(|&r| g.constant(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for _ in 1..horizon {
        let mut next_v = Vec::with_capacity(mdp.n_states);
        for (s, row) in m.iter().enumerate() {
            let mut terms = Vec::with_capacity(mdp.n_states);
            for (&entry, &vn) in row.iter().zip(&v) {
                terms.push(g.mul(entry, vn)?);
            }
            let future = g.sum(&terms)?;
            let discounted = g.scale(future, mdp.gamma)?;
            let r = g.constant(mdp.reward[s])?;
            next_v.push(g.add(r, discounted)?);
        }
        v = next_v;
    }
    dot_constants(g, &mdp.initial, &v)
}

/// Time-indexed value table for the `T`-step problem.
pub fn finite_horizon_table(mdp: &Mdp, policy: &PolicyTable, horizon: usize) -> ValueTable {
    let mut v = vec![vec![0.0; mdp.n_states]; horizon + 1];
    let mut q = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let qt = bellman_q(mdp, &v[t + 1]);
        for s in 0..mdp.n_states {
            v[t][s] = (0..mdp.n_actions)
                .map(|a| policy.prob(s, a) * qt[s * mdp.n_actions + a])
                .sum();
        }
        q[t] = qt;
    }
    ValueTable {
        source: ValueSource::FiniteHorizon { horizon },
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        v,
        q,
    }
}

/// Adds a fixed `Normal(0, σ)` offset to every state's value (the same
/// offset at every time index) and recomputes `Q` by one Bellman step.
pub fn perturb_values(
    mdp: &Mdp,
    table: &ValueTable,
    sigma: f64,
    seed: RngSeed,
) -> Result<ValueTable> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise sigma {sigma} must be >= 0"
        )));
    }
    let mut rng = seed.rng();
    let offsets: Vec<f64> = if sigma == 0.0 {
        vec![0.0; table.n_states]
    } else {
        let normal = Normal::new(0.0, sigma).expect("valid normal");
        (0..table.n_states)
            .map(|_| normal.sample(&mut rng))
            .collect()
    };
    let v: Vec<Vec<f64>> = table
        .v
        .iter()
        .map(|row| row.iter().zip(&offsets).map(|(v, e)| v + e).collect())
        .collect();
    let q = if table.is_time_indexed() {
        (0..table.q.len())
            .map(|t| bellman_q(mdp, &v[t + 1]))
            .collect()
    } else {
        vec![bellman_q(mdp, &v[0])]
    };
    Ok(ValueTable {
        source: ValueSource::Perturbed { sigma, seed },
        n_states: table.n_states,
        n_actions: table.n_actions,
        v,
        q,
    })
}

/// Derivatives of orders `1..=max_order` following the first-parameter
/// protocol: order 1 is the full gradient, order `k + 1` is the gradient of
/// the first component of order `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeStack {
    pub orders: Vec<Vec<f64>>,
}

impl DerivativeStack {
    pub fn max_order(&self) -> usize {
        self.orders.len()
    }

    /// Order `k` (1-based).
    pub fn order(&self, k: usize) -> &[f64] {
        &self.orders[k - 1]
    }
}

/// Nested derivatives of `expr` with respect to `params`.
pub fn derivative_stack(
    g: &mut Graph,
    expr: ExprRef,
    params: &[ExprRef],
    max_order: usize,
) -> Result<DerivativeStack> {
    if !(1..=3).contains(&max_order) {
        return Err(Error::InvalidConfig(format!(
            "derivative order {max_order} outside 1..=3"
        )));
    }
    let mut orders = Vec::with_capacity(max_order);
    let mut target = expr;
    for k in 1..=max_order {
        if k < max_order {
            let d = g.grad_graph(target, params)?;
            orders.push(d.iter().map(|x| x.value()).collect());
            target = d[0];
        } else {
            orders.push(g.grad_values(target, params)?);
        }
    }
    Ok(DerivativeStack { orders })
}

/// Exact derivatives of a value expression with respect to the policy logits.
pub fn true_derivatives(
    g: &mut Graph,
    value_expr: ExprRef,
    policy: &TabularPolicy,
    max_order: usize,
) -> Result<DerivativeStack> {
    derivative_stack(g, value_expr, policy.params(), max_order)
}

/// How trajectory probabilities enter [`enumerate_expectation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `P(τ; θ)` is differentiable: derivatives of the result are
    /// derivatives of the expectation.
    Differentiable,
    /// `P(τ)` is a constant: derivatives of the result are the expected
    /// derivatives of the functional, i.e. what an estimator returns on
    /// average.
    Detached,
}

/// Number of trajectories (including the terminal state) of a `T`-step rollout.
pub fn trajectory_count(mdp: &Mdp, horizon: usize) -> u128 {
    let per_step = (mdp.n_states as u128).saturating_mul(mdp.n_actions as u128);
    (0..horizon).fold(mdp.n_states as u128, |acc, _| acc.saturating_mul(per_step))
}

/// `Σ_τ P(τ) · functional(τ)` over every `T`-step trajectory.
pub fn enumerate_expectation<F>(
    g: &mut Graph,
    mdp: &Mdp,
    policy: &TabularPolicy,
    horizon: usize,
    weighting: Weighting,
    mut functional: F,
) -> Result<ExprRef>
where
    F: FnMut(&mut Graph, &Trajectory) -> Result<ExprRef>,
{
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let count = trajectory_count(mdp, horizon);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationBudget {
            trajectories: count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut walk = Walk {
        mdp,
        policy,
        horizon,
        functional: &mut functional,
        traj: Trajectory {
            states: Vec::with_capacity(horizon),
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            terminal_state: 0,
        },
        terms: Vec::new(),
    };
    for s0 in 0..mdp.n_states {
        let p0 = mdp.initial[s0];
        if p0 == 0.0 {
            continue;
        }
        let weight = match weighting {
            Weighting::Differentiable => Weight::Expr(g.constant(p0)?),
            Weighting::Detached => Weight::Value(p0),
        };
        walk.visit(g, s0, weight)?;
    }
    let terms = std::mem::take(&mut walk.terms);
    Ok(g.sum(&terms)?)
}

#[derive(Clone, Copy)]
enum Weight {
    Expr(ExprRef),
    Value(f64),
}

impl Weight {
    fn times_prob(self, g: &mut Graph, prob: ExprRef) -> Result<Weight> {
        Ok(match self {
            Weight::Expr(w) => Weight::Expr(g.mul(w, prob)?),
            Weight::Value(w) => Weight::Value(w * prob.value()),
        })
    }

    fn times_const(self, g: &mut Graph, p: f64) -> Result<Weight> {
        Ok(match self {
            Weight::Expr(w) => Weight::Expr(g.scale(w, p)?),
            Weight::Value(w) => Weight::Value(w * p),
        })
    }
}

struct Walk<'a, F> {
    mdp: &'a Mdp,
    policy: &'a TabularPolicy,
    horizon: usize,
    functional: &'a mut F,
    traj: Trajectory,
    terms: Vec<ExprRef>,
}

impl<F> Walk<'_, F>
where
    F: FnMut(&mut Graph, &Trajectory) -> Result<ExprRef>,
{
    fn visit(&mut self, g: &mut Graph, s: usize, weight: Weight) -> Result<()> {
        if self.traj.actions.len() == self.horizon {
            self.traj.terminal_state = s;
            let f = (self.functional)(g, &self.traj)?;
            let w = match weight {
                Weight::Expr(w) => w,
                Weight::Value(w) => g.constant(w)?,
            };
            self.terms.push(g.mul(w, f)?);
            return Ok(());
        }
        for a in 0..self.mdp.n_actions {
            let after_action = weight.times_prob(g, self.policy.prob(s, a))?;
            for next in 0..self.mdp.n_states {
                let p = self.mdp.p(s, a, next);
                if p == 0.0 {
                    continue;
                }
                let w = after_action.times_const(g, p)?;
                self.traj.states.push(s);
                self.traj.actions.push(a);
                self.traj.rewards.push(self.mdp.reward[s]);
                let result = self.visit(g, next, w);
                self.traj.states.pop();
                self.traj.actions.pop();
                self.traj.rewards.pop();
                result?;
            }
        }
        Ok(())
    }
}

/// Optimal state values and a greedy deterministic policy, by policy
/// iteration.
pub fn optimal_value(mdp: &Mdp) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut actions = vec![0usize; mdp.n_states];
    for _ in 0..1000 {
        let kernel: Vec<Vec<f64>> = (0..mdp.n_states)
            .map(|s| mdp.transition[s][actions[s]].clone())
            .collect();
        let v = solve_state_values(mdp, &kernel)?;
        let q = bellman_q(mdp, &v);
        let mut changed = false;
        for s in 0..mdp.n_states {
            let row = &q[s * mdp.n_actions..(s + 1) * mdp.n_actions];
            let current = row[actions[s]];
            let (best, best_q) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold((actions[s], current), |acc, (a, qa)| {
                        if qa > acc.1 + 1e-12 {
                            (a, qa)
                        } else {
                            acc
                        }
                    });
            if best != actions[s] && best_q > current + 1e-12 {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((v, actions));
        }
    }
    Err(Error::InvalidConfig(
        "policy iteration did not converge".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{init_logits, random_mdp};

    fn two_state_cycle() -> Mdp {
        // Both actions move to the other state.
        Mdp::new(
            0.9,
            vec![
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            ],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn single_state_geometric_value() {
        let mdp = Mdp::new(0.5, vec![vec![vec![1.0], vec![1.0]]], vec![1.0], vec![1.0]).unwrap();
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 1, 2, &[0.3, -0.2]).unwrap();
        let (v_bar, table) = exact_value(&mut g, &mdp, &policy).unwrap();
        assert!((v_bar.value() - 2.0).abs() < 1e-15);
        assert!((table.v(0, 0) - 2.0).abs() < 1e-15);
        // Action-independent dynamics: every derivative vanishes.
        let stack = true_derivatives(&mut g, v_bar, &policy, 3).unwrap();
        for k in 1..=3 {
            assert!(stack.order(k).iter().all(|d| d.abs() < 1e-14), "order {k}");
        }
    }

    #[test]
    fn two_state_cycle_value() {
        let mdp = two_state_cycle();
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 2, 2, &[0.0; 4]).unwrap();
        let (v_bar, _) = exact_value(&mut g, &mdp, &policy).unwrap();
        assert!((v_bar.value() - 1.0 / (1.0 - 0.81)).abs() < 1e-12);
        let fh = finite_horizon_value(&mut g, &mdp, &policy, 3).unwrap();
        assert!((fh.value() - 1.81).abs() < 1e-12);
    }

    #[test]
    fn matches_power_series() {
        let mdp = random_mdp(5, 4, 0.95, RngSeed(3)).unwrap();
        let logits = init_logits(5, 4, Some(RngSeed(4)));
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 5, 4, &logits).unwrap();
        let (v_bar, _) = exact_value(&mut g, &mdp, &policy).unwrap();

        // Σ_{t<K} γ^t Rᵀ (Mᵀ)^t P₀ with plain arithmetic.
        let m = mdp.induced_transition(&policy.table());
        let mut dist = mdp.initial.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..2000 {
            total += discount
                * dist
                    .iter()
                    .zip(&mdp.reward)
                    .map(|(p, r)| p * r)
                    .sum::<f64>();
            let mut next = vec![0.0; 5];
            for (s, row) in m.iter().enumerate() {
                for (n, &p) in row.iter().enumerate() {
                    next[n] += dist[s] * p;
                }
            }
            dist = next;
            discount *= mdp.gamma;
        }
        assert!(
            (v_bar.value() - total).abs() < 1e-9,
            "{} vs {total}",
            v_bar.value()
        );
    }

    #[test]
    fn bellman_identity_holds() {
        let mdp = random_mdp(5, 4, 0.95, RngSeed(8)).unwrap();
        let table_policy = PolicyTable::from_logits(5, 4, &init_logits(5, 4, Some(RngSeed(1))));
        let table = exact_table(&mdp, &table_policy).unwrap();
        for s in 0..5 {
            let via_q: f64 = (0..4)
                .map(|a| table_policy.prob(s, a) * table.q(0, s, a))
                .sum();
            assert!((table.v(0, s) - via_q).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_horizon_edge_cases() {
        let mdp = random_mdp(3, 2, 0.9, RngSeed(5)).unwrap();
        let mut g = Graph::new();
        let policy =
            TabularPolicy::new(&mut g, 3, 2, &init_logits(3, 2, Some(RngSeed(6)))).unwrap();
        let v1 = finite_horizon_value(&mut g, &mdp, &policy, 1).unwrap();
        let expected: f64 = mdp
            .initial
            .iter()
            .zip(&mdp.reward)
            .map(|(p, r)| p * r)
            .sum();
        assert!((v1.value() - expected).abs() < 1e-14);
        assert!(g
            .grad_values(v1, policy.params())
            .unwrap()
            .iter()
            .all(|&d| d == 0.0));

        let long = finite_horizon_value(&mut g, &mdp, &policy, 2000).unwrap();
        let (exact, _) = exact_value(&mut g, &mdp, &policy).unwrap();
        let max_r = mdp.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let bound = mdp.gamma.powi(2000) * max_r / (1.0 - mdp.gamma);
        assert!((long.value() - exact.value()).abs() <= bound + 1e-9);
        assert!(finite_horizon_value(&mut g, &mdp, &policy, 0).is_err());
    }

    #[test]
    fn finite_table_matches_expression() {
        let mdp = random_mdp(3, 2, 0.9, RngSeed(7)).unwrap();
        let logits = init_logits(3, 2, Some(RngSeed(2)));
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 3, 2, &logits).unwrap();
        let expr = finite_horizon_value(&mut g, &mdp, &policy, 4).unwrap();
        let table = finite_horizon_table(&mdp, &policy.table(), 4);
        let from_table: f64 = (0..3).map(|s| mdp.initial[s] * table.v(0, s)).sum();
        assert!((expr.value() - from_table).abs() < 1e-12);
        assert_eq!(table.v(4, 1), 0.0);
        assert_eq!(table.v(9, 1), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mdp = random_mdp(5, 4, 0.95, RngSeed(12)).unwrap();
        let logits = init_logits(5, 4, Some(RngSeed(13)));
        let value_at =
            |l: &[f64]| expected_return(&mdp, &PolicyTable::from_logits(5, 4, l)).unwrap();
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 5, 4, &logits).unwrap();
        let (v_bar, _) = exact_value(&mut g, &mdp, &policy).unwrap();
        let grad = g.grad_values(v_bar, policy.params()).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (value_at(&up) - value_at(&down)) / (2.0 * h);
            let scale = grad[i].abs().max(1e-3);
            assert!(
                (fd - grad[i]).abs() / scale < 1e-4,
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn shift_direction_is_flat_at_all_orders() {
        let mdp = random_mdp(3, 3, 0.9, RngSeed(21)).unwrap();
        let mut g = Graph::new();
        let policy =
            TabularPolicy::new(&mut g, 3, 3, &init_logits(3, 3, Some(RngSeed(22)))).unwrap();
        let (v_bar, _) = exact_value(&mut g, &mdp, &policy).unwrap();
        let stack = true_derivatives(&mut g, v_bar, &policy, 3).unwrap();
        for k in 1..=3 {
            for s in 0..3 {
                let along: f64 = stack.order(k)[s * 3..(s + 1) * 3].iter().sum();
                assert!(along.abs() < 1e-8, "order {k} state {s}: {along}");
            }
        }
    }

    #[test]
    fn enumeration_normalises_and_matches_value() {
        let mdp = random_mdp(2, 2, 0.9, RngSeed(30)).unwrap();
        let mut g = Graph::new();
        let policy =
            TabularPolicy::new(&mut g, 2, 2, &init_logits(2, 2, Some(RngSeed(31)))).unwrap();
        let one = enumerate_expectation(
            &mut g,
            &mdp,
            &policy,
            3,
            Weighting::Differentiable,
            |g, _| Ok(g.constant(1.0)?),
        )
        .unwrap();
        assert!((one.value() - 1.0).abs() < 1e-12);
        let gamma = mdp.gamma;
        let ret = enumerate_expectation(
            &mut g,
            &mdp,
            &policy,
            3,
            Weighting::Differentiable,
            |g, t| Ok(g.constant(t.discounted_return(gamma))?),
        )
        .unwrap();
        let fh = finite_horizon_value(&mut g, &mdp, &policy, 3).unwrap();
        assert!((ret.value() - fh.value()).abs() < 1e-10);
        let d_enum = derivative_stack(&mut g, ret, policy.params(), 2).unwrap();
        let d_true = true_derivatives(&mut g, fh, &policy, 2).unwrap();
        for k in 1..=2 {
            for (a, b) in d_enum.order(k).iter().zip(d_true.order(k)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn enumeration_budget() {
        let mdp = random_mdp(5, 4, 0.9, RngSeed(0)).unwrap();
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, 5, 4, &[0.0; 20]).unwrap();
        let err = enumerate_expectation(&mut g, &mdp, &policy, 5, Weighting::Detached, |g, _| {
            Ok(g.constant(1.0)?)
        })
        .unwrap_err();
        assert!(matches!(err, Error::EnumerationBudget { .. }));
    }

    #[test]
    fn perturbation() {
        let mdp = random_mdp(4, 2, 0.9, RngSeed(40)).unwrap();
        let table = exact_table(&mdp, &PolicyTable::uniform(4, 2)).unwrap();
        let same = perturb_values(&mdp, &table, 0.0, RngSeed(1)).unwrap();
        assert_eq!(same.state_values(), table.state_values());
        for s in 0..4 {
            for a in 0..2 {
                assert!((same.q(0, s, a) - table.q(0, s, a)).abs() < 1e-12);
            }
        }
        assert!(perturb_values(&mdp, &table, -1.0, RngSeed(1)).is_err());

        let mut offsets = Vec::new();
        for seed in 0..500 {
            let noisy = perturb_values(&mdp, &table, 10.0, RngSeed(seed)).unwrap();
            offsets.extend(
                noisy
                    .state_values()
                    .iter()
                    .zip(table.state_values())
                    .map(|(a, b)| a - b),
            );
        }
        let n = offsets.len() as f64;
        let mean = offsets.iter().sum::<f64>() / n;
        let sd = (offsets.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 10.0).abs() < 0.5, "sd {sd}");
    }

    #[test]
    fn perturbed_finite_table_keeps_shape() {
        let mdp = random_mdp(2, 2, 0.9, RngSeed(41)).unwrap();
        let table = finite_horizon_table(&mdp, &PolicyTable::uniform(2, 2), 3);
        let noisy = perturb_values(&mdp, &table, 10.0, RngSeed(2)).unwrap();
        assert!(noisy.is_time_indexed());
        let eps = noisy.v(0, 1) - table.v(0, 1);
        assert!((noisy.v(2, 1) - table.v(2, 1) - eps).abs() < 1e-12);
    }

    #[test]
    fn policy_iteration_beats_random_policies() {
        let mdp = random_mdp(5, 4, 0.95, RngSeed(50)).unwrap();
        let (v_star, actions) = optimal_value(&mdp).unwrap();
        let mut logits = vec![0.0; 20];
        for (s, &a) in actions.iter().enumerate() {
            logits[s * 4 + a] = 60.0;
        }
        let greedy = exact_table(&mdp, &PolicyTable::from_logits(5, 4, &logits)).unwrap();
        for s in 0..5 {
            assert!((greedy.v(0, s) - v_star[s]).abs() < 1e-6);
        }
        for seed in 0..20 {
            let random = PolicyTable::from_logits(5, 4, &init_logits(5, 4, Some(RngSeed(seed))));
            let v = exact_table(&mdp, &random).unwrap();
            for s in 0..5 {
                assert!(v.v(0, s) <= v_star[s] + 1e-9);
            }
        }
    }
}
