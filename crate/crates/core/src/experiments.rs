//! Bias, variance and correlation of estimated derivatives on random MDPs.
//!
//! A [`Problem`] fixes an MDP, a policy and the true derivatives. Batches of
//! rollouts are turned into batch-mean derivative estimates with
//! [`estimate_batch`]; [`run_sweep`] repeats that over `n_batches` seeds for
//! every value of the swept hyperparameter and reduces the estimates to
//! [`SweepRow`]s.
//!
//! Every order uses the first-parameter protocol: order 1 is the full
//! gradient, order `k + 1` is the gradient of component 0 of order `k`.
//! Row statistics are computed on these vectors:
//!
//! * `bias = ‖mean_b(est_b) − truth‖₂`
//! * `std = sqrt(Σ_i s_i²)`, `s_i` the sample standard deviation (n − 1) of
//!   component `i` across batches
//! * `correlation`: Pearson over the pooled pairs `(est_b[i], truth[i])` for
//!   every batch `b` and component `i`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{advantages, normalize_batch, AdvantageConfig, AdvantageSeries};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::estimators::{build_objective, EstimatorConfig, EstimatorFamily, ObjectiveInputs};
use crate::mdp::{
    init_logits, random_mdp, sample_trajectory, Mdp, PolicyTable, TabularPolicy, Trajectory,
};
use crate::oracle::{
    derivative_stack, enumerate_expectation, exact_table, exact_value, finite_horizon_table,
    finite_horizon_value, perturb_values, true_derivatives, DerivativeStack, ValueTable, Weighting,
};
use crate::rng::RngSeed;

/// Sub-stream of the MDP seed that draws the evaluation policy's logits.
pub const POLICY_STREAM: u64 = 1;
/// Sub-stream of the run seed that draws the value-function noise.
pub const NOISE_STREAM: u64 = 2;
/// Sub-stream of the run seed from which batch seeds are derived.
pub const BATCH_STREAM: u64 = 3;

pub const CSV_HEADER: [&str; 10] = [
    "sweep_variable",
    "sweep_value",
    "order",
    "bias",
    "std",
    "correlation",
    "n_batches",
    "batch_size",
    "mdp_seed",
    "run_seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Tau,
    Lambda,
    BatchSize,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::Lambda => "lambda",
            Self::BatchSize => "batch_size",
        }
    }
}

/// Which objective the truth (and the exact value table) refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    /// Infinite-horizon `V̄`; stationary exact values.
    InfiniteHorizon,
    /// `T`-step return with the rollout horizon; time-indexed exact values.
    FiniteHorizon,
}

/// How estimator expectations are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    MonteCarlo,
    /// Exact expectation by trajectory enumeration; one "batch", zero std.
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub mdp_seed: RngSeed,
    pub run_seed: RngSeed,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub horizon: usize,
    pub n_batches: usize,
    pub orders: Vec<usize>,
    pub sweep_variable: SweepVariable,
    pub sweep_values: Vec<f64>,
    pub estimator: EstimatorConfig,
    pub advantage: AdvantageConfig,
    pub value_noise_sigma: f64,
    pub normalize_advantages: bool,
    pub truth: TruthSource,
    pub sampling: Sampling,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let gamma = 0.95;
        Self {
            mdp_seed: RngSeed(0),
            run_seed: RngSeed(0),
            n_states: 5,
            n_actions: 4,
            gamma,
            batch_size: 512,
            horizon: 50,
            n_batches: 200,
            orders: vec![1, 2, 3],
            sweep_variable: SweepVariable::Lambda,
            sweep_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            estimator: EstimatorConfig {
                discount_objective: true,
                ..EstimatorConfig::loaded_dice(1.0)
            },
            advantage: AdvantageConfig::gae(0.0, gamma),
            value_noise_sigma: 0.0,
            normalize_advantages: false,
            truth: TruthSource::InfiniteHorizon,
            sampling: Sampling::MonteCarlo,
        }
    }
}

impl SweepConfig {
    pub fn max_order(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sweep_values.is_empty() {
            return bad("sweep needs at least one value".into());
        }
        if self.orders.is_empty() || self.orders.iter().any(|o| !(1..=3).contains(o)) {
            return bad(format!(
                "orders {:?} must be a non-empty subset of 1,2,3",
                self.orders
            ));
        }
        if self.horizon == 0 || self.batch_size == 0 || self.n_batches == 0 {
            return bad("horizon, batch size and batch count must be positive".into());
        }
        if (self.advantage.gamma - self.gamma).abs() > 0.0 {
            return bad(format!(
                "advantage gamma {} differs from the MDP gamma {}",
                self.advantage.gamma, self.gamma
            ));
        }
        if !(self.value_noise_sigma >= 0.0) {
            return bad(format!(
                "value noise {} must be >= 0",
                self.value_noise_sigma
            ));
        }
        if self.sampling == Sampling::Enumeration && self.normalize_advantages {
            return bad("advantage normalisation needs sampled batches".into());
        }
        self.estimator.validate()?;
        self.advantage.validate()?;
        match self.sweep_variable {
            SweepVariable::Lambda if self.estimator.family != EstimatorFamily::LoadedDice => bad(format!(
                "a lambda sweep needs the loaded_dice estimator, not {}",
                self.estimator.family
            )),
            SweepVariable::Tau if self.estimator.family != EstimatorFamily::LoadedDice => bad(format!(
                "a tau sweep needs the loaded_dice estimator (the only one consuming advantages), not {}",
                self.estimator.family
            )),
            SweepVariable::Tau if self.advantage.kind != crate::AdvantageKind::Gae => {
                bad("a tau sweep needs GAE advantages".into())
            }
            SweepVariable::BatchSize
                if self.sweep_values.iter().any(|v| *v < 1.0 || v.fract() != 0.0) =>
            {
                bad("batch sizes must be positive integers".into())
            }
            SweepVariable::BatchSize if self.sampling == Sampling::Enumeration => {
                bad("a batch-size sweep is meaningless with enumeration".into())
            }
            _ => {
                for v in &self.sweep_values {
                    self.with_value(*v).estimator.validate()?;
                    self.with_value(*v).advantage.validate()?;
                }
                Ok(())
            }
        }
    }

    /// The configuration at one sweep point.
    pub fn with_value(&self, value: f64) -> SweepConfig {
        let mut cfg = self.clone();
        match self.sweep_variable {
            SweepVariable::Tau => cfg.advantage.tau = value,
            SweepVariable::Lambda => cfg.estimator.lambda = value,
            SweepVariable::BatchSize => cfg.batch_size = value as usize,
        }
        cfg
    }
}

/// A fixed MDP and policy together with everything the estimators compare
/// against.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mdp: Mdp,
    pub logits: Vec<f64>,
    /// Exact values matching `truth_source`.
    pub exact_values: ValueTable,
    /// Values handed to the estimators (exact plus optional noise).
    pub values: ValueTable,
    pub truth: DerivativeStack,
    pub truth_source: TruthSource,
    pub horizon: usize,
}

impl Problem {
    pub fn new(
        mdp: Mdp,
        logits: Vec<f64>,
        truth_source: TruthSource,
        horizon: usize,
        max_order: usize,
        noise: Option<(f64, RngSeed)>,
    ) -> Result<Self> {
        let table = PolicyTable::from_logits(mdp.n_states, mdp.n_actions, &logits);
        let mut g = Graph::new();
        let policy = TabularPolicy::new(&mut g, mdp.n_states, mdp.n_actions, &logits)?;
        let (value_expr, exact_values) = match truth_source {
            TruthSource::InfiniteHorizon => {
                let (v, _) = exact_value(&mut g, &mdp, &policy)?;
                (v, exact_table(&mdp, &table)?)
            }
            TruthSource::FiniteHorizon => (
                finite_horizon_value(&mut g, &mdp, &policy, horizon)?,
                finite_horizon_table(&mdp, &table, horizon),
            ),
        };
        let truth = true_derivatives(&mut g, value_expr, &policy, max_order)?;
        let values = match noise {
            Some((sigma, seed)) if sigma > 0.0 => perturb_values(&mdp, &exact_values, sigma, seed)?,
            _ => exact_values.clone(),
        };
        Ok(Self {
            mdp,
            logits,
            exact_values,
            values,
            truth,
            truth_source,
            horizon,
        })
    }

    /// The problem a sweep configuration describes: a random MDP from
    /// `mdp_seed`, logits Normal(0, 0.1) from a sub-stream of that seed, and
    /// value noise from a sub-stream of `run_seed`.
    pub fn from_config(cfg: &SweepConfig) -> Result<Self> {
        let mdp = random_mdp(cfg.n_states, cfg.n_actions, cfg.gamma, cfg.mdp_seed)?;
        Self::from_config_with_mdp(mdp, cfg)
    }

    pub fn from_config_with_mdp(mdp: Mdp, cfg: &SweepConfig) -> Result<Self> {
        let logits = init_logits(
            mdp.n_states,
            mdp.n_actions,
            Some(cfg.mdp_seed.derive(POLICY_STREAM)),
        );
        Self::new(
            mdp,
            logits,
            cfg.truth,
            cfg.horizon,
            cfg.max_order(),
            Some((cfg.value_noise_sigma, cfg.run_seed.derive(NOISE_STREAM))),
        )
    }

    pub fn policy_table(&self) -> PolicyTable {
        PolicyTable::from_logits(self.mdp.n_states, self.mdp.n_actions, &self.logits)
    }
}

/// Estimator settings for one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec<'a> {
    pub estimator: &'a EstimatorConfig,
    pub advantage: &'a AdvantageConfig,
    pub batch_size: usize,
    pub horizon: usize,
    pub max_order: usize,
    pub normalize_advantages: bool,
}

impl<'a> BatchSpec<'a> {
    pub fn from_config(cfg: &'a SweepConfig) -> Self {
        Self {
            estimator: &cfg.estimator,
            advantage: &cfg.advantage,
            batch_size: cfg.batch_size,
            horizon: cfg.horizon,
            max_order: cfg.max_order(),
            normalize_advantages: cfg.normalize_advantages,
        }
    }
}

/// Derivative stack of one trajectory's objective on a fresh graph.
pub fn trajectory_derivatives(
    problem: &Problem,
    traj: &Trajectory,
    adv: &AdvantageSeries,
    estimator: &EstimatorConfig,
    max_order: usize,
) -> Result<DerivativeStack> {
    let mdp = &problem.mdp;
    let mut g = Graph::with_capacity(64 * traj.horizon() + 256);
    let policy = TabularPolicy::new(&mut g, mdp.n_states, mdp.n_actions, &problem.logits)?;
    let objective = build_objective(
        &mut g,
        traj,
        &policy,
        estimator,
        ObjectiveInputs {
            gamma: mdp.gamma,
            values: &problem.values,
            advantages: adv,
        },
    )?;
    derivative_stack(&mut g, objective.expr, policy.params(), max_order)
}

/// Batch-mean derivative estimates from `batch_size` rollouts. Trajectory
/// `i` is sampled with seed `batch_seed.derive(i)`, so smaller batches are
/// prefixes of larger ones.
pub fn estimate_batch(
    problem: &Problem,
    spec: &BatchSpec<'_>,
    batch_seed: RngSeed,
) -> Result<DerivativeStack> {
    Ok(mean_stack(&trajectory_stacks(problem, spec, batch_seed)?))
}

fn trajectory_stacks(
    problem: &Problem,
    spec: &BatchSpec<'_>,
    batch_seed: RngSeed,
) -> Result<Vec<DerivativeStack>> {
    let table = problem.policy_table();
    let trajectories = (0..spec.batch_size)
        .into_par_iter()
        .map(|i| {
            sample_trajectory(
                &problem.mdp,
                &table,
                spec.horizon,
                batch_seed.derive(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut advs: Vec<AdvantageSeries> = trajectories
        .iter()
        .map(|t| advantages(t, &problem.values, spec.advantage))
        .collect();
    if spec.normalize_advantages {
        normalize_batch(&mut advs);
    }
    trajectories
        .par_iter()
        .zip(advs.par_iter())
        .enumerate()
        .map(|(i, (traj, adv))| {
            trajectory_derivatives(problem, traj, adv, spec.estimator, spec.max_order)
                .map_err(|e| e.in_stage(format!("trajectory {i}")))
        })
        .collect()
}

/// Batch means over the first `sizes[k]` rollouts of a single batch of
/// `max(sizes)` rollouts, so nested batch sizes share trajectories. Each
/// mean equals [`estimate_batch`] at that size.
pub fn estimate_prefixes(
    problem: &Problem,
    spec: &BatchSpec<'_>,
    batch_seed: RngSeed,
    sizes: &[usize],
) -> Result<Vec<DerivativeStack>> {
    if spec.normalize_advantages {
        return Err(Error::InvalidConfig(
            "prefix batches cannot share normalised advantages".into(),
        ));
    }
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if sizes.contains(&0) || largest == 0 {
        return Err(Error::InvalidConfig("batch sizes must be positive".into()));
    }
    let full = BatchSpec {
        batch_size: largest,
        ..*spec
    };
    let stacks = trajectory_stacks(problem, &full, batch_seed)?;
    Ok(sizes.iter().map(|&n| mean_stack(&stacks[..n])).collect())
}

/// Splits one batch of `spec.batch_size` rollouts into consecutive disjoint
/// chunks of each size in `sizes` and returns the chunk means, so every
/// size gets `batch_size / size` independent estimates from the same
/// rollouts. Each size must divide the batch size.
pub fn estimate_chunks(
    problem: &Problem,
    spec: &BatchSpec<'_>,
    batch_seed: RngSeed,
    sizes: &[usize],
) -> Result<Vec<Vec<DerivativeStack>>> {
    if spec.normalize_advantages {
        return Err(Error::InvalidConfig(
            "chunked batches cannot share normalised advantages".into(),
        ));
    }
    if let Some(&bad) = sizes
        .iter()
        .find(|&&n| n == 0 || !spec.batch_size.is_multiple_of(n))
    {
        return Err(Error::InvalidConfig(format!(
            "chunk size {bad} does not divide the batch size {}",
            spec.batch_size
        )));
    }
    let stacks = trajectory_stacks(problem, spec, batch_seed)?;
    Ok(sizes
        .iter()
        .map(|&n| stacks.chunks(n).map(mean_stack).collect())
        .collect())
}

/// Component-wise mean, accumulated in index order.
pub fn mean_stack(stacks: &[DerivativeStack]) -> DerivativeStack {
    let n = stacks.len() as f64;
    let mut orders: Vec<Vec<f64>> = stacks[0]
        .orders
        .iter()
        .map(|o| vec![0.0; o.len()])
        .collect();
    for stack in stacks {
        for (acc, order) in orders.iter_mut().zip(&stack.orders) {
            for (a, x) in acc.iter_mut().zip(order) {
                *a += x;
            }
        }
    }
    for order in &mut orders {
        for a in order.iter_mut() {
            *a /= n;
        }
    }
    DerivativeStack { orders }
}

/// Exact expected derivatives of the estimator over all `horizon`-step
/// trajectories (advantages recomputed per trajectory, never normalised).
pub fn expected_derivatives(
    problem: &Problem,
    estimator: &EstimatorConfig,
    advantage: &AdvantageConfig,
    horizon: usize,
    max_order: usize,
) -> Result<DerivativeStack> {
    let mdp = &problem.mdp;
    let mut g = Graph::new();
    let policy = TabularPolicy::new(&mut g, mdp.n_states, mdp.n_actions, &problem.logits)?;
    let expectation = enumerate_expectation(
        &mut g,
        mdp,
        &policy,
        horizon,
        Weighting::Detached,
        |g, traj| {
            let adv = advantages(traj, &problem.values, advantage);
            let objective = build_objective(
                g,
                traj,
                &policy,
                estimator,
                ObjectiveInputs {
                    gamma: mdp.gamma,
                    values: &problem.values,
                    advantages: &adv,
                },
            )?;
            Ok(objective.expr)
        },
    )?;
    derivative_stack(&mut g, expectation, policy.params(), max_order)
}

/// Pearson correlation coefficient.
pub fn correlation(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() || est.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "correlation needs two equal-length series of at least 2 points (got {} and {})",
            est.len(),
            truth.len()
        )));
    }
    let n = est.len() as f64;
    let mean_e = est.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let (mut see, mut stt, mut set) = (0.0, 0.0, 0.0);
    for (e, t) in est.iter().zip(truth) {
        let (de, dt) = (e - mean_e, t - mean_t);
        see += de * de;
        stt += dt * dt;
        set += de * dt;
    }
    if stt == 0.0 {
        return Err(Error::ZeroVariance("correlation truth"));
    }
    if see == 0.0 {
        return Err(Error::ZeroVariance("correlation estimates"));
    }
    Ok((set / (see.sqrt() * stt.sqrt())).clamp(-1.0, 1.0))
}

/// Sample standard deviation with the `n − 1` denominator; 0 for `n < 2`.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Bias, spread and correlation of per-batch estimates of one order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderStats {
    pub bias: f64,
    pub std: f64,
    pub correlation: f64,
}

pub fn order_stats(estimates: &[Vec<f64>], truth: &[f64]) -> Result<OrderStats> {
    let n = estimates.len();
    let dim = truth.len();
    let mut mean = vec![0.0; dim];
    for e in estimates {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x / n as f64;
        }
    }
    let bias = mean
        .iter()
        .zip(truth)
        .map(|(m, t)| (m - t).powi(2))
        .sum::<f64>()
        .sqrt();
    let std = (0..dim)
        .map(|i| {
            let column: Vec<f64> = estimates.iter().map(|e| e[i]).collect();
            sample_std(&column).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let pooled_est: Vec<f64> = estimates.iter().flatten().copied().collect();
    let pooled_truth: Vec<f64> = estimates
        .iter()
        .flat_map(|_| truth.iter().copied())
        .collect();
    let correlation = correlation(&pooled_est, &pooled_truth)?;
    Ok(OrderStats {
        bias,
        std,
        correlation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub order: usize,
    pub bias: f64,
    pub std: f64,
    pub correlation: f64,
    pub n_samples: usize,
    pub batch_size: usize,
    pub seed: RngSeed,
}

/// Per-batch estimates at one sweep point: `[batch][order - 1][param]`.
pub fn sweep_point_estimates(problem: &Problem, cfg: &SweepConfig) -> Result<Vec<DerivativeStack>> {
    match cfg.sampling {
        Sampling::Enumeration => Ok(vec![expected_derivatives(
            problem,
            &cfg.estimator,
            &cfg.advantage,
            cfg.horizon,
            cfg.max_order(),
        )?]),
        Sampling::MonteCarlo => {
            let spec = BatchSpec::from_config(cfg);
            let base = cfg.run_seed.derive(BATCH_STREAM);
            (0..cfg.n_batches)
                .into_par_iter()
                .map(|b| {
                    estimate_batch(problem, &spec, base.derive(b as u64))
                        .map_err(|e| e.in_stage(format!("batch {b}")))
                })
                .collect()
        }
    }
}

/// Runs the sweep on the random MDP described by the configuration.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let problem = Problem::from_config(cfg)?;
    run_sweep_on(&problem, cfg)
}

/// Runs the sweep on a prepared problem. Rows come out in sweep order, then
/// in the configured order of derivative orders.
pub fn run_sweep_on(problem: &Problem, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.sweep_values.len() * cfg.orders.len());
    for &value in &cfg.sweep_values {
        let point = cfg.with_value(value);
        let stacks = sweep_point_estimates(problem, &point)
            .map_err(|e| e.in_stage(format!("{} = {value}", cfg.sweep_variable.as_str())))?;
        for &order in &cfg.orders {
            let estimates: Vec<Vec<f64>> = stacks.iter().map(|s| s.order(order).to_vec()).collect();
            let stats = order_stats(&estimates, problem.truth.order(order))
                .map_err(|e| e.in_stage(format!("order {order} statistics")))?;
            rows.push(SweepRow {
                sweep_value: value,
                order,
                bias: stats.bias,
                std: stats.std,
                correlation: stats.correlation,
                n_samples: stacks.len(),
                batch_size: point.batch_size,
                seed: cfg.run_seed,
            });
        }
    }
    Ok(rows)
}

/// Float formatting used in every CSV: 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_sweep_csv<W: Write>(out: W, cfg: &SweepConfig, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::InvalidConfig(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            cfg.sweep_variable.as_str().to_string(),
            format_float(r.sweep_value),
            r.order.to_string(),
            format_float(r.bias),
            format_float(r.std),
            format_float(r.correlation),
            r.n_samples.to_string(),
            r.batch_size.to_string(),
            cfg.mdp_seed.to_string(),
            r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidConfig(format!("writing CSV: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::AdvantageKind;

    #[test]
    fn correlation_examples() {
        let truth = [1.0, -2.0, 0.5, 3.0];
        assert!((correlation(&truth, &truth).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = truth.iter().map(|x| -x).collect();
        assert!((correlation(&neg, &truth).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            correlation(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::ZeroVariance(_))
        ));
        assert!(matches!(
            correlation(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ZeroVariance(_))
        ));
        assert!(correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn correlation_vanishes_under_noise() {
        use rand::Rng as _;
        use rand_distr::{Distribution, Normal};
        let mut rng = RngSeed(5).rng();
        let truth: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let noise = Normal::new(0.0, 1e4).unwrap();
        let est: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut rng)).collect();
        assert!(correlation(&est, &truth).unwrap().abs() < 0.05);
    }

    #[test]
    fn std_matches_direct_formula() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let mean = 5.0;
        let direct = (xs.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 7.0).sqrt();
        assert!((sample_std(&xs) - direct).abs() < 1e-15);
        let stats = order_stats(
            &xs.iter().map(|&x| vec![x, 1.0]).collect::<Vec<_>>(),
            &[5.0, 0.0],
        )
        .unwrap();
        assert!((stats.std - direct).abs() < 1e-15);
        assert!((stats.bias - 1.0).abs() < 1e-15);
    }

    fn deterministic_problem() -> Problem {
        // Deterministic chain with a near-deterministic policy: every rollout
        // is identical.
        let mdp = Mdp::new(
            0.9,
            vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![1.0, -0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        let logits = vec![50.0, 0.0, 0.0, 50.0];
        Problem::new(mdp, logits, TruthSource::InfiniteHorizon, 6, 2, None).unwrap()
    }

    #[test]
    fn identical_trajectories_average_to_single() {
        let problem = deterministic_problem();
        let estimator = EstimatorConfig::new(EstimatorFamily::Dice);
        let advantage = AdvantageConfig::gae(0.0, 0.9);
        let spec = BatchSpec {
            estimator: &estimator,
            advantage: &advantage,
            batch_size: 7,
            horizon: 6,
            max_order: 2,
            normalize_advantages: false,
        };
        let batch = estimate_batch(&problem, &spec, RngSeed(3)).unwrap();
        let traj =
            sample_trajectory(&problem.mdp, &problem.policy_table(), 6, RngSeed(99)).unwrap();
        let adv = advantages(&traj, &problem.values, &advantage);
        let single = trajectory_derivatives(&problem, &traj, &adv, &estimator, 2).unwrap();
        for k in 1..=2 {
            for (a, b) in batch.order(k).iter().zip(single.order(k)) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn conflicting_sweeps_rejected() {
        let mut cfg = SweepConfig {
            estimator: EstimatorConfig::new(EstimatorFamily::Dice),
            ..SweepConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.sweep_variable = SweepVariable::Tau;
        assert!(cfg.validate().is_err());
        cfg.sweep_variable = SweepVariable::BatchSize;
        cfg.sweep_values = vec![8.0, 32.0];
        assert!(cfg.validate().is_ok());
        cfg.sweep_values = vec![8.5];
        assert!(cfg.validate().is_err());

        let mut cfg = SweepConfig {
            sweep_variable: SweepVariable::Tau,
            sweep_values: vec![0.0, 1.0],
            ..SweepConfig::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.advantage.kind = AdvantageKind::ExactQMinusV;
        assert!(cfg.validate().is_err());
        cfg.advantage.kind = AdvantageKind::Gae;
        cfg.sweep_values = vec![1.5];
        assert!(cfg.validate().is_err());
        cfg.sweep_values = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_sweep_is_deterministic_and_well_formed() {
        let cfg = SweepConfig {
            n_states: 3,
            n_actions: 2,
            batch_size: 16,
            horizon: 10,
            n_batches: 4,
            orders: vec![1, 2],
            sweep_values: vec![0.0, 1.0],
            ..SweepConfig::default()
        };
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!((a[0].sweep_value, a[0].order), (0.0, 1));
        assert_eq!((a[3].sweep_value, a[3].order), (1.0, 2));
        for r in &a {
            assert!((-1.0..=1.0).contains(&r.correlation));
            assert!(r.std >= 0.0);
        }
        // λ leaves first-order estimates untouched.
        assert!((a[0].bias - a[2].bias).abs() < 1e-10 * a[0].bias.max(1.0));
        assert!((a[0].std - a[2].std).abs() < 1e-10 * a[0].std.max(1.0));

        let mut text = Vec::new();
        write_sweep_csv(&mut text, &cfg, &a).unwrap();
        let text = String::from_utf8(text).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "lambda");
        assert_eq!(first[1], "0.0000000000000000e0");
        assert_eq!(first[6], "4");
    }

    #[test]
    fn enumeration_sweep_has_single_sample() {
        let cfg = SweepConfig {
            n_states: 2,
            n_actions: 2,
            horizon: 3,
            orders: vec![1],
            sweep_values: vec![1.0],
            truth: TruthSource::FiniteHorizon,
            sampling: Sampling::Enumeration,
            advantage: AdvantageConfig {
                kind: AdvantageKind::ExactQMinusV,
                ..AdvantageConfig::gae(0.0, 0.95)
            },
            ..SweepConfig::default()
        };
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows[0].n_samples, 1);
        assert_eq!(rows[0].std, 0.0);
        assert!(rows[0].bias < 1e-10);
    }

    #[test]
    fn prefixes_equal_separate_batches() {
        let cfg = SweepConfig {
            n_states: 3,
            n_actions: 2,
            horizon: 8,
            orders: vec![1, 2],
            ..SweepConfig::default()
        };
        let problem = Problem::from_config(&cfg).unwrap();
        let seed = RngSeed(21);
        let sizes = [2, 5, 9];
        let shared =
            estimate_prefixes(&problem, &BatchSpec::from_config(&cfg), seed, &sizes).unwrap();
        for (stack, &n) in shared.iter().zip(&sizes) {
            let spec = BatchSpec {
                batch_size: n,
                ..BatchSpec::from_config(&cfg)
            };
            assert_eq!(stack, &estimate_batch(&problem, &spec, seed).unwrap());
        }
    }

    #[test]
    fn chunks_partition_one_batch() {
        let cfg = SweepConfig {
            n_states: 3,
            n_actions: 2,
            horizon: 8,
            batch_size: 12,
            orders: vec![1],
            ..SweepConfig::default()
        };
        let problem = Problem::from_config(&cfg).unwrap();
        let spec = BatchSpec::from_config(&cfg);
        let seed = RngSeed(4);
        let chunks = estimate_chunks(&problem, &spec, seed, &[3, 12]).unwrap();
        assert_eq!(chunks[0].len(), 4);
        assert_eq!(
            chunks[1],
            vec![estimate_batch(&problem, &spec, seed).unwrap()]
        );
        let mean = mean_stack(&chunks[0]);
        for (a, b) in mean.order(1).iter().zip(chunks[1][0].order(1)) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        assert!(estimate_chunks(&problem, &spec, seed, &[5]).is_err());
    }
}
