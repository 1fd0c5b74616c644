//! Tabular meta-learning through a differentiable policy-gradient step.
//!
//! Each task is a random MDP. The inner loop adapts the shared logits with
//! `θ′ = θ + α ∇_θ Ĵ_λ(θ)`, where `Ĵ_λ` is the batch-mean Loaded DiCE
//! objective and the gradient is kept as graph expressions. The outer loop
//! samples trajectories from `π_θ′`, builds DiCE with a baseline on them and
//! differentiates with respect to `θ`, which goes through the inner gradient.
//!
//! Seeds: inner batches use `seed.derive_path(&[step, task, 0, k])` for
//! inner step `k`, outer batches `seed.derive_path(&[step, task, 1])`, with
//! `step` pinned to 0 when `fixed_batches` is set.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{advantages, AdvantageConfig, AdvantageKind, AdvantageSeries};
use crate::autodiff::{ExprRef, Graph};
use crate::error::{Error, Result};
use crate::estimators::{
    dice_baseline_objective, loaded_dice_objective, EstimatorConfig, EstimatorFamily,
};
use crate::experiments::format_float;
use crate::mdp::{random_mdp, sample_trajectory, Mdp, PolicyTable, TabularPolicy, Trajectory};
use crate::oracle::{
    enumerate_expectation, expected_return, finite_horizon_table, finite_horizon_value, Weighting,
};
use crate::rng::RngSeed;

pub const CURVE_HEADER: [&str; 3] = ["outer_step", "mean_post_adapt_return", "stderr"];

const INNER_ROLE: u64 = 0;
const OUTER_ROLE: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner step size α.
    pub inner_lr: f64,
    pub inner_estimator: EstimatorConfig,
    /// Advantages for the inner objective, computed from the task's exact
    /// finite-horizon table at the pre-step parameters.
    pub inner_advantage: AdvantageConfig,
    pub inner_steps: usize,
    pub task_seeds: Vec<RngSeed>,
    /// Trajectories per task for the inner step.
    pub task_batch: usize,
    /// Post-adaptation trajectories per task for the outer gradient.
    pub outer_batch: usize,
    pub outer_steps: usize,
    pub outer_lr: f64,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub seed: RngSeed,
    /// Reuse the same batch seeds at every outer step.
    pub fixed_batches: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        let gamma = 0.95;
        Self {
            inner_lr: 0.1,
            inner_estimator: EstimatorConfig {
                discount_objective: true,
                ..EstimatorConfig::loaded_dice(1.0)
            },
            inner_advantage: AdvantageConfig {
                kind: AdvantageKind::ExactQMinusV,
                tau: 0.0,
                gamma,
                bootstrap_terminal: false,
            },
            inner_steps: 1,
            task_seeds: (0..5).map(RngSeed).collect(),
            task_batch: 32,
            outer_batch: 32,
            outer_steps: 100,
            outer_lr: 0.05,
            horizon: 50,
            n_states: 5,
            n_actions: 4,
            gamma,
            seed: RngSeed(0),
            fixed_batches: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad(format!(
                "inner_lr {} must be finite and >= 0",
                self.inner_lr
            ));
        }
        if !self.outer_lr.is_finite() {
            return bad(format!("outer_lr {} must be finite", self.outer_lr));
        }
        if self.task_seeds.is_empty() {
            return bad("at least one task seed is required".into());
        }
        if self.task_batch == 0
            || self.outer_batch == 0
            || self.horizon == 0
            || self.inner_steps == 0
        {
            return bad("batch sizes, horizon and inner_steps must be positive".into());
        }
        if self.inner_estimator.family != EstimatorFamily::LoadedDice {
            return bad(format!(
                "the inner estimator must be loaded_dice, not {}",
                self.inner_estimator.family
            ));
        }
        if self.inner_advantage.gamma != self.gamma {
            return bad(format!(
                "advantage gamma {} differs from the task gamma {}",
                self.inner_advantage.gamma, self.gamma
            ));
        }
        self.inner_estimator.validate()?;
        self.inner_advantage.validate()
    }

    /// The task MDPs in seed order.
    pub fn tasks(&self) -> Result<Vec<Mdp>> {
        self.task_seeds
            .iter()
            .map(|&s| random_mdp(self.n_states, self.n_actions, self.gamma, s))
            .collect()
    }

    fn batch_step(&self, step: usize) -> u64 {
        if self.fixed_batches {
            0
        } else {
            step as u64
        }
    }
}

/// Trajectories and their (constant) advantages for one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerBatch {
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<AdvantageSeries>,
}

/// Samples `task_batch` rollouts under `logits`; trajectory `i` uses
/// `seed.derive(i)`.
pub fn sample_inner_batch(
    task: &Mdp,
    logits: &[f64],
    cfg: &MetaConfig,
    seed: RngSeed,
) -> Result<InnerBatch> {
    let table = PolicyTable::from_logits(task.n_states, task.n_actions, logits);
    let values = finite_horizon_table(task, &table, cfg.horizon);
    let trajectories = (0..cfg.task_batch)
        .map(|i| sample_trajectory(task, &table, cfg.horizon, seed.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let advantages = trajectories
        .iter()
        .map(|t| advantages(t, &values, &cfg.inner_advantage))
        .collect();
    Ok(InnerBatch {
        trajectories,
        advantages,
    })
}

/// Where the inner objective's trajectories come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerSamples {
    /// Fresh rollouts drawn from the current parameters.
    Sampled(RngSeed),
    /// One pre-drawn batch per inner step, held fixed.
    Fixed(Vec<InnerBatch>),
    /// Every trajectory weighted by its (detached) probability, with
    /// advantages from the exact table.
    Enumerated,
}

fn batch_objective(
    g: &mut Graph,
    policy: &TabularPolicy,
    task: &Mdp,
    cfg: &MetaConfig,
    batch: &InnerBatch,
) -> Result<ExprRef> {
    let mut terms = Vec::with_capacity(batch.trajectories.len());
    for (traj, adv) in batch.trajectories.iter().zip(&batch.advantages) {
        let obj = loaded_dice_objective(g, traj, adv, policy, &cfg.inner_estimator, task.gamma)?;
        terms.push(obj.expr);
    }
    let total = g.sum(&terms)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64)?)
}

fn enumerated_objective(
    g: &mut Graph,
    policy: &TabularPolicy,
    task: &Mdp,
    cfg: &MetaConfig,
) -> Result<ExprRef> {
    let values = finite_horizon_table(task, &policy.table(), cfg.horizon);
    enumerate_expectation(
        g,
        task,
        policy,
        cfg.horizon,
        Weighting::Detached,
        |g, traj| {
            let adv = advantages(traj, &values, &cfg.inner_advantage);
            Ok(
                loaded_dice_objective(g, traj, &adv, policy, &cfg.inner_estimator, task.gamma)?
                    .expr,
            )
        },
    )
}

/// Adapted logits `θ′` as expressions over `policy`'s parameters.
///
/// Steps after the first differentiate with respect to the current
/// adapted logits by adding zero-valued variables to them and taking the
/// gradient at those.
pub fn inner_adapt(
    g: &mut Graph,
    policy: &TabularPolicy,
    task: &Mdp,
    cfg: &MetaConfig,
    samples: &InnerSamples,
) -> Result<Vec<ExprRef>> {
    if let InnerSamples::Fixed(batches) = samples {
        if batches.len() != cfg.inner_steps {
            return Err(Error::InvalidConfig(format!(
                "{} fixed batches for {} inner steps",
                batches.len(),
                cfg.inner_steps
            )));
        }
    }
    let (s, a) = (policy.n_states(), policy.n_actions());
    let mut theta: Vec<ExprRef> = policy.params().to_vec();
    for k in 0..cfg.inner_steps {
        let (current, wrt) = if k == 0 {
            (policy.clone(), theta.clone())
        } else {
            let mut probes = Vec::with_capacity(theta.len());
            let mut shifted = Vec::with_capacity(theta.len());
            for &t in &theta {
                let d = g.variable(0.0)?;
                probes.push(d);
                shifted.push(g.add(t, d)?);
            }
            (TabularPolicy::from_exprs(g, s, a, shifted)?, probes)
        };
        let objective = match samples {
            InnerSamples::Sampled(seed) => {
                let batch =
                    sample_inner_batch(task, &current.logit_values(), cfg, seed.derive(k as u64))?;
                batch_objective(g, &current, task, cfg, &batch)?
            }
            InnerSamples::Fixed(batches) => batch_objective(g, &current, task, cfg, &batches[k])?,
            InnerSamples::Enumerated => enumerated_objective(g, &current, task, cfg)?,
        };
        let grads = g.grad_graph(objective, &wrt)?;
        theta = theta
            .iter()
            .zip(&grads)
            .map(|(&t, &d)| {
                let step = g.scale(d, cfg.inner_lr)?;
                g.add(t, step)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
    }
    Ok(theta)
}

/// The composite map `θ ↦ V_T(θ′(θ))` with `V_T` the exact finite-horizon
/// value of the adapted policy, and its gradient with respect to `θ`.
pub fn post_adaptation_value(
    task: &Mdp,
    logits: &[f64],
    cfg: &MetaConfig,
    samples: &InnerSamples,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let policy = TabularPolicy::new(&mut g, task.n_states, task.n_actions, logits)?;
    let adapted = inner_adapt(&mut g, &policy, task, cfg, samples)?;
    let post = TabularPolicy::from_exprs(&mut g, task.n_states, task.n_actions, adapted)?;
    let value = finite_horizon_value(&mut g, task, &post, cfg.horizon)?;
    let grad = g.grad_values(value, policy.params())?;
    Ok((value.value(), grad))
}

/// Central differences of [`post_adaptation_value`] with step `h`.
///
/// Only [`InnerSamples::Enumerated`] with λ = 1 should agree with the
/// autodiff gradient: on a fixed batch the magic-box derivatives are score
/// function estimates, not derivatives of the evaluated map.
pub fn finite_difference_gradient(
    task: &Mdp,
    logits: &[f64],
    cfg: &MetaConfig,
    samples: &InnerSamples,
    h: f64,
) -> Result<Vec<f64>> {
    (0..logits.len())
        .map(|i| {
            let mut plus = logits.to_vec();
            let mut minus = logits.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let (vp, _) = post_adaptation_value(task, &plus, cfg, samples)?;
            let (vm, _) = post_adaptation_value(task, &minus, cfg, samples)?;
            Ok((vp - vm) / (2.0 * h))
        })
        .collect()
}

/// One task's contribution to an outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStep {
    /// Exact discounted return (infinite horizon) of the adapted policy.
    pub post_adapt_return: f64,
    /// Gradient of the outer objective with respect to the shared logits.
    pub outer_grad: Vec<f64>,
}

/// Inner adaptation followed by the REINFORCE-with-baseline outer gradient
/// on post-adaptation rollouts.
pub fn task_step(
    task: &Mdp,
    logits: &[f64],
    cfg: &MetaConfig,
    step: usize,
    task_index: usize,
) -> Result<TaskStep> {
    let base = cfg
        .seed
        .derive_path(&[cfg.batch_step(step), task_index as u64]);
    let mut g = Graph::new();
    let policy = TabularPolicy::new(&mut g, task.n_states, task.n_actions, logits)?;
    let adapted = inner_adapt(
        &mut g,
        &policy,
        task,
        cfg,
        &InnerSamples::Sampled(base.derive(INNER_ROLE)),
    )?;
    let post = TabularPolicy::from_exprs(&mut g, task.n_states, task.n_actions, adapted)?;
    let post_table = post.table();
    let post_adapt_return = expected_return(task, &post_table)?;

    let baseline = finite_horizon_table(task, &post_table, cfg.horizon);
    let outer_seed = base.derive(OUTER_ROLE);
    let mut terms = Vec::with_capacity(cfg.outer_batch);
    for i in 0..cfg.outer_batch {
        let traj = sample_trajectory(task, &post_table, cfg.horizon, outer_seed.derive(i as u64))?;
        terms.push(dice_baseline_objective(&mut g, &traj, &post, &baseline, task.gamma)?.expr);
    }
    let total = g.sum(&terms)?;
    let loss = g.scale(total, 1.0 / cfg.outer_batch as f64)?;
    let outer_grad = g.grad_values(loss, policy.params())?;
    Ok(TaskStep {
        post_adapt_return,
        outer_grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub outer_step: usize,
    pub mean_post_adapt_return: f64,
    /// Standard error across tasks (0 for a single task).
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    /// One point per outer step, measured before that step's update.
    pub curve: Vec<CurvePoint>,
    pub final_logits: Vec<f64>,
}

/// Plain gradient ascent on the mean post-adaptation objective, starting
/// from uniform logits. Tasks run in parallel; steps are sequential.
pub fn meta_train(cfg: &MetaConfig) -> Result<MetaResult> {
    meta_train_from(cfg, &vec![0.0; cfg.n_states * cfg.n_actions])
}

pub fn meta_train_from(cfg: &MetaConfig, init: &[f64]) -> Result<MetaResult> {
    cfg.validate()?;
    let tasks = cfg.tasks()?;
    let mut logits = init.to_vec();
    let mut curve = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let results = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| task_step(task, &logits, cfg, step, i))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage(format!("outer step {step}")))?;
        let n = results.len() as f64;
        let returns: Vec<f64> = results.iter().map(|r| r.post_adapt_return).collect();
        let mean = returns.iter().sum::<f64>() / n;
        let stderr = if results.len() > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        curve.push(CurvePoint {
            outer_step: step,
            mean_post_adapt_return: mean,
            stderr,
        });
        let mut update = vec![0.0; logits.len()];
        for r in &results {
            for (u, g) in update.iter_mut().zip(&r.outer_grad) {
                *u += g;
            }
        }
        for (l, u) in logits.iter_mut().zip(&update) {
            *l += cfg.outer_lr * u / n;
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::Autodiff(crate::AutodiffError::NonFinite {
                node: i,
                op: "outer update",
                value: logits[i],
            })
            .in_stage(format!("outer step {step}")));
        }
    }
    Ok(MetaResult {
        curve,
        final_logits: logits,
    })
}

pub fn write_curve_csv<W: Write>(out: W, result: &MetaResult) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidConfig(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER).map_err(io)?;
    for p in &result.curve {
        w.write_record([
            p.outer_step.to_string(),
            format_float(p.mean_post_adapt_return),
            format_float(p.stderr),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidConfig(format!("writing CSV: {e}")))?;
    Ok(())
}
