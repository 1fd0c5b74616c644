//! Surrogate objectives whose repeated derivatives estimate derivatives of
//! the expected return.
//!
//! Each builder returns a scalar on the policy's graph. Evaluation contracts:
//! DiCE and DiCE-with-baseline evaluate to the sampled discounted return,
//! LVC to `Σ_t R_t`, and Loaded DiCE to exactly zero (or `R₀` with
//! `include_r0`).

use serde::{Deserialize, Serialize};

use crate::advantage::{returns, AdvantageSeries};
use crate::autodiff::{ExprRef, Graph};
use crate::error::{Error, Result};
use crate::mdp::{TabularPolicy, Trajectory};
use crate::oracle::ValueTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorFamily {
    Dice,
    DiceBaseline,
    Lvc,
    LoadedDice,
}

impl std::str::FromStr for EstimatorFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Self::Dice),
            "dice_baseline" => Ok(Self::DiceBaseline),
            "lvc" => Ok(Self::Lvc),
            "loaded_dice" => Ok(Self::LoadedDice),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

impl std::fmt::Display for EstimatorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dice => "dice",
            Self::DiceBaseline => "dice_baseline",
            Self::Lvc => "lvc",
            Self::LoadedDice => "loaded_dice",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub family: EstimatorFamily,
    /// Decay of past dependencies (Loaded DiCE only).
    pub lambda: f64,
    /// Weight step `t` by `γ^t` (Loaded DiCE and LVC).
    pub discount_objective: bool,
    /// Add the derivative-free `R₀` term (Loaded DiCE only).
    pub include_r0: bool,
}

impl EstimatorConfig {
    pub fn new(family: EstimatorFamily) -> Self {
        Self {
            family,
            lambda: 1.0,
            discount_objective: false,
            include_r0: false,
        }
    }

    pub fn loaded_dice(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::new(EstimatorFamily::LoadedDice)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::loaded_dice(1.0)
    }
}

/// A differentiable per-trajectory objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub expr: ExprRef,
}

impl ObjectiveValue {
    pub fn value(&self) -> f64 {
        self.expr.value()
    }
}

fn check_lengths(traj: &Trajectory, series: &AdvantageSeries, what: &str) -> Result<()> {
    if series.len() != traj.horizon() {
        return Err(Error::InvalidConfig(format!(
            "{what} has {} entries for a trajectory of horizon {}",
            series.len(),
            traj.horizon()
        )));
    }
    Ok(())
}

/// `Σ_t γ^t □(a_{≤t}) r_t`.
pub fn dice_objective(
    g: &mut Graph,
    traj: &Trajectory,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<ObjectiveValue> {
    let mut terms = Vec::with_capacity(traj.horizon());
    let mut cumulative: Option<ExprRef> = None;
    let mut discount = 1.0;
    for t in 0..traj.horizon() {
        let lp = policy.log_prob(traj.states[t], traj.actions[t]);
        let deps = match cumulative {
            None => lp,
            Some(prev) => g.add(prev, lp)?,
        };
        cumulative = Some(deps);
        let boxed = g.magicbox(deps)?;
        terms.push(g.scale(boxed, discount * traj.rewards[t])?);
        discount *= gamma;
    }
    Ok(ObjectiveValue {
        expr: g.sum(&terms)?,
    })
}

/// DiCE plus the control variate `Σ_t γ^t (1 − □(a_t)) V̂_t(s_t)`.
///
/// The baseline term evaluates to zero and, because `□(a_t)` covers only
/// the action sampled after `s_t`, has zero expected derivative at every
/// order.
pub fn dice_baseline_objective(
    g: &mut Graph,
    traj: &Trajectory,
    policy: &TabularPolicy,
    values: &ValueTable,
    gamma: f64,
) -> Result<ObjectiveValue> {
    let dice = dice_objective(g, traj, policy, gamma)?;
    let mut terms = vec![dice.expr];
    let one = g.constant(1.0)?;
    let mut discount = 1.0;
    for t in 0..traj.horizon() {
        let s = traj.states[t];
        let boxed = g.magicbox(policy.log_prob(s, traj.actions[t]))?;
        let centred = g.sub(one, boxed)?;
        terms.push(g.scale(centred, discount * values.v(t, s))?);
        discount *= gamma;
    }
    Ok(ObjectiveValue {
        expr: g.sum(&terms)?,
    })
}

/// `Σ_t □(a_t) R_t` with constant reward-to-go `R_t`.
pub fn lvc_objective(
    g: &mut Graph,
    traj: &Trajectory,
    returns: &AdvantageSeries,
    policy: &TabularPolicy,
) -> Result<ObjectiveValue> {
    check_lengths(traj, returns, "returns")?;
    let mut terms = Vec::with_capacity(traj.horizon());
    for t in 0..traj.horizon() {
        let boxed = g.magicbox(policy.log_prob(traj.states[t], traj.actions[t]))?;
        terms.push(g.scale(boxed, returns[t])?);
    }
    Ok(ObjectiveValue {
        expr: g.sum(&terms)?,
    })
}

/// Loaded DiCE, accumulated in log space:
///
/// ```text
/// w ← λw + log π(a_t|s_t)
/// v ← w − log π(a_t|s_t)
/// J ← J + (□(w) − □(v)) · A_t
/// ```
///
/// `gamma` is only used for `discount_objective` and `include_r0`.
pub fn loaded_dice_objective(
    g: &mut Graph,
    traj: &Trajectory,
    adv: &AdvantageSeries,
    policy: &TabularPolicy,
    cfg: &EstimatorConfig,
    gamma: f64,
) -> Result<ObjectiveValue> {
    cfg.validate()?;
    check_lengths(traj, adv, "advantages")?;
    let mut terms = Vec::with_capacity(traj.horizon() + 1);
    let mut w: Option<ExprRef> = None;
    let mut discount = 1.0;
    for t in 0..traj.horizon() {
        let lp = policy.log_prob(traj.states[t], traj.actions[t]);
        let with_action = match w {
            Some(prev) if cfg.lambda != 0.0 => {
                let decayed = if cfg.lambda == 1.0 {
                    prev
                } else {
                    g.scale(prev, cfg.lambda)?
                };
                g.add(decayed, lp)?
            }
            _ => lp,
        };
        let without_action = g.sub(with_action, lp)?;
        let box_w = g.magicbox(with_action)?;
        let box_v = g.magicbox(without_action)?;
        let deps = g.sub(box_w, box_v)?;
        let weight = if cfg.discount_objective {
            discount * adv[t]
        } else {
            adv[t]
        };
        terms.push(g.scale(deps, weight)?);
        w = Some(with_action);
        discount *= gamma;
    }
    if cfg.include_r0 {
        terms.push(g.constant(traj.discounted_return(gamma))?);
    }
    Ok(ObjectiveValue {
        expr: g.sum(&terms)?,
    })
}

/// Per-trajectory inputs shared by every family.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub gamma: f64,
    /// Baseline values (DiCE with baseline).
    pub values: &'a ValueTable,
    /// Advantages (Loaded DiCE). Ignored by the other families.
    pub advantages: &'a AdvantageSeries,
}

/// Builds the configured family's objective for one trajectory.
pub fn build_objective(
    g: &mut Graph,
    traj: &Trajectory,
    policy: &TabularPolicy,
    cfg: &EstimatorConfig,
    inputs: ObjectiveInputs<'_>,
) -> Result<ObjectiveValue> {
    match cfg.family {
        EstimatorFamily::Dice => dice_objective(g, traj, policy, inputs.gamma),
        EstimatorFamily::DiceBaseline => {
            dice_baseline_objective(g, traj, policy, inputs.values, inputs.gamma)
        }
        EstimatorFamily::Lvc => {
            let mut r = returns(traj, inputs.gamma);
            if cfg.discount_objective {
                let mut discount = 1.0;
                for x in r.0.iter_mut() {
                    *x *= discount;
                    discount *= inputs.gamma;
                }
            }
            lvc_objective(g, traj, &r, policy)
        }
        EstimatorFamily::LoadedDice => {
            loaded_dice_objective(g, traj, inputs.advantages, policy, cfg, inputs.gamma)
        }
    }
}
