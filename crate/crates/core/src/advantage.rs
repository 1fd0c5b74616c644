//! Advantage estimation: GAE(γ, τ), discounted returns and exact `Q − V`.
//!
//! Advantages are plain numbers. Objectives consume them as constants, so
//! no derivative ever flows through an advantage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::oracle::ValueTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    Gae,
    MonteCarloReturn,
    ExactQMinusV,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub kind: AdvantageKind,
    /// GAE mixing: 0 is the one-step TD residual, 1 the full return minus V̂.
    pub tau: f64,
    pub gamma: f64,
    /// Value beyond the horizon is `V̂(s_T)` when set, otherwise 0.
    pub bootstrap_terminal: bool,
}

impl AdvantageConfig {
    pub fn gae(tau: f64, gamma: f64) -> Self {
        Self {
            kind: AdvantageKind::Gae,
            tau,
            gamma,
            bootstrap_terminal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau {} outside [0, 1]",
                self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One value per timestep `t = 0..T−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvantageSeries(pub Vec<f64>);

impl AdvantageSeries {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for AdvantageSeries {
    type Output = f64;
    fn index(&self, t: usize) -> &f64 {
        &self.0[t]
    }
}

fn terminal_value(traj: &Trajectory, values: &ValueTable, bootstrap: bool) -> f64 {
    if bootstrap {
        values.v(traj.horizon(), traj.terminal_state)
    } else {
        0.0
    }
}

/// `A_t = δ_t + γτ A_{t+1}` with `δ_t = r_t + γ V̂(s_{t+1}) − V̂(s_t)`.
pub fn gae(traj: &Trajectory, values: &ValueTable, cfg: &AdvantageConfig) -> AdvantageSeries {
    let horizon = traj.horizon();
    let mut out = vec![0.0; horizon];
    let mut next_value = terminal_value(traj, values, cfg.bootstrap_terminal);
    let mut running = 0.0;
    for t in (0..horizon).rev() {
        let here = values.v(t, traj.states[t]);
        let delta = traj.rewards[t] + cfg.gamma * next_value - here;
        running = delta + cfg.gamma * cfg.tau * running;
        out[t] = running;
        next_value = here;
    }
    AdvantageSeries(out)
}

/// Discounted reward-to-go `R_t = Σ_{t' ≥ t} γ^{t'−t} r_{t'}`.
pub fn returns(traj: &Trajectory, gamma: f64) -> AdvantageSeries {
    let mut out = vec![0.0; traj.horizon()];
    let mut running = 0.0;
    for t in (0..traj.horizon()).rev() {
        running = traj.rewards[t] + gamma * running;
        out[t] = running;
    }
    AdvantageSeries(out)
}

/// Advantages of the configured kind.
pub fn advantages(
    traj: &Trajectory,
    values: &ValueTable,
    cfg: &AdvantageConfig,
) -> AdvantageSeries {
    match cfg.kind {
        AdvantageKind::Gae => gae(traj, values, cfg),
        AdvantageKind::MonteCarloReturn => {
            let mut r = returns(traj, cfg.gamma);
            let tail = terminal_value(traj, values, cfg.bootstrap_terminal);
            if tail != 0.0 {
                let horizon = traj.horizon();
                for (t, x) in r.0.iter_mut().enumerate() {
                    *x += cfg.gamma.powi((horizon - t) as i32) * tail;
                }
            }
            r
        }
        AdvantageKind::ExactQMinusV => AdvantageSeries(
            (0..traj.horizon())
                .map(|t| {
                    let (s, a) = (traj.states[t], traj.actions[t]);
                    values.q(t, s, a) - values.v(t, s)
                })
                .collect(),
        ),
    }
}

const NORMALIZE_EPS: f64 = 1e-8;

/// `(a − mean) / (std + 1e-8)` over the series.
pub fn normalize(adv: &AdvantageSeries) -> AdvantageSeries {
    let mut batch = vec![adv.clone()];
    normalize_batch(&mut batch);
    batch.pop().expect("one series")
}

/// Normalises with mean and standard deviation pooled over every timestep
/// of every series in the batch.
pub fn normalize_batch(batch: &mut [AdvantageSeries]) {
    let n: usize = batch.iter().map(AdvantageSeries::len).sum();
    if n == 0 {
        return;
    }
    let mean = batch.iter().flat_map(|a| a.0.iter()).sum::<f64>() / n as f64;
    let var = if n > 1 {
        batch
            .iter()
            .flat_map(|a| a.0.iter())
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64
    } else {
        0.0
    };
    let denom = var.sqrt() + NORMALIZE_EPS;
    for series in batch.iter_mut() {
        for x in series.0.iter_mut() {
            *x = (*x - mean) / denom;
        }
    }
}
