//! Tabular MDPs, random generation, softmax policies and rollouts.
//!
//! Rewards depend on the state only and are collected on arrival:
//! `r_t = R(s_t)`, so the first reward of an episode precedes any action.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ExprRef, Graph};
use crate::error::{Error, Result};
use crate::rng::{Rng, RngSeed};

const STOCHASTIC_TOLERANCE: f64 = 1e-12;

/// Mean and standard deviation of randomly generated state rewards.
pub const REWARD_MEAN: f64 = 5.0;
pub const REWARD_STD: f64 = 10.0;

/// Finite MDP with state-only rewards. Field names and nesting match the
/// on-disk JSON schema (`transition` is indexed `[s][a][s']`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
}

fn field_error(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidMdp {
        field: field.into(),
        message: message.into(),
    }
}

fn check_distribution(field: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(field_error(
            field,
            format!("expected {len} entries, found {}", row.len()),
        ));
    }
    if let Some(bad) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(field_error(
            field,
            format!("entry {bad} is not a probability"),
        ));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return Err(field_error(field, format!("sums to {total}, not 1")));
    }
    Ok(())
}

impl Mdp {
    pub fn new(
        gamma: f64,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Mdp {
            n_states: transition.len(),
            n_actions: transition.first().map_or(0, Vec::len),
            gamma,
            transition,
            reward,
            initial,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(field_error("n_states", "must be at least 1"));
        }
        if self.n_actions == 0 {
            return Err(field_error("n_actions", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(field_error(
                "gamma",
                format!("{} is outside [0, 1)", self.gamma),
            ));
        }
        if self.transition.len() != self.n_states {
            return Err(field_error(
                "transition",
                format!(
                    "expected {} states, found {}",
                    self.n_states,
                    self.transition.len()
                ),
            ));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != self.n_actions {
                return Err(field_error(
                    format!("transition[{s}]"),
                    format!(
                        "expected {} actions, found {}",
                        self.n_actions,
                        per_action.len()
                    ),
                ));
            }
            for (a, row) in per_action.iter().enumerate() {
                check_distribution(&format!("transition[{s}][{a}]"), row, self.n_states)?;
            }
        }
        if self.reward.len() != self.n_states {
            return Err(field_error(
                "reward",
                format!(
                    "expected {} entries, found {}",
                    self.n_states,
                    self.reward.len()
                ),
            ));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(field_error("reward", "entries must be finite"));
        }
        check_distribution("initial", &self.initial, self.n_states)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Mdp = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_params(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[s][a][next]
    }

    /// State-to-state kernel under a policy: `M[s][s'] = Σ_a π(a|s) P(s,a,s')`.
    pub fn induced_transition(&self, policy: &PolicyTable) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                let mut row = vec![0.0; self.n_states];
                for a in 0..self.n_actions {
                    let pa = policy.prob(s, a);
                    for (next, m) in row.iter_mut().enumerate() {
                        *m += pa * self.p(s, a, next);
                    }
                }
                row
            })
            .collect()
    }
}

/// Random MDP: each transition row is i.i.d. uniform then normalised,
/// rewards are Normal(5, 10) per state and the start distribution is uniform.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: RngSeed) -> Result<Mdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidConfig(format!(
            "random_mdp needs at least one state and one action (got {n_states}x{n_actions})"
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma {gamma} is outside [0, 1)"
        )));
    }
    let mut rng = seed.rng();
    let transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    // Strictly positive draws keep every row normalisable.
                    let raw: Vec<f64> = (0..n_states).map(|_| 1.0 - rng.random::<f64>()).collect();
                    let total: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / total).collect()
                })
                .collect()
        })
        .collect();
    let normal = Normal::new(REWARD_MEAN, REWARD_STD).expect("valid normal");
    let reward = (0..n_states).map(|_| normal.sample(&mut rng)).collect();
    let initial = vec![1.0 / n_states as f64; n_states];
    let mdp = Mdp {
        n_states,
        n_actions,
        gamma,
        transition,
        reward,
        initial,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Initial logits: zeros, or Normal(0, 0.1) noise when a seed is given.
pub fn init_logits(n_states: usize, n_actions: usize, seed: Option<RngSeed>) -> Vec<f64> {
    match seed {
        None => vec![0.0; n_states * n_actions],
        Some(seed) => {
            let mut rng = seed.rng();
            let normal = Normal::new(0.0, 0.1).expect("valid normal");
            (0..n_states * n_actions)
                .map(|_| normal.sample(&mut rng))
                .collect()
        }
    }
}

/// Plain-number softmax policy used for sampling and numeric oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn from_logits(n_states: usize, n_actions: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), n_states * n_actions, "logit table shape");
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            probs.extend(exps.into_iter().map(|e| e / total));
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::from_logits(n_states, n_actions, &vec![0.0; n_states * n_actions])
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Softmax policy whose logits live on an expression graph.
///
/// Log-probabilities and probabilities for every `(s, a)` are built once at
/// construction, so objectives share them.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<ExprRef>,
    log_probs: Vec<ExprRef>,
    probs: Vec<ExprRef>,
}

impl TabularPolicy {
    /// Creates one graph variable per logit, state-major.
    pub fn new(g: &mut Graph, n_states: usize, n_actions: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::InvalidConfig(format!(
                "expected {} logits, got {}",
                n_states * n_actions,
                logits.len()
            )));
        }
        let vars = logits
            .iter()
            .map(|&l| g.variable(l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_exprs(g, n_states, n_actions, vars)
    }

    /// Policy over arbitrary logit expressions, e.g. adapted parameters.
    pub fn from_exprs(
        g: &mut Graph,
        n_states: usize,
        n_actions: usize,
        logits: Vec<ExprRef>,
    ) -> Result<Self> {
        if logits.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::InvalidConfig(format!(
                "expected {} logits, got {}",
                n_states * n_actions,
                logits.len()
            )));
        }
        let mut log_probs = Vec::with_capacity(logits.len());
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let max = row
                .iter()
                .map(|l| l.value())
                .fold(f64::NEG_INFINITY, f64::max);
            let shift = g.constant(max)?;
            let shifted = row
                .iter()
                .map(|&l| g.sub(l, shift))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let exps = shifted
                .iter()
                .map(|&x| g.exp(x))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let total = g.sum(&exps)?;
            let log_total = g.log(total)?;
            for &x in &shifted {
                let lp = g.sub(x, log_total)?;
                log_probs.push(lp);
                probs.push(g.exp(lp)?);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
            log_probs,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Logit nodes, state-major. For [`TabularPolicy::new`] these are the
    /// differentiable parameters; the first one is logit(state 0, action 0).
    pub fn params(&self) -> &[ExprRef] {
        &self.logits
    }

    pub fn logit_values(&self) -> Vec<f64> {
        self.logits.iter().map(|l| l.value()).collect()
    }

    /// `log π(a|s)`, computed with max-subtraction.
    #[inline]
    pub fn log_prob(&self, s: usize, a: usize) -> ExprRef {
        self.log_probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> ExprRef {
        self.probs[s * self.n_actions + a]
    }

    pub fn table(&self) -> PolicyTable {
        PolicyTable::from_logits(self.n_states, self.n_actions, &self.logit_values())
    }
}

/// Differentiable `log π(a|s)`.
pub fn policy_log_prob(policy: &TabularPolicy, s: usize, a: usize) -> ExprRef {
    policy.log_prob(s, a)
}

/// A finite rollout: `states[t]`, `actions[t]` and `rewards[t] = R(states[t])`
/// for `t < T`, followed by `terminal_state = s_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal_state: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards
            .iter()
            .rev()
            .fold(0.0, |acc, &r| r + gamma * acc)
    }
}

fn sample_index(rng: &mut Rng, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        cumulative += w;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

/// Rolls out `horizon` steps: `s_0 ~ P₀`, `a_t ~ π(·|s_t)`, `r_t = R(s_t)`,
/// `s_{t+1} ~ P(s_t, a_t, ·)`.
pub fn sample_trajectory(
    mdp: &Mdp,
    policy: &PolicyTable,
    horizon: usize,
    seed: RngSeed,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let mut rng = seed.rng();
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = sample_index(&mut rng, mdp.initial.iter().copied());
    for _ in 0..horizon {
        let a = sample_index(&mut rng, (0..mdp.n_actions).map(|a| policy.prob(s, a)));
        states.push(s);
        actions.push(a);
        rewards.push(mdp.reward[s]);
        s = sample_index(&mut rng, mdp.transition[s][a].iter().copied());
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
        terminal_state: s,
    })
}
