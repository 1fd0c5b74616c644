//! Front end for the `loaded-dice` binary: flag parsing, config
//! resolution, run manifests and exit codes.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or invalid input,
//! 3 numeric failure (non-finite value, singular solve, zero variance).

pub mod args;
pub mod manifest;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use loaded_dice::advantage::{AdvantageConfig, AdvantageKind};
use loaded_dice::estimators::EstimatorConfig;
use loaded_dice::experiments::{
    run_sweep_on, write_sweep_csv, Problem, Sampling, SweepConfig, SweepVariable, TruthSource,
};
use loaded_dice::mdp::{init_logits, random_mdp};
use loaded_dice::metademo::{meta_train, write_curve_csv, MetaConfig};
use loaded_dice::oracle::{exact_value, true_derivatives};
use loaded_dice::{Error, Graph, Mdp, RngSeed, TabularPolicy};
use serde::Serialize;

use args::{AdvantageArg, Command, ExactArgs, GenMdpArgs, MetaArgs, SweepArg, SweepArgs, TruthArg};
use manifest::{manifest_path, ExactConfig, GenMdpConfig, RunConfig, RunManifest, SweepRun};

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_IO
}

/// One-line message for a failed run. The library's errors already embed
/// their causes, so the chain stops at the first of them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.downcast_ref::<Error>().is_some() {
            break;
        }
    }
    parts.join(": ")
}

/// Resolves flags into a config without running anything.
pub fn resolve(command: &Command) -> Result<(RunConfig, Option<&Path>)> {
    Ok(match command {
        Command::GenMdp(a) => (RunConfig::GenMdp(gen_mdp_config(a)), Some(a.out.as_path())),
        Command::Exact(a) => (RunConfig::Exact(exact_config(a)?), a.out.as_deref()),
        Command::Sweep(a) => (RunConfig::Sweep(sweep_run(a)?), Some(a.out.as_path())),
        Command::Meta(a) => (RunConfig::Meta(meta_config(a)), Some(a.out.as_path())),
        Command::Rerun(_) => unreachable!("rerun is resolved from its manifest"),
    })
}

pub fn run(command: &Command) -> Result<()> {
    if let Command::Rerun(a) = command {
        let manifest = RunManifest::read(&a.manifest)?;
        let out = match (&a.out, manifest.outputs.first()) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(p)) => Some(p.clone()),
            (None, None) => None,
        };
        return execute(&manifest.config, out.as_deref());
    }
    let (config, out) = resolve(command)?;
    execute(&config, out)
}

/// Runs a resolved config; writes the output and its manifest, or prints
/// to standard output when `out` is `None`.
pub fn execute(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let stage = config.command();
    let body = produce(config).map_err(|e| anyhow::Error::new(e.in_stage(stage)))?;
    match out {
        Some(path) => {
            fs::write(path, &body).with_context(|| format!("writing {}", path.display()))?;
            RunManifest::new(config.clone(), path).write(&manifest_path(path))?;
        }
        None => print!("{}", String::from_utf8_lossy(&body)),
    }
    Ok(())
}

fn produce(config: &RunConfig) -> loaded_dice::Result<Vec<u8>> {
    match config {
        RunConfig::GenMdp(c) => {
            let mdp = random_mdp(c.n_states, c.n_actions, c.gamma, RngSeed(c.seed))?;
            Ok(with_newline(mdp.to_json()?))
        }
        RunConfig::Exact(c) => {
            let report = exact_report(c)?;
            Ok(with_newline(serde_json::to_string_pretty(&report)?))
        }
        RunConfig::Sweep(r) => {
            r.config.validate()?;
            let mdp = match &r.mdp {
                Some(m) => m.clone(),
                None => random_mdp(
                    r.config.n_states,
                    r.config.n_actions,
                    r.config.gamma,
                    r.config.mdp_seed,
                )?,
            };
            let problem = Problem::from_config_with_mdp(mdp, &r.config)?;
            let rows = run_sweep_on(&problem, &r.config)?;
            let mut out = Vec::new();
            write_sweep_csv(&mut out, &r.config, &rows)?;
            Ok(out)
        }
        RunConfig::Meta(c) => {
            let result = meta_train(c)?;
            let mut out = Vec::new();
            write_curve_csv(&mut out, &result)?;
            Ok(out)
        }
    }
}

fn with_newline(mut s: String) -> Vec<u8> {
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Serialize)]
pub struct ExactReport {
    pub value: f64,
    pub logits: Vec<f64>,
    /// `derivatives[k - 1]` is order `k` under the first-parameter protocol.
    pub derivatives: Vec<Vec<f64>>,
}

pub fn exact_report(c: &ExactConfig) -> loaded_dice::Result<ExactReport> {
    c.mdp.validate()?;
    let (s, a) = (c.mdp.n_states, c.mdp.n_actions);
    let logits = init_logits(s, a, c.logits_seed.map(RngSeed));
    let mut g = Graph::new();
    let policy = TabularPolicy::new(&mut g, s, a, &logits)?;
    let (value, _) = exact_value(&mut g, &c.mdp, &policy)?;
    let stack = true_derivatives(&mut g, value, &policy, c.max_order)?;
    Ok(ExactReport {
        value: value.value(),
        logits,
        derivatives: stack.orders,
    })
}

fn read_mdp(path: &Path) -> Result<Mdp> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Mdp::from_json(&text).with_context(|| format!("loading MDP {}", path.display()))
}

fn gen_mdp_config(a: &GenMdpArgs) -> GenMdpConfig {
    GenMdpConfig {
        n_states: a.shape.states,
        n_actions: a.shape.actions,
        gamma: a.shape.gamma,
        seed: a.seed,
    }
}

fn exact_config(a: &ExactArgs) -> Result<ExactConfig> {
    let mdp = match &a.mdp {
        Some(path) => read_mdp(path)?,
        None => random_mdp(
            a.shape.states,
            a.shape.actions,
            a.shape.gamma,
            RngSeed(a.seed),
        )?,
    };
    Ok(ExactConfig {
        mdp,
        logits_seed: a.logits_seed,
        max_order: a.max_order as usize,
    })
}

fn sweep_run(a: &SweepArgs) -> Result<SweepRun> {
    let mdp = a.mdp.as_deref().map(read_mdp).transpose()?;
    let (n_states, n_actions, gamma) = match &mdp {
        Some(m) => (m.n_states, m.n_actions, m.gamma),
        None => (a.shape.states, a.shape.actions, a.shape.gamma),
    };
    let (sweep_variable, default_values) = match a.sweep {
        SweepArg::Tau => (SweepVariable::Tau, vec![0.0, 0.25, 0.5, 0.75, 1.0]),
        SweepArg::Lambda => (SweepVariable::Lambda, vec![0.0, 0.25, 0.5, 0.75, 1.0]),
        SweepArg::Batch => (SweepVariable::BatchSize, vec![8.0, 32.0, 128.0, 512.0]),
    };
    let kind = match a.advantage {
        AdvantageArg::Gae => AdvantageKind::Gae,
        AdvantageArg::Exact => AdvantageKind::ExactQMinusV,
        AdvantageArg::Returns => AdvantageKind::MonteCarloReturn,
    };
    let sweep = SweepConfig {
        mdp_seed: RngSeed(a.mdp_seed.unwrap_or(a.seed)),
        run_seed: RngSeed(a.seed),
        n_states,
        n_actions,
        gamma,
        batch_size: a.batch_size,
        horizon: a.horizon,
        n_batches: a.batches,
        orders: a.orders.clone(),
        sweep_variable,
        sweep_values: a.values.clone().unwrap_or(default_values),
        estimator: EstimatorConfig {
            lambda: a.lambda,
            discount_objective: !a.undiscounted_objective,
            ..EstimatorConfig::new(a.estimator)
        },
        advantage: AdvantageConfig {
            kind,
            tau: a.tau,
            gamma,
            bootstrap_terminal: !a.no_bootstrap,
        },
        value_noise_sigma: a.value_noise,
        normalize_advantages: a.normalize_advantages,
        truth: match a.truth {
            TruthArg::Infinite => TruthSource::InfiniteHorizon,
            TruthArg::Finite => TruthSource::FiniteHorizon,
        },
        sampling: if a.enumerate {
            Sampling::Enumeration
        } else {
            Sampling::MonteCarlo
        },
    };
    sweep.validate()?;
    Ok(SweepRun { config: sweep, mdp })
}

fn meta_config(a: &MetaArgs) -> MetaConfig {
    let defaults = MetaConfig::default();
    MetaConfig {
        inner_lr: a.inner_lr,
        inner_estimator: EstimatorConfig {
            lambda: a.lambda,
            ..defaults.inner_estimator
        },
        inner_advantage: AdvantageConfig {
            gamma: a.shape.gamma,
            ..defaults.inner_advantage
        },
        inner_steps: a.inner_steps,
        task_seeds: match &a.task_seeds {
            Some(s) => s.iter().copied().map(RngSeed).collect(),
            None => (0..a.tasks).map(RngSeed).collect(),
        },
        task_batch: a.task_batch,
        outer_batch: a.outer_batch,
        outer_steps: a.outer_steps,
        outer_lr: a.outer_lr,
        horizon: a.horizon,
        n_states: a.shape.states,
        n_actions: a.shape.actions,
        gamma: a.shape.gamma,
        seed: RngSeed(a.seed),
        fixed_batches: a.fixed_batches,
    }
}
