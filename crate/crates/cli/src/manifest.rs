//! Run manifests: the fully resolved configuration of a command, written
//! next to its output so the run can be repeated bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use loaded_dice::experiments::SweepConfig;
use loaded_dice::metademo::MetaConfig;
use loaded_dice::Mdp;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactConfig {
    pub mdp: Mdp,
    pub logits_seed: Option<u64>,
    pub max_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub config: SweepConfig,
    /// Explicit MDP; when absent the MDP is drawn from `config.mdp_seed`.
    pub mdp: Option<Mdp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunConfig {
    GenMdp(GenMdpConfig),
    Exact(ExactConfig),
    Sweep(SweepRun),
    Meta(MetaConfig),
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::GenMdp(_) => "gen-mdp",
            RunConfig::Exact(_) => "exact",
            RunConfig::Sweep(_) => "sweep",
            RunConfig::Meta(_) => "meta",
        }
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        match self {
            RunConfig::GenMdp(c) => {
                seeds.insert("mdp".into(), c.seed);
            }
            RunConfig::Exact(c) => {
                if let Some(s) = c.logits_seed {
                    seeds.insert("logits".into(), s);
                }
            }
            RunConfig::Sweep(r) => {
                seeds.insert("mdp".into(), r.config.mdp_seed.0);
                seeds.insert("run".into(), r.config.run_seed.0);
            }
            RunConfig::Meta(c) => {
                seeds.insert("run".into(), c.seed.0);
                for (i, s) in c.task_seeds.iter().enumerate() {
                    seeds.insert(format!("task_{i}"), s.0);
                }
            }
        }
        seeds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(config: RunConfig, output: &Path) -> Self {
        Self {
            command: config.command().to_string(),
            version: loaded_dice::VERSION.to_string(),
            seeds: config.seeds(),
            config,
            outputs: vec![output.to_path_buf()],
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `out.csv` → `out.csv.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}
