//! Experiment configuration files.
//!
//! A configuration is a TOML document. Top-level keys select the policies,
//! horizon, run count and master seed; `[instance]`, `[policy_params]`,
//! `[tabular]` and `[train]` hold the nested settings. See `configs/` for
//! annotated examples.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use cqb_core::contrastive::{ProjectionHead, TrainConfig, DEFAULT_D_OUT, DEFAULT_HIDDEN};
use cqb_core::env::{
    generate_instance, tabular_instance_from, InstanceParams, TabularParams, TabularPrototypes,
};
use cqb_core::policy::FeatureMap;
use cqb_core::{MnlInstance, PolicyKind, PolicyParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Ground-truth model the runs are simulated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    /// Disjoint linear utilities with random parameters.
    #[default]
    Linear,
    /// Clustered per-context departure tables.
    Tabular,
}

/// Extra knobs of the tabular environment. Dimensions, rates and pool size
/// come from `[instance]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSection {
    pub clusters: usize,
    pub rho: f64,
    pub noise: f64,
}

impl Default for TabularSection {
    fn default() -> Self {
        let d = TabularParams::default();
        TabularSection { clusters: d.clusters, rho: d.rho, noise: d.noise }
    }
}

/// Offline projection-head training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Offline items drawn before balancing.
    pub items: usize,
    /// Items kept per best-server group.
    pub per_model: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            items: 300,
            per_model: 10,
            hidden: DEFAULT_HIDDEN,
            d_out: DEFAULT_D_OUT,
            optimizer: TrainConfig::default(),
        }
    }
}

fn default_runs() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; per-run seeds are derived from it.
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Rounds per run.
    pub horizon: u64,
    /// A single policy name. Mutually exclusive with `policies`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<String>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub environment: EnvironmentKind,
    /// Trained projection head applied to contexts before learning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<PathBuf>,
    pub instance: InstanceParams,
    #[serde(default)]
    pub policy_params: PolicyParams,
    #[serde(default)]
    pub tabular: TabularSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(CliError::Config("horizon must be at least 1".into()));
        }
        self.instance.validate()?;
        self.policy_params.validate()?;
        self.policy_kinds()?;
        if self.environment == EnvironmentKind::Tabular {
            if self.tabular.clusters == 0 {
                return Err(CliError::Config("tabular.clusters must be at least 1".into()));
            }
            if self.instance.n_servers < 2 {
                return Err(CliError::Config("the tabular environment needs two servers".into()));
            }
        }
        if self.train.items == 0 || self.train.per_model == 0 {
            return Err(CliError::Config("train.items and train.per_model must be positive".into()));
        }
        if self.train.hidden == 0 || self.train.d_out == 0 {
            return Err(CliError::Config("train.hidden and train.d_out must be positive".into()));
        }
        Ok(())
    }

    /// The requested policies in file order.
    pub fn policy_kinds(&self) -> Result<Vec<PolicyKind>, CliError> {
        let names: Vec<&str> = match (&self.policy, self.policies.is_empty()) {
            (Some(_), false) => {
                return Err(CliError::Config("set either policy or policies, not both".into()))
            }
            (Some(p), true) => vec![p.as_str()],
            (None, false) => self.policies.iter().map(String::as_str).collect(),
            (None, true) => return Err(CliError::Config("no policy given".into())),
        };
        let mut seen = HashSet::new();
        let mut kinds = Vec::with_capacity(names.len());
        for name in names {
            let kind: PolicyKind = name.parse()?;
            if !seen.insert(kind) {
                return Err(CliError::Config(format!("policy {name} listed twice")));
            }
            kinds.push(kind);
        }
        Ok(kinds)
    }

    /// Policy parameters with the CQB-ε horizon defaulting to the run horizon.
    pub fn effective_policy_params(&self) -> PolicyParams {
        let mut p = self.policy_params.clone();
        p.horizon.get_or_insert(self.horizon);
        p
    }

    pub fn tabular_params(&self) -> TabularParams {
        TabularParams {
            d_in: self.instance.d,
            n_servers: self.instance.n_servers,
            k: self.instance.k,
            arrival_rate: self.instance.arrival_rate,
            slack: self.instance.slack,
            pool_size: self.instance.pool_size,
            clusters: self.tabular.clusters,
            rho: self.tabular.rho,
            noise: self.tabular.noise,
        }
    }

    /// Tabular prototypes are tied to the master seed so a head trained
    /// offline matches every run's pool.
    pub fn tabular_prototypes(&self) -> Result<TabularPrototypes, CliError> {
        Ok(TabularPrototypes::for_seed(&self.tabular_params(), self.seed)?)
    }

    /// The instance for one run seed.
    pub fn instance_for(
        &self,
        run_seed: u64,
        prototypes: Option<&TabularPrototypes>,
    ) -> Result<MnlInstance, CliError> {
        Ok(match (self.environment, prototypes) {
            (EnvironmentKind::Linear, _) => generate_instance(&self.instance, run_seed)?,
            (EnvironmentKind::Tabular, Some(p)) => tabular_instance_from(p, run_seed)?,
            (EnvironmentKind::Tabular, None) => {
                tabular_instance_from(&self.tabular_prototypes()?, run_seed)?
            }
        })
    }

    pub fn feature_map(&self) -> Result<FeatureMap, CliError> {
        let Some(path) = &self.head else { return Ok(FeatureMap::Identity) };
        let head = ProjectionHead::read_json(path).map_err(|e| {
            CliError::Config(format!("cannot load head {}: {e}", path.display()))
        })?;
        if head.d_in() != self.instance.d {
            return Err(CliError::Config(format!(
                "head expects {}-dimensional contexts but instance.d = {}",
                head.d_in(),
                self.instance.d
            )));
        }
        Ok(FeatureMap::Head(head))
    }

    /// Non-fatal problems worth reporting before a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.environment == EnvironmentKind::Tabular {
            let target = self.instance.arrival_rate + self.instance.slack;
            match self.tabular_prototypes().and_then(|p| Ok(p.best_rates()?)) {
                Ok(rates) => {
                    for (c, r) in rates.iter().enumerate() {
                        if *r < target {
                            out.push(format!(
                                "tabular cluster {c} peaks at departure rate {r:.4} below \
                                 λ + ε = {target:.4}; its items will mostly be rejected"
                            ));
                        }
                    }
                }
                Err(e) => out.push(format!("could not check tabular slackness: {e}")),
            }
        }
        if self.head.is_some() {
            let kinds = self.policy_kinds().unwrap_or_default();
            if !kinds.iter().any(|k| {
                matches!(k, PolicyKind::Acqb | PolicyKind::AcqbDisjoint | PolicyKind::CqbEps)
            }) {
                out.push("a head is configured but no selected policy learns from features".into());
            }
        }
        out
    }
}
