//! Run configuration: one JSON file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use meritluck::agents::SpectatorMixture;
use meritluck::effort::EffortDistribution;
use meritluck::environments::{LuckEnvironment, LuckVariant, MultiplierModel, RulesDisclosure, Timing};
use meritluck::meritprob::{AdvantageKind, MeritConvention, PiOptions};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmEnv {
    Outcomes,
    Opportunities {
        #[serde(default)]
        timing: Timing,
    },
    Headstarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub env: ArmEnv,
    #[serde(default)]
    pub informed: bool,
    #[serde(default)]
    pub rules_disclosure: RulesDisclosure,
    /// Defaults to the calibrated mixture of the arm's environment.
    #[serde(default)]
    pub mixture: Option<SpectatorMixture>,
}

impl ArmConfig {
    fn new(name: &str, env: ArmEnv, informed: bool) -> Self {
        ArmConfig {
            name: name.to_string(),
            env,
            informed,
            rules_disclosure: RulesDisclosure::Before,
            mixture: None,
        }
    }

    pub fn environment(&self, cfg: &RunConfig) -> LuckEnvironment {
        let variant = match self.env {
            ArmEnv::Outcomes => LuckVariant::OutcomeLuck { q: 0.0 },
            ArmEnv::Opportunities { timing } => LuckVariant::OpportunityLuck {
                model: cfg.multiplier.clone(),
                timing,
            },
            ArmEnv::Headstarts => LuckVariant::HeadstartLuck {
                support: cfg.headstart_support.clone(),
            },
        };
        LuckEnvironment {
            variant,
            rules_disclosure: self.rules_disclosure,
        }
    }

    pub fn mixture(&self, cfg: &RunConfig) -> SpectatorMixture {
        let base = self.mixture.clone().unwrap_or_else(|| match self.env {
            ArmEnv::Outcomes => SpectatorMixture::calibrated_outcomes(),
            _ => SpectatorMixture::calibrated_opportunities(),
        });
        base.with_informed(self.informed || cfg.informed)
    }

    pub fn is_informed(&self, cfg: &RunConfig) -> bool {
        self.mixture(cfg).informed
    }

    /// Advantage kind whose curve the arm's designs invert, if any.
    pub fn curve_kind(&self) -> Option<AdvantageKind> {
        match self.env {
            ArmEnv::Outcomes => None,
            ArmEnv::Opportunities { .. } => Some(AdvantageKind::Multiplicative),
            ArmEnv::Headstarts => Some(AdvantageKind::Additive),
        }
    }
}

/// Three environments crossed with the information treatment.
pub fn default_arms() -> Vec<ArmConfig> {
    let ante = ArmEnv::Opportunities { timing: Timing::ExAnte };
    let post = ArmEnv::Opportunities { timing: Timing::ExPost };
    vec![
        ArmConfig::new("outcomes", ArmEnv::Outcomes, false),
        ArmConfig::new("opportunities", ante.clone(), false),
        ArmConfig::new("opportunities_ex_post", post.clone(), false),
        ArmConfig::new("outcomes_informed", ArmEnv::Outcomes, true),
        ArmConfig::new("opportunities_informed", ante, true),
        ArmConfig::new("opportunities_ex_post_informed", post, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub effort: EffortDistribution,
    /// Read workers from `worker_id,effort` instead of sampling them.
    pub population_csv: Option<PathBuf>,
    pub multiplier: MultiplierModel,
    pub headstart_support: Vec<u32>,
    /// Curve written by `pi-curve`.
    pub advantage_kind: AdvantageKind,
    pub arms: Vec<ArmConfig>,
    pub n_workers: usize,
    pub n_spectators: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Show every spectator the merit probability.
    pub informed: bool,
    pub strict_merit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            effort: EffortDistribution::default(),
            population_csv: None,
            multiplier: MultiplierModel::default(),
            headstart_support: (0..=15).collect(),
            advantage_kind: AdvantageKind::Multiplicative,
            arms: default_arms(),
            n_workers: 800,
            n_spectators: 390,
            seed: 1,
            out: PathBuf::from("out"),
            informed: false,
            strict_merit: false,
        }
    }
}

/// Flag values; any that are set win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub arm: Option<String>,
    pub informed: bool,
    pub strict_merit: bool,
}

/// Where each top-level setting came from: `default`, `config` or `flag`.
pub type Provenance = BTreeMap<String, String>;

const KEYS: [&str; 12] = [
    "effort",
    "population_csv",
    "multiplier",
    "headstart_support",
    "advantage_kind",
    "arms",
    "n_workers",
    "n_spectators",
    "seed",
    "out",
    "informed",
    "strict_merit",
];

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<(RunConfig, Provenance)> {
        let (mut cfg, from_file) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let raw: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let keys: Vec<String> = raw.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default();
                let cfg: RunConfig =
                    serde_json::from_value(raw).with_context(|| format!("invalid config {}", p.display()))?;
                (cfg, keys)
            }
            None => (RunConfig::default(), Vec::new()),
        };
        let mut prov: Provenance = KEYS
            .iter()
            .map(|k| {
                let src = if from_file.iter().any(|f| f == k) { "config" } else { "default" };
                (k.to_string(), src.to_string())
            })
            .collect();
        let mut flag = |k: &str| {
            prov.insert(k.to_string(), "flag".to_string());
        };
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
            flag("seed");
        }
        if let Some(out) = &flags.out {
            cfg.out = out.clone();
            flag("out");
        }
        if let Some(name) = &flags.arm {
            ensure!(
                cfg.arms.iter().any(|a| &a.name == name),
                "unknown arm `{name}`; configured arms: {}",
                cfg.arms.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(", ")
            );
            cfg.arms.retain(|a| &a.name == name);
            flag("arms");
        }
        if flags.informed {
            cfg.informed = true;
            flag("informed");
        }
        if flags.strict_merit {
            cfg.strict_merit = true;
            flag("strict_merit");
        }
        cfg.validate()?;
        Ok((cfg, prov))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_workers >= 2, "n_workers must be at least 2");
        ensure!(self.n_spectators >= 1, "n_spectators must be positive");
        ensure!(!self.arms.is_empty(), "no arms configured");
        ensure!(!self.headstart_support.is_empty(), "headstart_support is empty");
        self.effort.validate()?;
        self.multiplier.validate()?;
        for (k, arm) in self.arms.iter().enumerate() {
            let ok = !arm.name.is_empty()
                && arm.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            ensure!(ok, "arm name `{}` must be nonempty and use only [A-Za-z0-9_-]", arm.name);
            if self.arms[..k].iter().any(|a| a.name == arm.name) {
                bail!("arm `{}` is configured twice", arm.name);
            }
            arm.mixture(self).validate()?;
        }
        if let Some(p) = &self.population_csv {
            ensure!(p.is_file(), "population file {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn pi_options(&self) -> PiOptions {
        PiOptions {
            merit: if self.strict_merit {
                MeritConvention::Strict
            } else {
                MeritConvention::Weak
            },
            ..PiOptions::default()
        }
    }
}
