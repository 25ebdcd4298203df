use std::path::{Path, PathBuf};

use curveclust_core::dataspec::LoadOptions;
use curveclust_core::mixture::MixtureConfig;
use curveclust_core::simbench::SimScenario;
use curveclust_core::{RandomEffectKind, Structure};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs. Loaded from `--config`, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub data: LoadOptions,
    /// `em.k` is the number of clusters; a range given here takes precedence.
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub em: MixtureConfig,
    /// Grid points per factor level for the curve files.
    pub grid_points: usize,
    pub alpha: f64,
    pub scenario: SimScenario,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: PathBuf::from("curveclust-out"),
            data: LoadOptions::default(),
            k_min: None,
            k_max: None,
            em: MixtureConfig::default(),
            grid_points: 101,
            alpha: 0.05,
            scenario: SimScenario::default(),
            replicates: 10,
            base_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReFlag {
    Intercept,
    InterceptSlope,
    None,
}

/// Flag values that override the configuration file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// EM seed; for `simulate` the scenario seed, for `benchmark` the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, conflicts_with = "interaction")]
    pub additive: bool,
    #[arg(long)]
    pub interaction: bool,
    #[arg(long, value_enum)]
    pub random_effect: Option<ReFlag>,
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTarget {
    Em,
    Scenario,
    Benchmark,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(ov: &Overrides, seed_target: SeedTarget) -> Result<Self, CliError> {
        let mut cfg = match &ov.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &ov.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &ov.out {
            cfg.out = v.clone();
        }
        if let Some(v) = ov.k {
            cfg.em.k = v;
            cfg.k_min = None;
            cfg.k_max = None;
        }
        if ov.k_min.is_some() || ov.k_max.is_some() {
            cfg.k_min = ov.k_min.or(cfg.k_min);
            cfg.k_max = ov.k_max.or(cfg.k_max);
        }
        if let Some(v) = ov.seed {
            match seed_target {
                SeedTarget::Em => cfg.em.seed = v,
                SeedTarget::Scenario => cfg.scenario.seed = v,
                SeedTarget::Benchmark => cfg.base_seed = v,
            }
        }
        if let Some(v) = ov.chains {
            cfg.em.chains = v;
        }
        if let Some(v) = ov.alpha {
            cfg.alpha = v;
        }
        if ov.additive {
            cfg.data.structure = Some(Structure::Additive);
        }
        if ov.interaction {
            cfg.data.structure = Some(Structure::Interaction);
        }
        if let Some(v) = ov.random_effect {
            cfg.em.random_effect = match v {
                ReFlag::Intercept => Some(RandomEffectKind::Intercept),
                ReFlag::InterceptSlope => Some(RandomEffectKind::InterceptSlope),
                ReFlag::None => None,
            };
        }
        if let Some(v) = ov.replicates {
            cfg.replicates = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_points < 2 {
            return Err(CliError::Config("grid_points must be at least 2".into()));
        }
        if let (Some(a), Some(b)) = (self.k_min, self.k_max) {
            if a == 0 || a > b {
                return Err(CliError::Config(format!("invalid K range {a}..{b}")));
            }
        }
        self.em.validate()?;
        Ok(())
    }

    /// The K values to fit: the configured range or the single `em.k`.
    pub fn k_values(&self) -> Vec<usize> {
        match (self.k_min, self.k_max) {
            (None, None) => vec![self.em.k],
            (a, b) => {
                let lo = a.unwrap_or(1);
                let hi = b.unwrap_or(lo.max(self.em.k));
                (lo..=hi).collect()
            }
        }
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input.as_deref().ok_or_else(|| CliError::Config("no input file (use --input or `input`)".into()))
    }
}
