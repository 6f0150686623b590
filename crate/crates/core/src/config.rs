//! Declarative run configuration (JSON). Every section is optional except
//! `seed`; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{Ablation, AgentConfig, AnnealParams, EpsilonSchedule, Variant, DEFAULT_Q_SAT};
use crate::datagen::GenConfig;
use crate::env::{ChannelConfig, RewardParams, DEFAULT_DONE_NUM};
use crate::error::{ensure, Error, Result};
use crate::forecast::{GbrtParams, DEFAULT_WINDOW};
use crate::replay::{PriorityParams, DEFAULT_BUFFER_SIZE};
use crate::user_model::FitParams;

fn default_channels() -> ChannelConfig {
    ChannelConfig {
        initial_capacity: vec![500, 500, 14],
        bottleneck_index: 2,
        self_service_index: 0,
        drainage_index: 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: ChannelConfig,
    /// Common reward used to score every policy during evaluation.
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default)]
    pub agent: AgentSection,
    #[serde(default)]
    pub replay: ReplaySection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub datagen: GenConfig,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub baselines: BaselineSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserModelSource {
    /// The generator's acceptance network.
    GroundTruth,
    /// A network fitted to the legacy router's offer log on the training split.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub variant: Variant,
    pub ablation: Ablation,
    pub gamma: Option<f64>,
    /// Training reward override; the variant's tuned weights otherwise.
    pub reward: Option<RewardParams>,
    pub epsilon: EpsilonSchedule,
    pub batch_size: usize,
    pub sync_period: u64,
    pub done_num: i64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub flow_scale: f64,
    pub passes: usize,
    pub user_model: UserModelSource,
    pub fit: FitParams,
}

impl Default for AgentSection {
    fn default() -> Self {
        let a = AgentConfig::default();
        AgentSection {
            variant: a.variant,
            ablation: a.ablation,
            gamma: None,
            reward: None,
            epsilon: a.epsilon,
            batch_size: a.batch_size,
            sync_period: a.sync_period,
            done_num: DEFAULT_DONE_NUM,
            learning_rate: a.learning_rate,
            hidden: a.hidden,
            flow_scale: a.flow_scale,
            passes: a.passes,
            user_model: UserModelSource::GroundTruth,
            fit: FitParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub capacity: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub importance_sampling: bool,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let p = PriorityParams::default();
        ReplaySection {
            capacity: DEFAULT_BUFFER_SIZE,
            alpha: p.alpha,
            epsilon: p.epsilon,
            importance_sampling: false,
            beta_start: 0.4,
            beta_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub gbrt: GbrtParams,
    pub window: usize,
    pub train_fraction: f64,
    /// Relative error band `[low, high]` for band accuracy.
    pub band: [f64; 2],
    /// Series to forecast; the dataset's aggregate flow when absent.
    pub series: Option<PathBuf>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            gbrt: GbrtParams::default(),
            window: DEFAULT_WINDOW,
            train_fraction: 0.8,
            band: [-0.08, 0.15],
            series: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    RuleBased,
    Greedy,
    Sa,
    Knn,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::RuleBased => "rule_based",
            Baseline::Greedy => "greedy",
            Baseline::Sa => "sa",
            Baseline::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Baselines evaluated next to the checkpoints by `compare`.
    pub include: Vec<Baseline>,
    pub q_sat: f64,
    pub knn_k: usize,
    pub anneal: AnnealParams,
    /// Window (seconds) of the congestion time series.
    pub congestion_window: i64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            include: vec![Baseline::RuleBased, Baseline::Greedy, Baseline::Sa, Baseline::Knn],
            q_sat: DEFAULT_Q_SAT,
            knn_k: 15,
            anneal: AnnealParams::default(),
            congestion_window: 3600,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.dataset = base.join(&cfg.paths.dataset);
        if let Some(s) = &cfg.forecast.series {
            cfg.forecast.series = Some(base.join(s));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.channels.validate()?;
        self.reward.validate()?;
        self.datagen.validate()?;
        self.agent_config(None, None).validate()?;
        let f = &self.forecast;
        ensure!(f.window > 0, Config, "forecast window must be positive");
        ensure!(
            f.train_fraction > 0.0 && f.train_fraction < 1.0,
            Config,
            "train fraction must lie in (0, 1)"
        );
        ensure!(f.band[0] <= 0.0 && f.band[1] >= 0.0, Config, "band must bracket zero");
        ensure!(f.gbrt.rounds > 0, Config, "boosting needs at least one round");
        ensure!(
            f.gbrt.colsample > 0.0 && f.gbrt.colsample <= 1.0,
            Config,
            "colsample must lie in (0, 1]"
        );
        ensure!(
            self.baselines.congestion_window > 0,
            Config,
            "congestion window must be positive"
        );
        ensure!(self.baselines.q_sat > 0.0, Config, "q_sat must be positive");
        Ok(())
    }

    /// Runtime agent settings, with optional command-line overrides.
    pub fn agent_config(&self, variant: Option<Variant>, ablation: Option<Ablation>) -> AgentConfig {
        let a = &self.agent;
        let r = &self.replay;
        AgentConfig {
            variant: variant.unwrap_or(a.variant),
            ablation: ablation.unwrap_or(a.ablation),
            gamma: a.gamma,
            reward: a.reward,
            epsilon: a.epsilon,
            batch_size: a.batch_size,
            buffer_size: r.capacity,
            sync_period: a.sync_period,
            done_num: a.done_num,
            learning_rate: a.learning_rate,
            hidden: a.hidden.clone(),
            flow_scale: a.flow_scale,
            priority: PriorityParams {
                alpha: r.alpha,
                epsilon: r.epsilon,
            },
            importance_sampling: r.importance_sampling,
            beta_start: r.beta_start,
            beta_end: r.beta_end,
            passes: a.passes,
        }
    }
}
