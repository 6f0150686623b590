//! Experiment steps shared by the command line and the benchmark harness:
//! split a dataset, build user-model beliefs, train agents and score
//! policies on the held-out stream.

use crate::agents::{
    acceptance_table, simulate, train_stream, Ablation, Agent, AgentCheckpoint, AnnealRouter,
    GreedyRouter, KnnRouter, QPolicy, Router, RoutingData, RuleBasedRouter, SimulationParams,
    TrainOutcome, Variant,
};
use crate::config::{Baseline, RunConfig, UserModelSource};
use crate::datagen::{split_point, Dataset};
use crate::error::Result;
use crate::forecast::FlowForecast;
use crate::metrics::{compute_metrics, normalize_rewards, MetricsReport, TraceRecord};
use crate::rng::{substream, AGENT};
use crate::user_model::{fit_user_model, FitParams};

/// Stream names for the acceptance draws during training and evaluation.
pub const TRAIN_ACCEPTANCE: &str = "acceptance.train";
pub const EVAL_ACCEPTANCE: &str = "acceptance.eval";

pub struct Prepared {
    pub dataset: Dataset,
    pub split: usize,
    pub truth: Vec<Vec<f64>>,
    pub forecast: FlowForecast,
}

impl Prepared {
    pub fn new(cfg: &RunConfig, dataset: Dataset) -> Result<Self> {
        let split = split_point(dataset.events.len(), cfg.datagen.test_events);
        let truth = acceptance_table(&dataset.model, &dataset.events);
        let forecast = dataset.forecast();
        Ok(Prepared {
            dataset,
            split,
            truth,
            forecast,
        })
    }

    pub fn train_len(&self) -> usize {
        self.split
    }

    pub fn test_len(&self) -> usize {
        self.dataset.events.len() - self.split
    }

    fn data<'a>(&'a self, belief: &'a [Vec<f64>], range: std::ops::Range<usize>) -> RoutingData<'a> {
        RoutingData {
            events: &self.dataset.events[range.clone()],
            truth: &self.truth[range.clone()],
            belief: &belief[range],
            forecast: &self.forecast,
        }
    }

    pub fn train_data<'a>(&'a self, belief: &'a [Vec<f64>]) -> RoutingData<'a> {
        self.data(belief, 0..self.split)
    }

    pub fn test_data<'a>(&'a self, belief: &'a [Vec<f64>]) -> RoutingData<'a> {
        self.data(belief, self.split..self.dataset.events.len())
    }
}

/// Acceptance probabilities the policy sees for every event.
pub fn belief(cfg: &RunConfig, prepared: &Prepared, source: UserModelSource) -> Result<Vec<Vec<f64>>> {
    match source {
        UserModelSource::GroundTruth => Ok(prepared.truth.clone()),
        UserModelSource::Fitted => {
            let channels = &cfg.channels;
            let (offers, _) =
                prepared
                    .dataset
                    .legacy_log(channels, 0..prepared.split, cfg.baselines.q_sat, cfg.seed)?;
            let params = FitParams {
                seed: cfg.seed,
                ..cfg.agent.fit.clone()
            };
            let fit = fit_user_model(
                &offers,
                channels.n(),
                channels.bottleneck_index,
                prepared.dataset.model.cardinalities,
                &params,
            )?;
            Ok(acceptance_table(&fit.model, &prepared.dataset.events))
        }
    }
}

/// Trains one agent on the training split.
pub fn train_agent(
    cfg: &RunConfig,
    prepared: &Prepared,
    belief: &[Vec<f64>],
    variant: Variant,
    ablation: Ablation,
) -> Result<(Agent, TrainOutcome)> {
    let agent_cfg = cfg.agent_config(Some(variant), Some(ablation));
    let mut agent = Agent::new(agent_cfg, cfg.channels.n(), substream(cfg.seed, AGENT))?;
    let outcome = train_stream(
        &mut agent,
        &cfg.channels,
        prepared.train_data(belief),
        &mut substream(cfg.seed, TRAIN_ACCEPTANCE),
    )?;
    Ok((agent, outcome))
}

pub fn eval_params(cfg: &RunConfig) -> SimulationParams {
    SimulationParams {
        reward: cfg.reward,
        done_num: cfg.agent.done_num,
        reset_on_terminal: false,
    }
}

/// Runs a policy over the held-out stream with the shared evaluation draws.
pub fn evaluate(
    cfg: &RunConfig,
    prepared: &Prepared,
    belief: &[Vec<f64>],
    router: &mut dyn Router,
) -> Result<Vec<TraceRecord>> {
    simulate(
        router,
        &cfg.channels,
        prepared.test_data(belief),
        &eval_params(cfg),
        &mut substream(cfg.seed, EVAL_ACCEPTANCE),
    )
}

pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    prepared: &Prepared,
    belief: &[Vec<f64>],
    checkpoint: &AgentCheckpoint,
) -> Result<Vec<TraceRecord>> {
    evaluate(cfg, prepared, belief, &mut QPolicy::from_checkpoint(checkpoint))
}

pub fn baseline_router(cfg: &RunConfig, prepared: &Prepared, baseline: Baseline) -> Result<Box<dyn Router>> {
    let rng = substream(cfg.seed, &format!("baseline.{}", baseline.as_str()));
    Ok(match baseline {
        Baseline::RuleBased => Box::new(RuleBasedRouter::new(cfg.baselines.q_sat, rng)),
        Baseline::Greedy => Box::new(GreedyRouter { params: cfg.reward }),
        Baseline::Sa => Box::new(AnnealRouter::new(cfg.reward, cfg.baselines.anneal, rng)),
        Baseline::Knn => {
            let (_, labels) =
                prepared
                    .dataset
                    .legacy_log(&cfg.channels, 0..prepared.split, cfg.baselines.q_sat, cfg.seed)?;
            let mut knn = KnnRouter::new(
                cfg.baselines.knn_k,
                cfg.channels.n(),
                prepared.dataset.model.cardinalities,
            );
            knn.fit(labels);
            Box::new(knn)
        }
    })
}

/// Metrics for a set of named traces, with z-scored mean rewards when there
/// are at least two.
pub fn score(cfg: &RunConfig, traces: &[(String, Vec<TraceRecord>)]) -> Result<Vec<(String, MetricsReport)>> {
    let mut reports = traces
        .iter()
        .map(|(name, t)| Ok((name.clone(), compute_metrics(t, &cfg.channels)?)))
        .collect::<Result<Vec<_>>>()?;
    if reports.len() >= 2 {
        let means = reports
            .iter()
            .map(|(name, r)| (name.clone(), r.mean_reward))
            .collect();
        let z = normalize_rewards(&means)?;
        for (name, r) in &mut reports {
            r.normalized_reward = z.get(name).copied();
        }
    }
    Ok(reports)
}
