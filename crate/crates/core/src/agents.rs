//! Routing policies: the deep Q-learning family, the legacy rule-based router
//! and myopic baselines, plus the simulation loops that drive them.
//!
//! Training follows the per-arrival loop: observe the state, store the
//! previous arrival's transition (now that its successor state is known), pick
//! a channel epsilon-greedily, let the customer accept or bounce to the
//! bottleneck, book capacity, score the reward, reset on a terminal state and
//! take one minibatch step.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    compute_reward, is_terminal, observe, ChannelConfig, CustomerProfile, EnvState, RequestEvent,
    RewardParams, StateVector, DEFAULT_DONE_NUM, PROFILE_LEN,
};
use crate::error::{ensure, Error, Result};
use crate::forecast::FlowForecast;
use crate::metrics::TraceRecord;
use crate::nn::{sync_target, OptimizerState, QNetwork, TrainSample, CHECKPOINT_VERSION};
use crate::replay::{importance_weights, PrioritizedBuffer, PriorityParams, Sampled, UniformBuffer};
use crate::rng::LabRng;
use crate::user_model::{sample_acceptance, AcceptanceModel, OfferRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dqn,
    Double,
    Dueling,
    DoubleDueling,
    PerDoubleDueling,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dqn,
        Variant::Double,
        Variant::Dueling,
        Variant::DoubleDueling,
        Variant::PerDoubleDueling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dqn => "dqn",
            Variant::Double => "double",
            Variant::Dueling => "dueling",
            Variant::DoubleDueling => "double_dueling",
            Variant::PerDoubleDueling => "per_double_dueling",
        }
    }

    pub fn is_double(self) -> bool {
        matches!(
            self,
            Variant::Double | Variant::DoubleDueling | Variant::PerDoubleDueling
        )
    }

    pub fn is_dueling(self) -> bool {
        matches!(
            self,
            Variant::Dueling | Variant::DoubleDueling | Variant::PerDoubleDueling
        )
    }

    pub fn is_prioritized(self) -> bool {
        self == Variant::PerDoubleDueling
    }

    /// Tuned reward weights and discount per variant and state ablation.
    pub fn default_hyperparameters(self, ablation: Ablation) -> (RewardParams, f64) {
        match (self, ablation) {
            (Variant::PerDoubleDueling, Ablation::NoForecast) => {
                (RewardParams::new(0.8, 0.02, 0.3), 0.3)
            }
            (Variant::PerDoubleDueling, Ablation::NoUser) => {
                (RewardParams::new(0.5, 0.015, 0.3), 0.7)
            }
            (Variant::Dqn, _) => (RewardParams::new(0.8, 0.015, 0.3), 0.7),
            (Variant::Double, _) => (RewardParams::new(0.9, 0.02, 0.3), 0.5),
            _ => (RewardParams::new(0.9, 0.015, 0.3), 0.5),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent variant `{s}`")))
    }
}

/// Which parts of the state (or episode structure) are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoForecast,
    NoUser,
    NoTerminal,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoForecast,
        Ablation::NoUser,
        Ablation::NoTerminal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoForecast => "no_forecast",
            Ablation::NoUser => "no_user",
            Ablation::NoTerminal => "no_terminal",
        }
    }

    /// Applies the ablation to an observed state.
    pub fn apply(self, mut s: StateVector, bottleneck: usize) -> StateVector {
        match self {
            Ablation::NoForecast => s.forecast.iter_mut().for_each(|v| *v = 0.0),
            Ablation::NoUser => {
                for (i, v) in s.acceptance.iter_mut().enumerate() {
                    if i != bottleneck {
                        *v = 0.0;
                    }
                }
            }
            Ablation::Full | Ablation::NoTerminal => {}
        }
        s
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            decay_steps: 5000,
        }
    }
}

impl EpsilonSchedule {
    /// Linear decay from `start` to `end` over `decay_steps`, then flat.
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub ablation: Ablation,
    /// Discount; `None` takes the variant's tuned default.
    pub gamma: Option<f64>,
    /// Training reward; `None` takes the variant's tuned default.
    pub reward: Option<RewardParams>,
    pub epsilon: EpsilonSchedule,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub sync_period: u64,
    pub done_num: i64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Forecast counts are divided by this before entering the network.
    pub flow_scale: f64,
    pub priority: PriorityParams,
    pub importance_sampling: bool,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Passes over the training stream.
    pub passes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::PerDoubleDueling,
            ablation: Ablation::Full,
            gamma: None,
            reward: None,
            epsilon: EpsilonSchedule::default(),
            batch_size: 320,
            buffer_size: 2000,
            sync_period: 200,
            done_num: DEFAULT_DONE_NUM,
            learning_rate: 1e-3,
            hidden: vec![128, 256, 128],
            flow_scale: 100.0,
            priority: PriorityParams::default(),
            importance_sampling: false,
            beta_start: 0.4,
            beta_end: 1.0,
            passes: 1,
        }
    }
}

impl AgentConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or_else(|| self.variant.default_hyperparameters(self.ablation).1)
    }

    pub fn reward_params(&self) -> RewardParams {
        self.reward
            .unwrap_or_else(|| self.variant.default_hyperparameters(self.ablation).0)
    }

    pub fn validate(&self) -> Result<()> {
        let gamma = self.gamma();
        ensure!(
            (0.0..1.0).contains(&gamma),
            Config,
            "gamma must lie in [0, 1), got {gamma}"
        );
        ensure!(
            self.batch_size > 0 && self.batch_size <= self.buffer_size,
            Config,
            "batch size {} must be in 1..=buffer size {}",
            self.batch_size,
            self.buffer_size
        );
        ensure!(self.sync_period > 0, Config, "sync period must be positive");
        ensure!(self.flow_scale > 0.0, Config, "flow scale must be positive");
        ensure!(
            self.learning_rate > 0.0,
            Config,
            "learning rate must be positive"
        );
        ensure!(
            (0.0..=1.0).contains(&self.epsilon.start) && (0.0..=1.0).contains(&self.epsilon.end),
            Config,
            "epsilon bounds must lie in [0, 1]"
        );
        self.reward_params().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVector,
    pub terminal: bool,
}

/// Epsilon-greedy choice; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    ensure!(!q.is_empty(), Contract, "no actions to choose from");
    ensure!(
        (0.0..=1.0).contains(&epsilon),
        Contract,
        "epsilon {epsilon} outside [0, 1]"
    );
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q.len()));
    }
    Ok(argmax(q))
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Bootstrapped regression target for one transition. Vanilla variants take
/// the target network's max; double variants let the online network pick the
/// next action and the target network score it.
pub fn td_target(
    variant: Variant,
    transition: &Transition,
    online: &QNetwork,
    target: &QNetwork,
    gamma: f64,
    flow_scale: f64,
) -> Result<f64> {
    if transition.terminal || gamma == 0.0 {
        return Ok(transition.reward);
    }
    let next = transition.next_state.features(flow_scale);
    let q_target = target.forward(&next)?;
    let bootstrap = if variant.is_double() {
        let a = argmax(&online.forward(&next)?);
        q_target[a]
    } else {
        q_target.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(transition.reward + gamma * bootstrap)
}

enum Memory {
    Uniform(UniformBuffer<Transition>),
    Prioritized(PrioritizedBuffer<Transition>),
}

impl Memory {
    fn len(&self) -> usize {
        match self {
            Memory::Uniform(b) => b.len(),
            Memory::Prioritized(b) => b.len(),
        }
    }

    fn push(&mut self, t: Transition) {
        match self {
            Memory::Uniform(b) => b.push(t),
            Memory::Prioritized(b) => b.push(t),
        }
    }

    fn sample(&self, batch: usize, rng: &mut LabRng) -> Result<Vec<Sampled<'_, Transition>>> {
        match self {
            Memory::Uniform(b) => b.sample(batch, rng),
            Memory::Prioritized(b) => b.sample(batch, rng),
        }
    }
}

/// A learning Q-agent: online and target networks, optimizer and replay memory.
pub struct Agent {
    pub config: AgentConfig,
    n: usize,
    online: QNetwork,
    target: QNetwork,
    opt: OptimizerState,
    memory: Memory,
    rng: LabRng,
    steps: u64,
    updates: u64,
    gamma: f64,
}

impl Agent {
    pub fn new(config: AgentConfig, n: usize, mut rng: LabRng) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(3 * n, &config.hidden, n, config.variant.is_dueling(), &mut rng);
        let target = online.clone();
        let opt = OptimizerState::adam(&online, config.learning_rate);
        let memory = if config.variant.is_prioritized() {
            Memory::Prioritized(PrioritizedBuffer::new(config.buffer_size, config.priority))
        } else {
            Memory::Uniform(UniformBuffer::new(config.buffer_size))
        };
        let gamma = config.gamma();
        Ok(Agent {
            config,
            n,
            online,
            target,
            opt,
            memory,
            rng,
            steps: 0,
            updates: 0,
            gamma,
        })
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.value(self.steps)
    }

    pub fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        self.online.forward(&state.features(self.config.flow_scale))
    }

    pub fn act(&mut self, state: &StateVector) -> Result<usize> {
        let q = self.q_values(state)?;
        let eps = self.epsilon();
        select_action(&q, eps, &mut self.rng)
    }

    pub fn remember(&mut self, t: Transition) -> Result<()> {
        ensure!(t.action < self.n, Contract, "action {} out of range", t.action);
        self.memory.push(t);
        Ok(())
    }

    fn beta(&self, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return self.config.beta_end;
        }
        let frac = (self.steps as f64 / total_steps as f64).min(1.0);
        self.config.beta_start + (self.config.beta_end - self.config.beta_start) * frac
    }

    /// One minibatch update if the memory holds a full batch; `None` otherwise.
    pub fn learn(&mut self, total_steps: u64) -> Result<Option<f64>> {
        let batch_size = self.config.batch_size;
        if self.memory.len() < batch_size {
            return Ok(None);
        }
        let flow_scale = self.config.flow_scale;
        let beta = self.beta(total_steps);
        let (batch, indices) = {
            let sampled = self.memory.sample(batch_size, &mut self.rng)?;
            let weights = if self.config.importance_sampling && self.config.variant.is_prioritized() {
                let probs: Vec<f64> = sampled.iter().map(|s| s.prob).collect();
                importance_weights(&probs, self.memory.len(), beta)
            } else {
                vec![1.0; sampled.len()]
            };
            let mut batch = Vec::with_capacity(sampled.len());
            for (s, w) in sampled.iter().zip(weights) {
                let t = s.item;
                batch.push(TrainSample {
                    input: t.state.features(flow_scale),
                    action: t.action,
                    target: td_target(
                        self.config.variant,
                        t,
                        &self.online,
                        &self.target,
                        self.gamma,
                        flow_scale,
                    )?,
                    weight: w,
                });
            }
            let indices: Vec<usize> = sampled.iter().map(|s| s.index).collect();
            (batch, indices)
        };
        let report = self.online.backward_and_step(&batch, &mut self.opt)?;
        if let Memory::Prioritized(buf) = &mut self.memory {
            buf.update_priorities(&indices, &report.td_errors)?;
        }
        self.updates += 1;
        Ok(Some(report.loss))
    }

    /// Advances the step counter and syncs the target network every `sync_period` steps.
    pub fn tick(&mut self) -> Result<()> {
        self.steps += 1;
        if self.steps % self.config.sync_period == 0 {
            sync_target(&self.online, &mut self.target)?;
        }
        Ok(())
    }

    /// Full weighted loss over the current memory with fixed targets.
    pub fn memory_loss(&self) -> Result<f64> {
        let flow_scale = self.config.flow_scale;
        let items: Vec<&Transition> = match &self.memory {
            Memory::Uniform(b) => (0..b.len()).filter_map(|i| b.get(i)).collect(),
            Memory::Prioritized(b) => (0..b.len()).filter_map(|i| b.get(i)).collect(),
        };
        ensure!(!items.is_empty(), NotReady, "memory is empty");
        let mut batch = Vec::with_capacity(items.len());
        for t in items {
            batch.push(TrainSample {
                input: t.state.features(flow_scale),
                action: t.action,
                target: td_target(
                    self.config.variant,
                    t,
                    &self.online,
                    &self.target,
                    self.gamma,
                    flow_scale,
                )?,
                weight: 1.0,
            });
        }
        Ok(self.online.td_loss_gradient(&batch)?.0.loss)
    }

    pub fn checkpoint(&self, channels: &ChannelConfig) -> AgentCheckpoint {
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            kind: AGENT_KIND.into(),
            n_channels: channels.n(),
            input_dim: self.online.input_dim(),
            dueling: self.online.is_dueling(),
            config: self.config.clone(),
            network: self.online.clone(),
        }
    }
}

const AGENT_KIND: &str = "q_agent";

/// Trained agent on disk: the online network plus the config it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub kind: String,
    pub n_channels: usize,
    pub input_dim: usize,
    pub dueling: bool,
    pub config: AgentConfig,
    pub network: QNetwork,
}

impl AgentCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks the checkpoint against the channel layout it will drive.
    pub fn load(path: &Path, channels: &ChannelConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: AgentCheckpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let fail = |msg: String| Err(Error::Checkpoint(format!("{}: {msg}", path.display())));
        if ck.version != CHECKPOINT_VERSION || ck.kind != AGENT_KIND {
            return fail(format!(
                "expected {AGENT_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.kind, ck.version
            ));
        }
        if ck.n_channels != channels.n() {
            return fail(format!(
                "trained for {} channels, config has {}",
                ck.n_channels,
                channels.n()
            ));
        }
        if ck.network.validate().is_err()
            || ck.network.input_dim() != ck.input_dim
            || ck.input_dim != 3 * ck.n_channels
            || ck.network.output_dim() != ck.n_channels
            || ck.network.is_dueling() != ck.dueling
        {
            return fail("network shape does not match its header".into());
        }
        Ok(ck)
    }

    pub fn name(&self) -> String {
        match self.config.ablation {
            Ablation::Full => self.config.variant.to_string(),
            a => format!("{}-{a}", self.config.variant),
        }
    }
}

/// Per-event inputs shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RoutingData<'a> {
    pub events: &'a [RequestEvent],
    /// Ground-truth acceptance probabilities per event (drives customer answers).
    pub truth: &'a [Vec<f64>],
    /// The policy's user-model estimate per event (enters the state).
    pub belief: &'a [Vec<f64>],
    pub forecast: &'a FlowForecast,
}

impl RoutingData<'_> {
    fn validate(&self, config: &ChannelConfig) -> Result<()> {
        let n = config.n();
        ensure!(
            self.truth.len() == self.events.len() && self.belief.len() == self.events.len(),
            Config,
            "acceptance tables must cover every event"
        );
        ensure!(
            self.truth.iter().chain(self.belief).all(|p| p.len() == n),
            Config,
            "user model emits the wrong number of channels for {n}-channel config"
        );
        ensure!(
            self.forecast.n() == n,
            Config,
            "forecaster covers {} channels, config has {n}",
            self.forecast.n()
        );
        Ok(())
    }
}

/// Acceptance probabilities for every event, memoized by profile.
pub fn acceptance_table(model: &AcceptanceModel, events: &[RequestEvent]) -> Vec<Vec<f64>> {
    let mut memo: HashMap<CustomerProfile, Vec<f64>> = HashMap::new();
    events
        .iter()
        .map(|e| {
            memo.entry(e.profile)
                .or_insert_with(|| model.acceptance_probs(&e.profile))
                .clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub steps: u64,
    pub total_reward: f64,
    pub mean_loss: Option<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub episodes: Vec<EpisodeLog>,
}

struct EpisodeAcc {
    steps: u64,
    reward: f64,
    loss_sum: f64,
    loss_n: u64,
}

impl EpisodeAcc {
    fn new() -> Self {
        EpisodeAcc {
            steps: 0,
            reward: 0.0,
            loss_sum: 0.0,
            loss_n: 0,
        }
    }

    fn finish(&self, episode: u64, terminal: bool) -> EpisodeLog {
        EpisodeLog {
            episode,
            steps: self.steps,
            total_reward: self.reward,
            mean_loss: (self.loss_n > 0).then(|| self.loss_sum / self.loss_n as f64),
            terminal,
        }
    }
}

/// Trains `agent` over the event stream (possibly several passes) and returns
/// the per-arrival trace and per-episode log.
pub fn train_stream(
    agent: &mut Agent,
    config: &ChannelConfig,
    data: RoutingData<'_>,
    accept_rng: &mut LabRng,
) -> Result<TrainOutcome> {
    data.validate(config)?;
    ensure!(agent.n == config.n(), Config, "agent built for {} channels", agent.n);
    let Some(first) = data.events.first() else {
        return Err(Error::Input("empty training stream".into()));
    };
    let ablation = agent.config.ablation;
    let reward_params = agent.reward_params_for_training();
    let done_num = agent.config.done_num;
    let bottleneck = config.bottleneck_index;
    let total_steps = (data.events.len() * agent.config.passes.max(1)) as u64;

    let mut state = EnvState::reset(config, first.arrival_time);
    let mut pending: Option<(StateVector, usize, f64, bool)> = None;
    let mut trace = Vec::with_capacity(data.events.len());
    let mut episodes = Vec::new();
    let mut acc = EpisodeAcc::new();
    let mut step = 0u64;
    let zeros = vec![0.0; config.n()];

    for pass in 0..agent.config.passes.max(1) {
        if pass > 0 {
            // Time restarts with each pass; in-flight work from the previous pass is dropped.
            state = EnvState::reset(config, first.arrival_time);
        }
        for (t, event) in data.events.iter().enumerate() {
            state.process_completions(event.arrival_time);
            let forecast = data.forecast.at(event.arrival_time);
            let s = ablation.apply(observe(&state, &data.belief[t], &forecast, config)?, bottleneck);
            if let Some((ps, pa, pr, pterm)) = pending.take() {
                agent.remember(Transition {
                    state: ps,
                    action: pa,
                    reward: pr,
                    next_state: s.clone(),
                    terminal: pterm,
                })?;
            }
            let action = agent.act(&s)?;
            let accepted = action == bottleneck || sample_acceptance(&data.truth[t], action, accept_rng);
            let final_channel = if accepted { action } else { bottleneck };
            let g = reward_params.g(accepted);
            state.assign(event, final_channel)?;
            let reward_forecast = if ablation == Ablation::NoForecast {
                &zeros
            } else {
                &forecast
            };
            let reward = compute_reward(g, &state.capacity, reward_forecast, &reward_params)?;
            let terminal = ablation != Ablation::NoTerminal && is_terminal(&state.capacity, done_num);
            trace.push(TraceRecord {
                step,
                time: event.arrival_time,
                suggested_channel: action,
                final_channel,
                accepted,
                g,
                reward,
                capacities: state.capacity.clone(),
                terminal,
            });
            pending = Some((s, action, reward, terminal));

            acc.steps += 1;
            acc.reward += reward;
            if let Some(loss) = agent.learn(total_steps)? {
                acc.loss_sum += loss;
                acc.loss_n += 1;
            }
            agent.tick()?;
            step += 1;

            if terminal {
                episodes.push(acc.finish(episodes.len() as u64, true));
                acc = EpisodeAcc::new();
                state = EnvState::reset(config, event.arrival_time);
            }
        }
    }
    if acc.steps > 0 {
        episodes.push(acc.finish(episodes.len() as u64, false));
    }
    Ok(TrainOutcome { trace, episodes })
}

impl Agent {
    fn reward_params_for_training(&self) -> RewardParams {
        self.config.reward_params()
    }
}

/// What a router decided for one customer: the channel last suggested and
/// whether the customer took it. Declines end on the bottleneck channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub suggested: usize,
    pub accepted: bool,
}

pub struct RouteContext<'a> {
    pub config: &'a ChannelConfig,
    pub state: &'a EnvState,
    pub observation: &'a StateVector,
    pub profile: &'a CustomerProfile,
}

/// A routing policy evaluated on a stream. `ask(channel)` offers a channel to
/// the current customer and returns their answer.
pub trait Router {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision>;
}

/// Greedy (epsilon = 0) policy of a trained Q-network.
pub struct QPolicy {
    network: QNetwork,
    ablation: Ablation,
    flow_scale: f64,
}

impl QPolicy {
    pub fn new(network: QNetwork, ablation: Ablation, flow_scale: f64) -> Self {
        QPolicy {
            network,
            ablation,
            flow_scale,
        }
    }

    pub fn from_checkpoint(ck: &AgentCheckpoint) -> Self {
        QPolicy::new(ck.network.clone(), ck.config.ablation, ck.config.flow_scale)
    }
}

impl Router for QPolicy {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision> {
        let s = self
            .ablation
            .apply(ctx.observation.clone(), ctx.config.bottleneck_index);
        let q = self.network.forward(&s.features(self.flow_scale))?;
        let action = argmax(&q);
        Ok(Decision {
            suggested: action,
            accepted: ask(action),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleSuggestion {
    SelfService,
    Hotline,
    DrainageOffer,
}

/// Chance of a drainage offer once self-service was declined: `min(1, q / q_sat)`.
pub fn drainage_offer_probability(hotline_queue_len: i64, q_sat: f64) -> f64 {
    if hotline_queue_len <= 0 {
        0.0
    } else {
        (hotline_queue_len as f64 / q_sat).min(1.0)
    }
}

/// Legacy router: self-service is always offered first. A customer who
/// declines goes to the hotline, except that while a hotline queue exists a
/// random subset (growing with the queue) is offered the app channel.
pub fn rule_based_route<R: Rng + ?Sized>(
    hotline_queue_len: i64,
    self_service_accepted: bool,
    q_sat: f64,
    rng: &mut R,
) -> RuleSuggestion {
    if self_service_accepted {
        return RuleSuggestion::SelfService;
    }
    let p = drainage_offer_probability(hotline_queue_len, q_sat);
    if p > 0.0 && rng.random::<f64>() < p {
        RuleSuggestion::DrainageOffer
    } else {
        RuleSuggestion::Hotline
    }
}

pub const DEFAULT_Q_SAT: f64 = 50.0;

pub struct RuleBasedRouter {
    pub q_sat: f64,
    rng: LabRng,
}

impl RuleBasedRouter {
    pub fn new(q_sat: f64, rng: LabRng) -> Self {
        RuleBasedRouter { q_sat, rng }
    }
}

impl Router for RuleBasedRouter {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision> {
        let cfg = ctx.config;
        let self_ok = ask(cfg.self_service_index);
        let queue = ctx.state.queue_len(cfg.bottleneck_index);
        Ok(match rule_based_route(queue, self_ok, self.q_sat, &mut self.rng) {
            RuleSuggestion::SelfService => Decision {
                suggested: cfg.self_service_index,
                accepted: true,
            },
            RuleSuggestion::Hotline => Decision {
                suggested: cfg.self_service_index,
                accepted: false,
            },
            RuleSuggestion::DrainageOffer => Decision {
                suggested: cfg.drainage_index,
                accepted: ask(cfg.drainage_index),
            },
        })
    }
}

/// Expected immediate reward of suggesting `action`: accepted with the
/// believed probability, otherwise bounced to the bottleneck.
pub fn expected_immediate_reward(
    action: usize,
    acceptance: &[f64],
    capacity: &[i64],
    forecast: &[f64],
    bottleneck: usize,
    params: &RewardParams,
) -> Result<f64> {
    let u = if action == bottleneck { 1.0 } else { acceptance[action] };
    let mut cap = capacity.to_vec();
    cap[action] -= 1;
    let accept = compute_reward(params.g(true), &cap, forecast, params)?;
    let mut cap = capacity.to_vec();
    cap[bottleneck] -= 1;
    let reject = compute_reward(params.g(false), &cap, forecast, params)?;
    Ok(u * accept + (1.0 - u) * reject)
}

fn immediate_objective(ctx: &RouteContext<'_>, params: &RewardParams) -> Result<Vec<f64>> {
    (0..ctx.config.n())
        .map(|a| {
            expected_immediate_reward(
                a,
                &ctx.observation.acceptance,
                &ctx.state.capacity,
                &ctx.observation.forecast,
                ctx.config.bottleneck_index,
                params,
            )
        })
        .collect()
}

/// Picks the action with the best expected immediate reward.
pub struct GreedyRouter {
    pub params: RewardParams,
}

impl Router for GreedyRouter {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision> {
        let action = argmax(&immediate_objective(ctx, &self.params)?);
        Ok(Decision {
            suggested: action,
            accepted: ask(action),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealParams {
    pub t0: f64,
    pub ratio: f64,
    pub steps: usize,
    pub restarts: usize,
}

impl Default for AnnealParams {
    fn default() -> Self {
        AnnealParams {
            t0: 1.0,
            ratio: 0.95,
            steps: 50,
            restarts: 2,
        }
    }
}

/// Simulated annealing over actions with geometric cooling; returns the best
/// action visited (lowest index among equals).
pub fn anneal_action<R: Rng + ?Sized>(objective: &[f64], params: &AnnealParams, rng: &mut R) -> usize {
    let n = objective.len();
    let mut visited = vec![false; n];
    for _ in 0..params.restarts.max(1) {
        let mut current = rng.random_range(0..n);
        visited[current] = true;
        let mut temp = params.t0;
        for _ in 0..params.steps {
            if n > 1 {
                let mut cand = rng.random_range(0..n - 1);
                if cand >= current {
                    cand += 1;
                }
                let delta = objective[cand] - objective[current];
                let take = delta >= 0.0 || (temp > 0.0 && rng.random::<f64>() < (delta / temp).exp());
                if take {
                    current = cand;
                    visited[current] = true;
                }
            }
            temp *= params.ratio;
        }
    }
    let mut best: Option<usize> = None;
    for a in (0..n).filter(|&a| visited[a]) {
        if best.is_none_or(|b| objective[a] > objective[b]) {
            best = Some(a);
        }
    }
    best.expect("at least one action visited")
}

pub struct AnnealRouter {
    pub params: RewardParams,
    pub anneal: AnnealParams,
    rng: LabRng,
}

impl AnnealRouter {
    pub fn new(params: RewardParams, anneal: AnnealParams, rng: LabRng) -> Self {
        AnnealRouter { params, anneal, rng }
    }
}

impl Router for AnnealRouter {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision> {
        let objective = immediate_objective(ctx, &self.params)?;
        let action = anneal_action(&objective, &self.anneal, &mut self.rng);
        Ok(Decision {
            suggested: action,
            accepted: ask(action),
        })
    }
}

/// Majority channel among the `k` nearest logged profiles (Euclidean on
/// cardinality-scaled attributes; ties go to the lowest channel).
pub struct KnnRouter {
    k: usize,
    n: usize,
    cardinalities: [u32; PROFILE_LEN],
    log: Vec<([f64; PROFILE_LEN], usize)>,
    memo: HashMap<CustomerProfile, usize>,
}

impl KnnRouter {
    pub const DEFAULT_K: usize = 15;

    pub fn new(k: usize, n: usize, cardinalities: [u32; PROFILE_LEN]) -> Self {
        KnnRouter {
            k: k.max(1),
            n,
            cardinalities,
            log: Vec::new(),
            memo: HashMap::new(),
        }
    }

    /// Adds labeled examples: each profile with the channel that customer accepted.
    pub fn fit(&mut self, examples: impl IntoIterator<Item = (CustomerProfile, usize)>) {
        for (p, ch) in examples {
            self.log.push((p.scaled(&self.cardinalities), ch));
        }
        self.memo.clear();
    }

    pub fn predict(&mut self, profile: &CustomerProfile) -> Result<usize> {
        ensure!(!self.log.is_empty(), NotReady, "knn baseline has no labeled log");
        if let Some(&ch) = self.memo.get(profile) {
            return Ok(ch);
        }
        let q = profile.scaled(&self.cardinalities);
        let mut dists: Vec<(f64, usize)> = self
            .log
            .iter()
            .map(|(x, ch)| {
                let d: f64 = x.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, *ch)
            })
            .collect();
        let k = self.k.min(dists.len());
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        let mut votes = vec![0usize; self.n];
        for &(_, ch) in &dists[..k] {
            votes[ch] += 1;
        }
        let mut best = 0;
        for (ch, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = ch;
            }
        }
        self.memo.insert(*profile, best);
        Ok(best)
    }
}

impl Router for KnnRouter {
    fn route(&mut self, ctx: &RouteContext<'_>, ask: &mut dyn FnMut(usize) -> bool) -> Result<Decision> {
        let action = self.predict(ctx.profile)?;
        Ok(Decision {
            suggested: action,
            accepted: ask(action),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub reward: RewardParams,
    pub done_num: i64,
    /// Reset capacities when the terminal threshold is crossed.
    pub reset_on_terminal: bool,
}

/// Runs a router over a stream and records one trace row per arrival.
pub fn simulate(
    router: &mut dyn Router,
    config: &ChannelConfig,
    data: RoutingData<'_>,
    params: &SimulationParams,
    accept_rng: &mut LabRng,
) -> Result<Vec<TraceRecord>> {
    simulate_logged(router, config, data, params, accept_rng, None)
}

/// [`simulate`] that also appends every non-bottleneck offer and its answer to `offers`.
pub fn simulate_logged(
    router: &mut dyn Router,
    config: &ChannelConfig,
    data: RoutingData<'_>,
    params: &SimulationParams,
    accept_rng: &mut LabRng,
    mut offers: Option<&mut Vec<OfferRecord>>,
) -> Result<Vec<TraceRecord>> {
    data.validate(config)?;
    let Some(first) = data.events.first() else {
        return Err(Error::Input("empty evaluation stream".into()));
    };
    let bottleneck = config.bottleneck_index;
    let mut state = EnvState::reset(config, first.arrival_time);
    let mut trace = Vec::with_capacity(data.events.len());
    for (t, event) in data.events.iter().enumerate() {
        state.process_completions(event.arrival_time);
        let forecast = data.forecast.at(event.arrival_time);
        let observation = observe(&state, &data.belief[t], &forecast, config)?;
        let truth = &data.truth[t];
        let profile = event.profile;
        let mut ask = |ch: usize| {
            if ch == bottleneck {
                return true;
            }
            let accepted = sample_acceptance(truth, ch, accept_rng);
            if let Some(log) = offers.as_deref_mut() {
                log.push(OfferRecord {
                    profile,
                    channel: ch,
                    accepted,
                });
            }
            accepted
        };
        let ctx = RouteContext {
            config,
            state: &state,
            observation: &observation,
            profile: &event.profile,
        };
        let decision = router.route(&ctx, &mut ask)?;
        ensure!(
            decision.suggested < config.n(),
            Contract,
            "router suggested channel {}",
            decision.suggested
        );
        let accepted = decision.accepted || decision.suggested == bottleneck;
        let final_channel = if accepted { decision.suggested } else { bottleneck };
        let g = params.reward.g(accepted);
        state.assign(event, final_channel)?;
        let reward = compute_reward(g, &state.capacity, &forecast, &params.reward)?;
        let terminal = is_terminal(&state.capacity, params.done_num);
        trace.push(TraceRecord {
            step: t as u64,
            time: event.arrival_time,
            suggested_channel: decision.suggested,
            final_channel,
            accepted,
            g,
            reward,
            capacities: state.capacity.clone(),
            terminal,
        });
        if terminal && params.reset_on_terminal {
            state = EnvState::reset(config, event.arrival_time);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Head};
    use crate::rng::seeded;

    fn const_net(values: &[f64], input: usize) -> QNetwork {
        QNetwork::from_parts(
            vec![],
            Head::Linear {
                layer: Dense {
                    inputs: input,
                    outputs: values.len(),
                    weights: vec![0.0; input * values.len()],
                    bias: values.to_vec(),
                },
            },
        )
        .unwrap()
    }

    fn sv(n: usize) -> StateVector {
        StateVector {
            acceptance: vec![1.0; n],
            forecast: vec![0.0; n],
            capacity_scaled: vec![1.0; n],
        }
    }

    fn transition(reward: f64, terminal: bool) -> Transition {
        Transition {
            state: sv(2),
            action: 0,
            reward,
            next_state: sv(2),
            terminal,
        }
    }

    #[test]
    fn argmax_and_ties() {
        let mut rng = seeded(0);
        assert_eq!(select_action(&[1.0, 3.0, 2.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(select_action(&[2.0, 2.0], 0.0, &mut rng).unwrap(), 0);
        assert!(select_action(&[], 0.0, &mut rng).is_err());
        assert!(select_action(&[1.0], 1.5, &mut rng).is_err());
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = seeded(1);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[select_action(&[5.0, 0.0, 0.0], 1.0, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn td_targets() {
        let online = const_net(&[1.0, 5.0], 6);
        let target = const_net(&[10.0, 2.0], 6);
        let t = transition(-5.0, true);
        assert_eq!(td_target(Variant::Double, &t, &online, &target, 0.5, 1.0).unwrap(), -5.0);
        let t = transition(1.0, false);
        assert_eq!(td_target(Variant::Double, &t, &online, &target, 0.5, 1.0).unwrap(), 2.0);
        assert_eq!(td_target(Variant::Dqn, &t, &online, &target, 0.5, 1.0).unwrap(), 6.0);
        for v in Variant::ALL {
            assert_eq!(td_target(v, &t, &online, &target, 0.0, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn double_and_vanilla_agree_on_shared_network() {
        let mut rng = seeded(2);
        let net = QNetwork::new(6, &[5], 2, true, &mut rng);
        let mut t = transition(0.3, false);
        t.next_state.capacity_scaled = vec![0.2, -0.7];
        let a = td_target(Variant::Dqn, &t, &net, &net, 0.9, 1.0).unwrap();
        let b = td_target(Variant::Double, &t, &net, &net, 0.9, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(2500) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(5000), 0.05);
        assert_eq!(s.value(50_000), 0.05);
    }

    #[test]
    fn names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("ddqn".parse::<Variant>().is_err());
        assert!("none".parse::<Ablation>().is_err());
    }

    #[test]
    fn tuned_defaults() {
        let (r, g) = Variant::PerDoubleDueling.default_hyperparameters(Ablation::Full);
        assert_eq!((r.lambda1, r.lambda2, r.lambda3, g), (0.9, 0.015, 0.3, 0.5));
        let (r, g) = Variant::PerDoubleDueling.default_hyperparameters(Ablation::NoForecast);
        assert_eq!((r.lambda1, r.lambda2, g), (0.8, 0.02, 0.3));
        let (r, g) = Variant::Dqn.default_hyperparameters(Ablation::Full);
        assert_eq!((r.lambda1, g), (0.8, 0.7));
        let (r, _) = Variant::Double.default_hyperparameters(Ablation::Full);
        assert_eq!(r.lambda2, 0.02);
    }

    #[test]
    fn ablations_zero_slots() {
        let s = StateVector {
            acceptance: vec![0.4, 0.6, 1.0],
            forecast: vec![10.0, 20.0, 30.0],
            capacity_scaled: vec![1.0, 0.5, -0.2],
        };
        let e = Ablation::NoForecast.apply(s.clone(), 2);
        assert_eq!(e.forecast, vec![0.0; 3]);
        assert_eq!(e.acceptance, s.acceptance);
        let u = Ablation::NoUser.apply(s.clone(), 2);
        assert_eq!(u.acceptance, vec![0.0, 0.0, 1.0]);
        assert_eq!(Ablation::NoTerminal.apply(s.clone(), 2), s);
    }

    #[test]
    fn rule_based_examples() {
        let mut rng = seeded(3);
        assert_eq!(rule_based_route(0, false, 50.0, &mut rng), RuleSuggestion::Hotline);
        for _ in 0..100 {
            assert_eq!(rule_based_route(50, false, 50.0, &mut rng), RuleSuggestion::DrainageOffer);
            assert_eq!(rule_based_route(80, true, 50.0, &mut rng), RuleSuggestion::SelfService);
        }
        let offers = (0..10_000)
            .filter(|_| rule_based_route(10, false, 50.0, &mut rng) == RuleSuggestion::DrainageOffer)
            .count();
        assert!((offers as f64 / 10_000.0 - 0.2).abs() < 0.02);
    }

    #[test]
    fn greedy_avoids_congested_channel() {
        let cfg = ChannelConfig::new(vec![5, 5], 0, 1, 1).unwrap();
        let mut state = EnvState::reset(&cfg, 0);
        state.capacity = vec![-3, 5];
        let obs = StateVector {
            acceptance: vec![1.0, 1.0],
            forecast: vec![0.0, 0.0],
            capacity_scaled: vec![-0.6, 1.0],
        };
        let profile = CustomerProfile([0; PROFILE_LEN]);
        let ctx = RouteContext {
            config: &cfg,
            state: &state,
            observation: &obs,
            profile: &profile,
        };
        let mut router = GreedyRouter {
            params: RewardParams::default(),
        };
        let d = router.route(&ctx, &mut |_| true).unwrap();
        assert_eq!(d.suggested, 1);
    }

    #[test]
    fn cold_annealing_matches_greedy() {
        let mut rng = seeded(4);
        let params = AnnealParams {
            t0: 1e-12,
            ..AnnealParams::default()
        };
        for _ in 0..200 {
            let obj: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(anneal_action(&obj, &params, &mut rng), argmax(&obj));
        }
        let tied = [1.0, 3.0, 3.0];
        assert_eq!(anneal_action(&tied, &params, &mut rng), 1);
    }

    #[test]
    fn knn_identity_and_not_ready() {
        let cards = [2, 8, 34, 5, 2, 6, 8];
        let mut knn = KnnRouter::new(1, 3, cards);
        let p = CustomerProfile([1, 3, 20, 2, 1, 4, 6]);
        assert!(matches!(knn.predict(&p), Err(Error::NotReady(_))));
        knn.fit([
            (CustomerProfile([0, 0, 0, 0, 0, 0, 0]), 2),
            (p, 1),
            (CustomerProfile([1, 7, 33, 4, 1, 5, 7]), 0),
        ]);
        assert_eq!(knn.predict(&p).unwrap(), 1);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        let cfg = ChannelConfig::new(vec![50, 50, 10], 2, 0, 1).unwrap();
        let config = AgentConfig {
            hidden: vec![4],
            batch_size: 4,
            buffer_size: 8,
            ..AgentConfig::default()
        };
        let agent = Agent::new(config, 3, seeded(5)).unwrap();
        let ck = agent.checkpoint(&cfg);
        ck.save(&path).unwrap();
        assert_eq!(AgentCheckpoint::load(&path, &cfg).unwrap(), ck);
        let two = ChannelConfig::new(vec![50, 10], 1, 0, 0).unwrap();
        assert!(matches!(AgentCheckpoint::load(&path, &two), Err(Error::Checkpoint(_))));
    }
}
