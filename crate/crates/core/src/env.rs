//! Multi-channel routing environment.
//!
//! Capacities are plain counters: assigning a customer to a channel takes one
//! unit, a completed service gives it back. A negative capacity is a queue of
//! that length. Completion is scheduled at assignment time plus service
//! duration whether or not the customer had to queue.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Number of integer-coded customer attributes.
pub const PROFILE_LEN: usize = 7;

/// Default early-termination threshold: a queue of 100 on any channel.
pub const DEFAULT_DONE_NUM: i64 = -100;

pub type Seconds = i64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub initial_capacity: Vec<i64>,
    pub bottleneck_index: usize,
    pub self_service_index: usize,
    pub drainage_index: usize,
}

impl ChannelConfig {
    pub fn new(
        initial_capacity: Vec<i64>,
        bottleneck_index: usize,
        self_service_index: usize,
        drainage_index: usize,
    ) -> Result<Self> {
        let config = ChannelConfig {
            initial_capacity,
            bottleneck_index,
            self_service_index,
            drainage_index,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        ensure!(n >= 2, Config, "need at least 2 channels, got {n}");
        let roles = [
            self.bottleneck_index,
            self.self_service_index,
            self.drainage_index,
        ];
        for &r in &roles {
            ensure!(r < n, Config, "channel role index {r} out of range for {n} channels");
        }
        ensure!(
            roles[0] != roles[1] && roles[0] != roles[2],
            Config,
            "the bottleneck channel cannot double as self-service or drainage"
        );
        // Two-channel setups have a single alternative serving both roles.
        ensure!(
            roles[1] != roles[2] || n == 2,
            Config,
            "self-service and drainage indices must differ when n > 2"
        );
        ensure!(
            self.initial_capacity.iter().all(|&c| c >= 0),
            Config,
            "initial capacities must be non-negative"
        );
        ensure!(
            self.initial_capacity[self.bottleneck_index] > 0,
            Config,
            "bottleneck channel needs positive capacity"
        );
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.initial_capacity.len()
    }
}

/// Seven integer-coded attributes: gender, age, residential province,
/// household, car, assets, credit limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct CustomerProfile(pub [u32; PROFILE_LEN]);

impl CustomerProfile {
    pub fn attributes(&self) -> &[u32; PROFILE_LEN] {
        &self.0
    }

    pub fn validate(&self, cardinalities: &[u32; PROFILE_LEN]) -> Result<()> {
        for (j, (&v, &card)) in self.0.iter().zip(cardinalities).enumerate() {
            ensure!(
                v < card,
                Input,
                "attribute {j} = {v} outside its range [0, {card})"
            );
        }
        Ok(())
    }

    /// Attributes embedded as reals in [0, 1) by dividing by each cardinality.
    pub fn scaled(&self, cardinalities: &[u32; PROFILE_LEN]) -> [f64; PROFILE_LEN] {
        let mut out = [0.0; PROFILE_LEN];
        for j in 0..PROFILE_LEN {
            out[j] = f64::from(self.0[j]) / f64::from(cardinalities[j].max(1));
        }
        out
    }
}

impl TryFrom<Vec<u32>> for CustomerProfile {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        let arr: [u32; PROFILE_LEN] = v.try_into().map_err(|v: Vec<u32>| {
            Error::Contract(format!(
                "profile needs exactly {PROFILE_LEN} attributes, got {}",
                v.len()
            ))
        })?;
        Ok(CustomerProfile(arr))
    }
}

impl From<CustomerProfile> for Vec<u32> {
    fn from(p: CustomerProfile) -> Self {
        p.0.to_vec()
    }
}

/// One customer request; serialized as a JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEvent {
    pub arrival_time: Seconds,
    pub customer_id: String,
    #[serde(rename = "attributes")]
    pub profile: CustomerProfile,
    pub service_duration: Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default = "default_accept_reward")]
    pub accept_reward: f64,
    #[serde(default = "default_reject_reward")]
    pub reject_reward: f64,
}

fn default_accept_reward() -> f64 {
    1.0
}

fn default_reject_reward() -> f64 {
    -1.0
}

impl RewardParams {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        RewardParams {
            lambda1,
            lambda2,
            lambda3,
            accept_reward: 1.0,
            reject_reward: -1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0,
            Config,
            "reward lambdas must be non-negative"
        );
        ensure!(
            self.lambda1 >= self.lambda2,
            Config,
            "lambda1 ({}) must dominate lambda2 ({})",
            self.lambda1,
            self.lambda2
        );
        ensure!(
            self.lambda3 > 0.0 && self.lambda3 <= 1.0,
            Config,
            "lambda3 must lie in (0, 1], got {}",
            self.lambda3
        );
        Ok(())
    }

    /// Customer-side reward for an accepted or rejected suggestion.
    pub fn g(&self, accepted: bool) -> f64 {
        if accepted {
            self.accept_reward
        } else {
            self.reject_reward
        }
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams::new(0.9, 0.015, 0.3)
    }
}

/// Per-channel margins `capacity_i - lambda3 * forecast_i`.
pub fn capacity_margins(capacity: &[i64], forecast_next: &[f64], lambda3: f64) -> Result<Vec<f64>> {
    ensure!(
        capacity.len() == forecast_next.len(),
        Contract,
        "capacity has {} channels but forecast has {}",
        capacity.len(),
        forecast_next.len()
    );
    ensure!(!capacity.is_empty(), Contract, "no channels");
    Ok(capacity
        .iter()
        .zip(forecast_next)
        .map(|(&c, &f)| c as f64 - lambda3 * f)
        .collect())
}

/// Congestion magnitude `max(0, -min_i(capacity_i - lambda3 * forecast_i))`.
pub fn congestion_magnitude(capacity: &[i64], forecast_next: &[f64], lambda3: f64) -> Result<f64> {
    let m = capacity_margins(capacity, forecast_next, lambda3)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok((-m).max(0.0))
}

/// `g - lambda1 * x - lambda2 * x^2` for a congestion magnitude `x`.
pub fn reward_from_congestion(g: f64, x: f64, params: &RewardParams) -> f64 {
    g - params.lambda1 * x - params.lambda2 * x * x
}

/// Immediate reward after an assignment, from post-assignment capacities and
/// the next-window flow forecast.
pub fn compute_reward(
    g: f64,
    capacity: &[i64],
    forecast_next: &[f64],
    params: &RewardParams,
) -> Result<f64> {
    let x = congestion_magnitude(capacity, forecast_next, params.lambda3)?;
    Ok(reward_from_congestion(g, x, params))
}

pub fn is_terminal(capacity: &[i64], done_num: i64) -> bool {
    capacity.iter().copied().min().is_some_and(|m| m < done_num)
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub capacity: Vec<i64>,
    pub clock: Seconds,
    in_flight: BinaryHeap<Reverse<(Seconds, usize)>>,
    pub episode_step: u64,
}

impl EnvState {
    pub fn reset(config: &ChannelConfig, clock: Seconds) -> Self {
        EnvState {
            capacity: config.initial_capacity.clone(),
            clock,
            in_flight: BinaryHeap::new(),
            episode_step: 0,
        }
    }

    /// Releases every service finishing at or before `now` and advances the clock.
    pub fn process_completions(&mut self, now: Seconds) {
        while let Some(&Reverse((finish, channel))) = self.in_flight.peek() {
            if finish > now {
                break;
            }
            self.in_flight.pop();
            self.capacity[channel] += 1;
        }
        self.clock = self.clock.max(now);
    }

    pub fn assign(&mut self, event: &RequestEvent, final_channel: usize) -> Result<()> {
        ensure!(
            final_channel < self.capacity.len(),
            Contract,
            "channel {final_channel} out of range for {} channels",
            self.capacity.len()
        );
        ensure!(
            event.service_duration > 0,
            Contract,
            "service duration must be positive"
        );
        self.capacity[final_channel] -= 1;
        self.in_flight
            .push(Reverse((event.arrival_time + event.service_duration, final_channel)));
        self.episode_step += 1;
        Ok(())
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn in_flight_on(&self, channel: usize) -> usize {
        self.in_flight
            .iter()
            .filter(|Reverse((_, ch))| *ch == channel)
            .count()
    }

    /// Per-channel in-flight counts in one pass.
    pub fn in_flight_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.capacity.len()];
        for Reverse((_, ch)) in &self.in_flight {
            counts[*ch] += 1;
        }
        counts
    }

    pub fn queue_len(&self, channel: usize) -> i64 {
        (-self.capacity[channel]).max(0)
    }
}

/// Observation fed to routing policies: acceptance probabilities `u`, flow
/// forecast and capacities scaled by their initial values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub acceptance: Vec<f64>,
    pub forecast: Vec<f64>,
    pub capacity_scaled: Vec<f64>,
}

impl StateVector {
    pub fn n(&self) -> usize {
        self.acceptance.len()
    }

    /// `[u, forecast, capacity]` flattened, forecast divided by `flow_scale`.
    pub fn features(&self, flow_scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.n());
        out.extend_from_slice(&self.acceptance);
        out.extend(self.forecast.iter().map(|f| f / flow_scale));
        out.extend_from_slice(&self.capacity_scaled);
        out
    }
}

pub fn observe(
    state: &EnvState,
    acceptance: &[f64],
    forecast: &[f64],
    config: &ChannelConfig,
) -> Result<StateVector> {
    let n = config.n();
    ensure!(
        acceptance.len() == n && forecast.len() == n && state.capacity.len() == n,
        Contract,
        "observation inputs must all have {n} channels"
    );
    let mut capacity_scaled = Vec::with_capacity(n);
    for (i, (&c, &c0)) in state
        .capacity
        .iter()
        .zip(&config.initial_capacity)
        .enumerate()
    {
        ensure!(c0 != 0, Config, "channel {i} has zero initial capacity");
        capacity_scaled.push(c as f64 / c0 as f64);
    }
    let mut acceptance = acceptance.to_vec();
    acceptance[config.bottleneck_index] = 1.0;
    Ok(StateVector {
        acceptance,
        forecast: forecast.to_vec(),
        capacity_scaled,
    })
}

pub fn read_events(path: &Path) -> Result<Vec<RequestEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: RequestEvent =
            serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        ensure!(
            event.service_duration > 0,
            Input,
            "{}:{}: service_duration must be positive",
            path.display(),
            lineno + 1
        );
        if let Some(prev) = events.last() {
            let prev: &RequestEvent = prev;
            ensure!(
                prev.arrival_time <= event.arrival_time,
                Input,
                "{}:{}: events out of time order",
                path.display(),
                lineno + 1
            );
        }
        events.push(event);
    }
    Ok(events)
}

pub fn write_events(path: &Path, events: &[RequestEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for event in events {
        serde_json::to_writer(&mut w, event).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
