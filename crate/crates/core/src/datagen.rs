//! Synthetic datasets: seasonal arrival streams, correlated customer profiles,
//! a seeded ground-truth acceptance network and noisy per-channel flow data.
//!
//! Per-channel flows are the arrival counts each channel receives under the
//! legacy rule-based router, binned at the forecast resolution.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{simulate_logged, RoutingData, RuleBasedRouter, SimulationParams};
use crate::env::{
    read_events, write_events, ChannelConfig, CustomerProfile, RequestEvent, RewardParams, Seconds,
    DEFAULT_DONE_NUM, PROFILE_LEN,
};
use crate::error::{ensure, Error, Result};
use crate::forecast::{
    binize_times, noisy_oracle_forecast, read_series_csv, write_series_csv, BinnedSeries,
    FlowForecast, DEFAULT_BIN_WIDTH,
};
use crate::rng::{self, substream};
use crate::user_model::{AcceptanceModel, OfferRecord};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const MODEL_FILE: &str = "user_model.json";
pub const TOTAL_FLOW_FILE: &str = "flow_total.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn true_flow_file(channel: usize) -> String {
    format!("flow_true_{channel}.csv")
}

pub fn forecast_flow_file(channel: usize) -> String {
    format!("flow_forecast_{channel}.csv")
}

/// Hourly rate multipliers with a late-morning and an evening peak, mean 1.
pub fn default_peak_profile() -> Vec<f64> {
    let bump = |h: f64, center: f64| (-(h - center).powi(2) / (2.0 * 1.6 * 1.6)).exp();
    let raw: Vec<f64> = (0..24)
        .map(|h| {
            let mid = h as f64 + 0.5;
            0.2 + bump(mid, 11.0) + 0.85 * bump(mid, 20.0)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / 24.0;
    raw.iter().map(|v| (v / mean * 1e4).round() / 1e4).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub days: u32,
    /// Mean arrivals per hour before seasonal scaling.
    pub base_rate: f64,
    pub peak_profile: Vec<f64>,
    pub n_customers: usize,
    pub attribute_cardinalities: [u32; PROFILE_LEN],
    /// Inclusive service-duration bounds in seconds.
    pub duration_range: [Seconds; 2],
    pub noise_sigma: f64,
    pub start_time: Seconds,
    pub bin_width: Seconds,
    /// Events held out at the end of the stream for evaluation.
    pub test_events: usize,
    /// Legacy router saturation queue used to derive channel flows.
    pub q_sat: f64,
    pub model_hidden: Vec<usize>,
    /// Spread (standard deviation over arrivals) of the ground-truth logits.
    pub logit_scale: f64,
    /// Per-channel logit shift of the ground-truth model; empty means zeros.
    pub logit_bias: Vec<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            days: 10,
            base_rate: 7000.0 / 24.0,
            peak_profile: default_peak_profile(),
            n_customers: 5000,
            attribute_cardinalities: [2, 8, 34, 5, 2, 6, 8],
            duration_range: [60, 360],
            noise_sigma: 5.0,
            start_time: 0,
            bin_width: DEFAULT_BIN_WIDTH,
            test_events: 50_000,
            q_sat: 50.0,
            model_hidden: vec![16, 16],
            logit_scale: 3.0,
            logit_bias: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.days > 0, Config, "days must be positive");
        ensure!(
            self.base_rate > 0.0 && self.base_rate.is_finite(),
            Config,
            "base rate must be positive"
        );
        ensure!(
            self.peak_profile.len() == 24,
            Config,
            "peak profile needs 24 hourly multipliers, got {}",
            self.peak_profile.len()
        );
        ensure!(
            self.peak_profile.iter().all(|m| *m > 0.0 && m.is_finite()),
            Config,
            "peak multipliers must be positive"
        );
        let [lo, hi] = self.duration_range;
        ensure!(
            lo > 0 && lo < hi,
            Config,
            "duration range must satisfy 0 < min < max, got [{lo}, {hi}]"
        );
        ensure!(self.n_customers > 0, Config, "n_customers must be positive");
        ensure!(
            self.attribute_cardinalities.iter().all(|&c| c > 0),
            Config,
            "attribute cardinalities must be positive"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise sigma must be >= 0"
        );
        ensure!(self.bin_width > 0, Config, "bin width must be positive");
        ensure!(self.q_sat > 0.0, Config, "q_sat must be positive");
        ensure!(
            self.logit_scale >= 0.0 && self.logit_scale.is_finite(),
            Config,
            "logit scale must be >= 0"
        );
        Ok(())
    }

    fn logit_bias_for(&self, n: usize) -> Result<Vec<f64>> {
        if self.logit_bias.is_empty() {
            return Ok(vec![0.0; n]);
        }
        ensure!(
            self.logit_bias.len() == n,
            Config,
            "logit bias has {} entries for {n} channels",
            self.logit_bias.len()
        );
        Ok(self.logit_bias.clone())
    }
}

/// Continuous arrival times (seconds from `start_time`) of a Poisson process
/// whose rate is piecewise constant per hour of day.
pub fn gen_arrival_times<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Vec<f64> {
    let mut times = Vec::new();
    for hour in 0..config.days as usize * 24 {
        let rate = config.base_rate * config.peak_profile[hour % 24] / 3600.0;
        let start = hour as f64 * 3600.0;
        let end = start + 3600.0;
        let mut t = start;
        loop {
            let gap: f64 = rng.sample(Exp1);
            t += gap / rate;
            if t >= end {
                break;
            }
            times.push(t);
        }
    }
    times
}

/// Chain-conditional attribute sampler: attribute 0 from a categorical and
/// attribute `j` from a row of a conditional table indexed by attribute `j-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSampler {
    first: Vec<f64>,
    /// `tables[j-1][prev][value]` for attributes 1..7.
    tables: Vec<Vec<Vec<f64>>>,
    first_index: WeightedIndex<f64>,
    table_index: Vec<Vec<WeightedIndex<f64>>>,
}

fn dirichlet_row<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

impl ProfileSampler {
    pub fn random<R: Rng + ?Sized>(cardinalities: &[u32; PROFILE_LEN], rng: &mut R) -> Self {
        let first = dirichlet_row(cardinalities[0] as usize, rng);
        let tables: Vec<Vec<Vec<f64>>> = (1..PROFILE_LEN)
            .map(|j| {
                (0..cardinalities[j - 1])
                    .map(|_| dirichlet_row(cardinalities[j] as usize, rng))
                    .collect()
            })
            .collect();
        let first_index = WeightedIndex::new(&first).expect("positive weights");
        let table_index = tables
            .iter()
            .map(|t| {
                t.iter()
                    .map(|row| WeightedIndex::new(row).expect("positive weights"))
                    .collect()
            })
            .collect();
        ProfileSampler {
            first,
            tables,
            first_index,
            table_index,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CustomerProfile {
        let mut attrs = [0u32; PROFILE_LEN];
        attrs[0] = self.first_index.sample(rng) as u32;
        for j in 1..PROFILE_LEN {
            let prev = attrs[j - 1] as usize;
            attrs[j] = self.table_index[j - 1][prev].sample(rng) as u32;
        }
        CustomerProfile(attrs)
    }

    /// Exact marginal distribution of every attribute.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.first.clone()];
        for table in &self.tables {
            let prev = out.last().expect("non-empty");
            let width = table[0].len();
            let mut next = vec![0.0; width];
            for (p, row) in prev.iter().zip(table) {
                for (acc, q) in next.iter_mut().zip(row) {
                    *acc += p * q;
                }
            }
            out.push(next);
        }
        out
    }
}

pub fn gen_profiles<R: Rng + ?Sized>(
    count: usize,
    cardinalities: &[u32; PROFILE_LEN],
    rng: &mut R,
) -> Vec<CustomerProfile> {
    let sampler = ProfileSampler::random(cardinalities, rng);
    (0..count).map(|_| sampler.sample(rng)).collect()
}

/// Arrival stream: seasonal Poisson times, customers drawn uniformly from a
/// profile pool of `n_customers`, uniform integer service durations.
pub fn gen_arrivals<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<Vec<RequestEvent>> {
    config.validate()?;
    let pool = gen_profiles(config.n_customers, &config.attribute_cardinalities, rng);
    let times = gen_arrival_times(config, rng);
    let [lo, hi] = config.duration_range;
    let width = (config.n_customers - 1).to_string().len();
    Ok(times
        .into_iter()
        .map(|t| {
            let c = rng.random_range(0..pool.len());
            RequestEvent {
                arrival_time: config.start_time + t.floor() as Seconds,
                customer_id: format!("c{c:0width$}"),
                profile: pool[c],
                service_duration: rng.random_range(lo..=hi),
            }
        })
        .collect())
}

/// Index of the first held-out event: the last `test_events` when the stream
/// is longer than that, otherwise a chronological 80/20 split.
pub fn split_point(len: usize, test_events: usize) -> usize {
    if test_events > 0 && len > test_events {
        len - test_events
    } else {
        len * 4 / 5
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<RequestEvent>,
    pub model: AcceptanceModel,
    pub true_flows: Vec<BinnedSeries>,
    pub forecast_flows: Vec<BinnedSeries>,
    pub total_flow: BinnedSeries,
}

impl Dataset {
    pub fn forecast(&self) -> FlowForecast {
        FlowForecast {
            start_time: self.total_flow.start_time,
            bin_width: self.total_flow.bin_width,
            channels: self.forecast_flows.iter().map(|s| s.counts.clone()).collect(),
        }
    }

    /// Legacy-router offer log over `events[range]`, used to fit user models
    /// and label the nearest-neighbour baseline.
    pub fn legacy_log(
        &self,
        channels: &ChannelConfig,
        range: std::ops::Range<usize>,
        q_sat: f64,
        seed: u64,
    ) -> Result<(Vec<OfferRecord>, Vec<(CustomerProfile, usize)>)> {
        let events = &self.events[range];
        let truth = crate::agents::acceptance_table(&self.model, events);
        let forecast = FlowForecast::zeros(channels.n());
        let data = RoutingData {
            events,
            truth: &truth,
            belief: &truth,
            forecast: &forecast,
        };
        let mut offers = Vec::new();
        let trace = run_legacy(channels, data, q_sat, seed, Some(&mut offers))?;
        let labels = events
            .iter()
            .zip(&trace)
            .filter(|(_, r)| r.accepted)
            .map(|(e, r)| (e.profile, r.final_channel))
            .collect();
        Ok((offers, labels))
    }
}

fn run_legacy(
    channels: &ChannelConfig,
    data: RoutingData<'_>,
    q_sat: f64,
    seed: u64,
    offers: Option<&mut Vec<OfferRecord>>,
) -> Result<Vec<crate::metrics::TraceRecord>> {
    let mut router = RuleBasedRouter::new(q_sat, substream(seed, "datagen.legacy.router"));
    let mut accept_rng = substream(seed, "datagen.legacy.acceptance");
    let params = SimulationParams {
        reward: RewardParams::default(),
        done_num: DEFAULT_DONE_NUM,
        reset_on_terminal: false,
    };
    simulate_logged(&mut router, channels, data, &params, &mut accept_rng, offers)
}

/// Builds a full synthetic dataset in memory from the root seed.
pub fn generate(config: &GenConfig, channels: &ChannelConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    channels.validate()?;
    let n = channels.n();
    let mut events = gen_arrivals(config, &mut substream(seed, &format!("{}.arrivals", rng::DATAGEN)))?;
    ensure!(!events.is_empty(), Config, "generator produced no events");
    events.sort_by_key(|e| e.arrival_time);

    let mut model = AcceptanceModel::random(
        n,
        channels.bottleneck_index,
        &config.model_hidden,
        config.attribute_cardinalities,
        1.0,
        &vec![0.0; n],
        &mut substream(seed, &format!("{}.model", rng::DATAGEN)),
    )?;
    let profiles: Vec<CustomerProfile> = events.iter().map(|e| e.profile).collect();
    model.standardize_logits(&profiles, config.logit_scale, &config.logit_bias_for(n)?)?;

    let truth = crate::agents::acceptance_table(&model, &events);
    let blank = FlowForecast::zeros(n);
    let data = RoutingData {
        events: &events,
        truth: &truth,
        belief: &truth,
        forecast: &blank,
    };
    let trace = run_legacy(channels, data, config.q_sat, seed, None)?;

    let w = config.bin_width;
    let start = config.start_time.div_euclid(w) * w;
    let horizon = config.start_time + config.days as Seconds * 86_400;
    let bins = ((horizon - start + w - 1) / w) as usize;
    let all_times: Vec<Seconds> = events.iter().map(|e| e.arrival_time).collect();
    let total_flow = binize_times(&all_times, start, w, bins);
    let true_flows: Vec<BinnedSeries> = (0..n)
        .map(|ch| {
            let times: Vec<Seconds> = events
                .iter()
                .zip(&trace)
                .filter(|(_, r)| r.final_channel == ch)
                .map(|(e, _)| e.arrival_time)
                .collect();
            binize_times(&times, start, w, bins)
        })
        .collect();
    let mut noise_rng = substream(seed, &format!("{}.noise", rng::DATAGEN));
    let forecast_flows = true_flows
        .iter()
        .map(|s| {
            Ok(BinnedSeries {
                counts: noisy_oracle_forecast(&s.counts, config.noise_sigma, &mut noise_rng)?,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        events,
        model,
        true_flows,
        forecast_flows,
        total_flow,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub events: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub channels: ChannelConfig,
    pub config: GenConfig,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

pub fn manifest_entry(dir: &Path, file: &str) -> Result<ManifestEntry> {
    let (bytes, sha256) = sha256_file(&dir.join(file))?;
    Ok(ManifestEntry {
        file: file.to_string(),
        bytes,
        sha256,
    })
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every dataset file plus a checksummed manifest into `dir`.
pub fn write_dataset(
    dataset: &Dataset,
    config: &GenConfig,
    channels: &ChannelConfig,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = vec![EVENTS_FILE.to_string(), MODEL_FILE.to_string(), TOTAL_FLOW_FILE.to_string()];
    write_events(&dir.join(EVENTS_FILE), &dataset.events)?;
    dataset.model.save(&dir.join(MODEL_FILE))?;
    write_series_csv(&dir.join(TOTAL_FLOW_FILE), &dataset.total_flow)?;
    for (ch, (t, f)) in dataset.true_flows.iter().zip(&dataset.forecast_flows).enumerate() {
        write_series_csv(&dir.join(true_flow_file(ch)), t)?;
        write_series_csv(&dir.join(forecast_flow_file(ch)), f)?;
        names.push(true_flow_file(ch));
        names.push(forecast_flow_file(ch));
    }
    let files = names
        .iter()
        .map(|name| manifest_entry(dir, name))
        .collect::<Result<Vec<_>>>()?;
    let split = split_point(dataset.events.len(), config.test_events);
    let manifest = DatasetManifest {
        seed,
        events: dataset.events.len(),
        train_events: split,
        test_events: dataset.events.len() - split,
        channels: channels.clone(),
        config: config.clone(),
        files,
    };
    write_json_pretty(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn gen_dataset(
    config: &GenConfig,
    channels: &ChannelConfig,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    let dataset = generate(config, channels, seed)?;
    write_dataset(&dataset, config, channels, seed, dir)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path, n: usize) -> Result<Dataset> {
    let path = |name: &str| -> PathBuf { dir.join(name) };
    let events = read_events(&path(EVENTS_FILE))?;
    let model = AcceptanceModel::load(&path(MODEL_FILE))?;
    ensure!(
        model.n() == n,
        Config,
        "user model covers {} channels, config has {n}",
        model.n()
    );
    let total_flow = read_series_csv(&path(TOTAL_FLOW_FILE))?;
    let mut true_flows = Vec::with_capacity(n);
    let mut forecast_flows = Vec::with_capacity(n);
    for ch in 0..n {
        true_flows.push(read_series_csv(&path(&true_flow_file(ch)))?);
        let f = read_series_csv(&path(&forecast_flow_file(ch)))?;
        ensure!(
            f.start_time == total_flow.start_time && f.bin_width == total_flow.bin_width,
            Input,
            "forecast series for channel {ch} is on a different bin grid"
        );
        forecast_flows.push(f);
    }
    Ok(Dataset {
        events,
        model,
        true_flows,
        forecast_flows,
        total_flow,
    })
}
