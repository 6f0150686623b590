//! Customer acceptance model: attributes in, per-channel acceptance
//! probabilities out. The bottleneck channel is always accepted.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CustomerProfile, PROFILE_LEN};
use crate::error::{ensure, Error, Result};
use crate::nn::{Head, OptimizerState, QNetwork, CHECKPOINT_VERSION};
use crate::rng;

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 256, 128];

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceModel {
    pub network: QNetwork,
    pub bottleneck_index: usize,
    pub cardinalities: [u32; PROFILE_LEN],
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    kind: String,
    #[serde(flatten)]
    model: AcceptanceModel,
}

const MODEL_KIND: &str = "acceptance_model";

impl AcceptanceModel {
    pub fn new(
        network: QNetwork,
        bottleneck_index: usize,
        cardinalities: [u32; PROFILE_LEN],
    ) -> Result<Self> {
        network.validate()?;
        ensure!(
            network.input_dim() == PROFILE_LEN,
            Contract,
            "acceptance network must take {PROFILE_LEN} inputs, got {}",
            network.input_dim()
        );
        ensure!(!network.is_dueling(), Contract, "acceptance network needs a linear head");
        ensure!(
            bottleneck_index < network.output_dim(),
            Contract,
            "bottleneck index {bottleneck_index} out of range"
        );
        Ok(AcceptanceModel {
            network,
            bottleneck_index,
            cardinalities,
        })
    }

    /// Randomly initialized ground-truth model. The output layer is rescaled by
    /// `logit_scale` and shifted by `logit_bias` so probabilities spread across
    /// customers instead of clustering at 0.5.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        bottleneck_index: usize,
        hidden: &[usize],
        cardinalities: [u32; PROFILE_LEN],
        logit_scale: f64,
        logit_bias: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            logit_bias.len() == n,
            Config,
            "logit bias needs {n} entries, got {}",
            logit_bias.len()
        );
        let mut network = QNetwork::new(PROFILE_LEN, hidden, n, false, rng);
        if let Head::Linear { layer } = &mut network.head {
            for w in &mut layer.weights {
                *w *= logit_scale;
            }
            for (b, shift) in layer.bias.iter_mut().zip(logit_bias) {
                *b = *b * logit_scale + shift;
            }
        }
        AcceptanceModel::new(network, bottleneck_index, cardinalities)
    }

    pub fn n(&self) -> usize {
        self.network.output_dim()
    }

    /// Rescales the output layer so each channel's logit has mean `bias[ch]`
    /// and standard deviation `scale` over `profiles`.
    pub fn standardize_logits(&mut self, profiles: &[CustomerProfile], scale: f64, bias: &[f64]) -> Result<()> {
        let n = self.n();
        ensure!(!profiles.is_empty(), Input, "no profiles to standardize over");
        ensure!(bias.len() == n, Config, "logit bias needs {n} entries, got {}", bias.len());
        ensure!(scale >= 0.0 && scale.is_finite(), Config, "logit scale must be >= 0");
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for p in profiles {
            for (ch, z) in self.logits(p).into_iter().enumerate() {
                sum[ch] += z;
                sq[ch] += z * z;
            }
        }
        let count = profiles.len() as f64;
        let Head::Linear { layer } = &mut self.network.head else {
            unreachable!("checked at construction");
        };
        for ch in 0..n {
            let mean = sum[ch] / count;
            let std = (sq[ch] / count - mean * mean).max(0.0).sqrt();
            let k = if std > 1e-12 { scale / std } else { 0.0 };
            let row = &mut layer.weights[ch * layer.inputs..(ch + 1) * layer.inputs];
            row.iter_mut().for_each(|w| *w *= k);
            layer.bias[ch] = (layer.bias[ch] - mean) * k + bias[ch];
        }
        Ok(())
    }

    pub fn logits(&self, profile: &CustomerProfile) -> Vec<f64> {
        self.network
            .forward(&profile.scaled(&self.cardinalities))
            .expect("input width checked at construction")
    }

    pub fn acceptance_probs(&self, profile: &CustomerProfile) -> Vec<f64> {
        let mut p: Vec<f64> = self.logits(profile).into_iter().map(logistic).collect();
        p[self.bottleneck_index] = 1.0;
        p
    }

    /// Same as [`acceptance_probs`](Self::acceptance_probs) for a raw attribute slice.
    pub fn acceptance_for_attributes(&self, attributes: &[u32]) -> Result<Vec<f64>> {
        let profile = CustomerProfile::try_from(attributes.to_vec())?;
        Ok(self.acceptance_probs(&profile))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            version: CHECKPOINT_VERSION,
            kind: MODEL_KIND.into(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.version != CHECKPOINT_VERSION || file.kind != MODEL_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected {MODEL_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                path.display(),
                file.kind,
                file.version
            )));
        }
        let m = file.model;
        AcceptanceModel::new(m.network, m.bottleneck_index, m.cardinalities)
    }
}

/// Bernoulli draw with success probability `probs[action]`.
pub fn sample_acceptance<R: Rng + ?Sized>(probs: &[f64], action: usize, rng: &mut R) -> bool {
    rng.random::<f64>() < probs[action]
}

/// One logged offer: the channel suggested to a customer and their answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferRecord {
    pub profile: CustomerProfile,
    pub channel: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 64,
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: AcceptanceModel,
    /// Mean binary cross-entropy over the log after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn log_loss(model: &AcceptanceModel, log: &[OfferRecord]) -> f64 {
    let total: f64 = log
        .iter()
        .map(|r| {
            let p = logistic(model.logits(&r.profile)[r.channel]).clamp(1e-12, 1.0 - 1e-12);
            if r.accepted {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / log.len() as f64
}

/// Fits an acceptance model by minibatch cross-entropy on the observed
/// (channel, accepted) pairs. Offers of the bottleneck channel carry no signal
/// and are skipped.
pub fn fit_user_model(
    log: &[OfferRecord],
    n: usize,
    bottleneck_index: usize,
    cardinalities: [u32; PROFILE_LEN],
    params: &FitParams,
) -> Result<FitReport> {
    ensure!(!log.is_empty(), Input, "empty offer log");
    for r in log {
        ensure!(r.channel < n, Contract, "offer channel {} out of range", r.channel);
    }
    let mut rng = rng::substream(params.seed, rng::ACCEPTANCE);
    let network = QNetwork::new(PROFILE_LEN, &params.hidden, n, false, &mut rng);
    let mut model = AcceptanceModel::new(network, bottleneck_index, cardinalities)?;
    let mut opt = OptimizerState::adam(&model.network, params.learning_rate);
    let informative: Vec<&OfferRecord> = log
        .iter()
        .filter(|r| r.channel != bottleneck_index)
        .collect();
    let mut order: Vec<usize> = (0..informative.len()).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let batch = params.batch_size.max(1);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grads = model.network.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut grad_out = vec![0.0; n];
            for &i in chunk {
                let r = informative[i];
                let x = r.profile.scaled(&cardinalities);
                let cache = model.network.forward_cached(&x);
                let p = logistic(cache.output[r.channel]);
                let y = if r.accepted { 1.0 } else { 0.0 };
                grad_out.fill(0.0);
                grad_out[r.channel] = (p - y) * scale;
                model.network.backward(&cache, &grad_out, &mut grads);
            }
            opt.step(&mut model.network, &grads)?;
        }
        epoch_losses.push(log_loss(&model, log));
    }
    Ok(FitReport {
        model,
        epoch_losses,
    })
}
