//! Small feed-forward networks with hand-written gradients.
//!
//! A [`QNetwork`] is a ReLU trunk followed by either a linear head or a
//! dueling head (`Q = V + A - mean(A)`). Gradients are accumulated into a
//! network-shaped buffer so the optimizer can walk parameters and gradients in
//! lockstep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs.max(1))
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .take(self.outputs)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &[f64], delta: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = o * self.inputs;
            let w = &self.weights[row..row + self.inputs];
            let gw = &mut grad.weights[row..row + self.inputs];
            for i in 0..self.inputs {
                gw[i] += d * x[i];
                dx[i] += d * w[i];
            }
        }
        dx
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.inputs, self.outputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear { layer: Dense },
    Dueling { value: Dense, advantage: Dense },
}

/// `Q_a = V + A_a - mean(A)`.
pub fn dueling_combine(value: f64, advantage: &[f64]) -> Result<Vec<f64>> {
    ensure!(!advantage.is_empty(), Contract, "empty advantage vector");
    let mean = advantage.iter().sum::<f64>() / advantage.len() as f64;
    Ok(advantage.iter().map(|a| value + a - mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub trunk: Vec<Dense>,
    pub head: Head,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[k+1]` the ReLU output of trunk layer `k`.
    activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// One regression sample for a Q update: push `Q(x)[action]` toward `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Vec<f64>,
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Weighted mean squared TD error before the step.
    pub loss: f64,
    /// `target - Q(x)[action]` per sample, before the step.
    pub td_errors: Vec<f64>,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        dueling: bool,
        rng: &mut R,
    ) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            trunk.push(Dense::uniform(prev, h, rng));
            prev = h;
        }
        let head = if dueling {
            Head::Dueling {
                value: Dense::uniform(prev, 1, rng),
                advantage: Dense::uniform(prev, output_dim, rng),
            }
        } else {
            Head::Linear {
                layer: Dense::uniform(prev, output_dim, rng),
            }
        };
        QNetwork { trunk, head }
    }

    pub fn from_parts(trunk: Vec<Dense>, head: Head) -> Result<Self> {
        let net = QNetwork { trunk, head };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.trunk.windows(2).enumerate() {
            ensure!(
                pair[0].outputs == pair[1].inputs,
                Contract,
                "trunk layer {k} emits {} values but layer {} expects {}",
                pair[0].outputs,
                k + 1,
                pair[1].inputs
            );
        }
        let all = self.trunk.iter().chain(self.head_layers());
        for layer in all {
            ensure!(
                layer.weights.len() == layer.inputs * layer.outputs
                    && layer.bias.len() == layer.outputs,
                Contract,
                "layer parameter arrays do not match {}x{}",
                layer.outputs,
                layer.inputs
            );
        }
        let feat = self.feature_dim();
        match &self.head {
            Head::Linear { layer } => {
                ensure!(layer.inputs == feat, Contract, "head input mismatch")
            }
            Head::Dueling { value, advantage } => {
                ensure!(
                    value.inputs == feat && advantage.inputs == feat && value.outputs == 1,
                    Contract,
                    "dueling head shape mismatch"
                );
                ensure!(advantage.outputs > 0, Contract, "empty advantage head");
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.trunk.first() {
            Some(l) => l.inputs,
            None => self.head_layers().next().map_or(0, |l| l.inputs),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.head {
            Head::Linear { layer } => layer.outputs,
            Head::Dueling { advantage, .. } => advantage.outputs,
        }
    }

    pub fn is_dueling(&self) -> bool {
        matches!(self.head, Head::Dueling { .. })
    }

    fn feature_dim(&self) -> usize {
        match self.trunk.last() {
            Some(l) => l.outputs,
            None => self.input_dim(),
        }
    }

    fn head_layers(&self) -> impl Iterator<Item = &Dense> {
        let (a, b) = match &self.head {
            Head::Linear { layer } => (layer, None),
            Head::Dueling { value, advantage } => (value, Some(advantage)),
        };
        std::iter::once(a).chain(b)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.head_layers())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        let (a, b) = match &mut self.head {
            Head::Linear { layer } => (layer, None),
            Head::Dueling { value, advantage } => (value, Some(advantage)),
        };
        self.trunk.iter_mut().chain(std::iter::once(a).chain(b))
    }

    pub fn zeros_like(&self) -> Self {
        QNetwork {
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
            head: match &self.head {
                Head::Linear { layer } => Head::Linear {
                    layer: layer.zeros_like(),
                },
                Head::Dueling { value, advantage } => Head::Dueling {
                    value: value.zeros_like(),
                    advantage: advantage.zeros_like(),
                },
            },
        }
    }

    pub fn same_architecture(&self, other: &QNetwork) -> bool {
        self.trunk.len() == other.trunk.len()
            && self.is_dueling() == other.is_dueling()
            && self.layers().zip(other.layers()).all(|(a, b)| a.same_shape(b))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters in a fixed layer order (weights then bias per layer).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        ensure!(
            params.len() == self.param_count(),
            Contract,
            "expected {} parameters, got {}",
            self.param_count(),
            params.len()
        );
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.input_dim(),
            Contract,
            "input has {} values, network expects {}",
            x.len(),
            self.input_dim()
        );
        Ok(self.forward_cached(x).output)
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.trunk {
            let mut h = layer.forward(activations.last().expect("input present"));
            for v in &mut h {
                *v = v.max(0.0);
            }
            activations.push(h);
        }
        let feat = activations.last().expect("input present");
        let output = match &self.head {
            Head::Linear { layer } => layer.forward(feat),
            Head::Dueling { value, advantage } => {
                let v = value.forward(feat)[0];
                let a = advantage.forward(feat);
                dueling_combine(v, &a).expect("advantage head has outputs")
            }
        };
        ForwardCache {
            activations,
            output,
        }
    }

    /// Backpropagates `grad_out = dL/d(output)` through a cached pass into `grads`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut QNetwork) {
        let feat = cache.activations.last().expect("input present");
        let mut delta = match (&self.head, &mut grads.head) {
            (Head::Linear { layer }, Head::Linear { layer: g }) => {
                layer.backward(feat, grad_out, g)
            }
            (
                Head::Dueling { value, advantage },
                Head::Dueling {
                    value: gv,
                    advantage: ga,
                },
            ) => {
                let dv: f64 = grad_out.iter().sum();
                let mean = dv / grad_out.len() as f64;
                let da: Vec<f64> = grad_out.iter().map(|g| g - mean).collect();
                let mut d = value.backward(feat, &[dv], gv);
                for (di, x) in d.iter_mut().zip(advantage.backward(feat, &da, ga)) {
                    *di += x;
                }
                d
            }
            _ => panic!("gradient buffer architecture differs from network"),
        };
        for k in (0..self.trunk.len()).rev() {
            let out = &cache.activations[k + 1];
            for (d, &h) in delta.iter_mut().zip(out) {
                if h <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = self.trunk[k].backward(&cache.activations[k], &delta, &mut grads.trunk[k]);
        }
    }

    /// Weighted squared-TD loss and its gradient, without touching parameters.
    pub fn td_loss_gradient(&self, batch: &[TrainSample]) -> Result<(StepReport, QNetwork)> {
        ensure!(!batch.is_empty(), Contract, "empty training batch");
        let n_out = self.output_dim();
        for s in batch {
            ensure!(
                s.input.len() == self.input_dim(),
                Contract,
                "sample input has {} values, network expects {}",
                s.input.len(),
                self.input_dim()
            );
            ensure!(s.action < n_out, Contract, "action {} out of range", s.action);
            ensure!(s.weight >= 0.0, Contract, "negative sample weight {}", s.weight);
            if !(s.target.is_finite() && s.weight.is_finite() && s.input.iter().all(|v| v.is_finite()))
            {
                return Err(Error::Numeric("non-finite training sample".into()));
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        let mut td_errors = Vec::with_capacity(batch.len());
        let mut grad_out = vec![0.0; n_out];
        for s in batch {
            let cache = self.forward_cached(&s.input);
            let td = s.target - cache.output[s.action];
            td_errors.push(td);
            loss += s.weight * td * td * scale;
            let d = -2.0 * s.weight * td * scale;
            if d != 0.0 {
                grad_out.fill(0.0);
                grad_out[s.action] = d;
                self.backward(&cache, &grad_out, &mut grads);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        Ok((StepReport { loss, td_errors }, grads))
    }

    /// One optimizer step on the weighted squared TD loss; returns the pre-step loss.
    pub fn backward_and_step(
        &mut self,
        batch: &[TrainSample],
        opt: &mut OptimizerState,
    ) -> Result<StepReport> {
        let (report, grads) = self.td_loss_gradient(batch)?;
        if grads.layers().any(|l| l.weights.iter().chain(&l.bias).any(|g| !g.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        opt.step(self, &grads)?;
        Ok(report)
    }
}

/// Copies `online` into `target` parameter for parameter.
pub fn sync_target(online: &QNetwork, target: &mut QNetwork) -> Result<()> {
    ensure!(
        online.same_architecture(target),
        Contract,
        "cannot sync networks with different architectures"
    );
    target.clone_from(online);
    Ok(())
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn adam(net: &QNetwork, learning_rate: f64) -> Self {
        let n = net.param_count();
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, net: &mut QNetwork, grads: &QNetwork) -> Result<()> {
        ensure!(
            net.same_architecture(grads) && self.m.len() == net.param_count(),
            Contract,
            "optimizer state does not match network"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let mut idx = 0;
        for (layer, g) in net.layers_mut().zip(grads.layers()) {
            for (p, &gp) in layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(g.weights.iter().chain(&g.bias))
            {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = b1 * *m + (1.0 - b1) * gp;
                *v = b2 * *v + (1.0 - b2) * gp * gp;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                idx += 1;
            }
        }
        Ok(())
    }
}
