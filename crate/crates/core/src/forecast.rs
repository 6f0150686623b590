//! Request-flow forecasting.
//!
//! Arrivals are counted in fixed-width bins (10 minutes by default). The
//! forecaster is a gradient-boosted ensemble of regression trees on the
//! previous 144 bins, trained with squared error and L1/L2-regularized leaf
//! weights.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{RequestEvent, Seconds};
use crate::error::{ensure, Error, Result};
use crate::nn::CHECKPOINT_VERSION;
use crate::rng;

pub const DEFAULT_BIN_WIDTH: Seconds = 600;
pub const DEFAULT_WINDOW: usize = 144;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSeries {
    pub start_time: Seconds,
    pub bin_width: Seconds,
    pub counts: Vec<f64>,
}

impl BinnedSeries {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn bin_of(&self, time: Seconds) -> Option<usize> {
        if time < self.start_time {
            return None;
        }
        Some(((time - self.start_time) / self.bin_width) as usize)
    }
}

/// Counts arrival times into dense bins `[start + k*w, start + (k+1)*w)`.
pub fn binize_times(times: &[Seconds], start_time: Seconds, bin_width: Seconds, bins: usize) -> BinnedSeries {
    let mut counts = vec![0.0; bins];
    for &t in times {
        if t < start_time {
            continue;
        }
        let k = ((t - start_time) / bin_width) as usize;
        if k < bins {
            counts[k] += 1.0;
        }
    }
    BinnedSeries {
        start_time,
        bin_width,
        counts,
    }
}

/// Bins a time-ordered event stream, starting at the first arrival's bin
/// boundary and ending at the last arrival's bin.
pub fn binize(events: &[RequestEvent], bin_width: Seconds) -> BinnedSeries {
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return BinnedSeries {
            start_time: 0,
            bin_width,
            counts: Vec::new(),
        };
    };
    let start = first.arrival_time.div_euclid(bin_width) * bin_width;
    let bins = ((last.arrival_time - start) / bin_width) as usize + 1;
    let times: Vec<Seconds> = events.iter().map(|e| e.arrival_time).collect();
    binize_times(&times, start, bin_width, bins)
}

/// Lag features `counts[t-window .. t]` for predicting `counts[t]`.
pub fn featurize(counts: &[f64], t: usize, window: usize) -> Result<Vec<f64>> {
    if t < window {
        return Err(Error::InsufficientHistory { window, index: t });
    }
    ensure!(t <= counts.len(), Contract, "bin {t} beyond series of {}", counts.len());
    Ok(counts[t - window..t].to_vec())
}

/// Every (features, label) pair for `t` in `window..counts.len()`.
pub fn lag_dataset(counts: &[f64], window: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in window..counts.len() {
        xs.push(counts[t - window..t].to_vec());
        ys.push(counts[t]);
    }
    (xs, ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbrtParams {
    pub rounds: usize,
    pub shrinkage: f64,
    pub max_depth: usize,
    pub colsample: f64,
    pub l1: f64,
    pub l2: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbrtParams {
    fn default() -> Self {
        GbrtParams {
            rounds: 40,
            shrinkage: 0.1,
            max_depth: 6,
            colsample: 0.7,
            l1: 0.1,
            l2: 0.1,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Root at index 0; `x[feature] < threshold` goes left.
    pub nodes: Vec<TreeNode>,
    /// Column subset this tree was allowed to split on.
    pub columns: Vec<usize>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub base_score: f64,
    pub shrinkage: f64,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    params: GbrtParams,
    #[serde(flatten)]
    model: GbrtModel,
}

impl GbrtModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score
            + self
                .trees
                .iter()
                .map(|t| self.shrinkage * t.predict(x))
                .sum::<f64>()
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn save(&self, path: &Path, params: &GbrtParams) -> Result<()> {
        let file = ModelFile {
            version: CHECKPOINT_VERSION,
            params: params.clone(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported forecaster version {}",
                path.display(),
                file.version
            )));
        }
        Ok(file.model)
    }
}

#[derive(Debug, Clone)]
pub struct GbrtFit {
    pub model: GbrtModel,
    /// Training RMSE after each boosting round.
    pub train_rmse: Vec<f64>,
}

/// Soft-thresholded gradient sum used by the L1 term.
fn soft_threshold(g: f64, l1: f64) -> f64 {
    g.signum() * (g.abs() - l1).max(0.0)
}

/// Regularized optimal leaf weight `-sign(G) max(0, |G| - l1) / (H + l2)`.
pub fn leaf_weight(g: f64, h: f64, l1: f64, l2: f64) -> f64 {
    -soft_threshold(g, l1) / (h + l2)
}

fn leaf_score(g: f64, h: f64, l1: f64, l2: f64) -> f64 {
    let t = soft_threshold(g, l1);
    t * t / (h + l2)
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    d: usize,
    sorted: &'a [Vec<u32>],
    params: &'a GbrtParams,
}

impl TreeBuilder<'_> {
    fn value(&self, row: usize, f: usize) -> f64 {
        self.x[row * self.d + f]
    }

    /// Level-wise exact greedy growth over presorted feature columns.
    fn build(&self, grad: &[f64], hess: &[f64], columns: Vec<usize>) -> RegressionTree {
        let p = self.params;
        let n = grad.len();
        let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { weight: 0.0 }];
        let mut node_of: Vec<usize> = vec![0; n];
        let mut frontier: Vec<usize> = vec![0];
        for depth in 0..=p.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![usize::MAX; nodes.len()];
            for (s, &id) in frontier.iter().enumerate() {
                slot_of[id] = s;
            }
            let k = frontier.len();
            let mut g_tot = vec![0.0; k];
            let mut h_tot = vec![0.0; k];
            for i in 0..n {
                let s = slot_of[node_of[i]];
                if s != usize::MAX {
                    g_tot[s] += grad[i];
                    h_tot[s] += hess[i];
                }
            }
            let mut best: Vec<Option<Candidate>> = (0..k).map(|_| None).collect();
            if depth < p.max_depth {
                let mut gl = vec![0.0; k];
                let mut hl = vec![0.0; k];
                let mut last = vec![f64::NAN; k];
                for &f in &columns {
                    gl.fill(0.0);
                    hl.fill(0.0);
                    last.fill(f64::NAN);
                    for &row in &self.sorted[f] {
                        let row = row as usize;
                        let s = slot_of[node_of[row]];
                        if s == usize::MAX {
                            continue;
                        }
                        let v = self.value(row, f);
                        if !last[s].is_nan() && v > last[s] {
                            let (gr, hr) = (g_tot[s] - gl[s], h_tot[s] - hl[s]);
                            if hl[s] >= p.min_child_weight && hr >= p.min_child_weight {
                                let gain = 0.5
                                    * (leaf_score(gl[s], hl[s], p.l1, p.l2)
                                        + leaf_score(gr, hr, p.l1, p.l2)
                                        - leaf_score(g_tot[s], h_tot[s], p.l1, p.l2));
                                if gain > 1e-12 && best[s].as_ref().is_none_or(|b| gain > b.gain) {
                                    best[s] = Some(Candidate {
                                        gain,
                                        feature: f,
                                        threshold: 0.5 * (last[s] + v),
                                    });
                                }
                            }
                        }
                        gl[s] += grad[row];
                        hl[s] += hess[row];
                        last[s] = v;
                    }
                }
            }
            let mut next = Vec::new();
            let mut children = vec![(usize::MAX, usize::MAX); k];
            for (s, &id) in frontier.iter().enumerate() {
                match &best[s] {
                    Some(c) => {
                        let left = nodes.len();
                        nodes.push(TreeNode::Leaf { weight: 0.0 });
                        nodes.push(TreeNode::Leaf { weight: 0.0 });
                        nodes[id] = TreeNode::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        children[s] = (left, left + 1);
                        next.push(left);
                        next.push(left + 1);
                    }
                    None => {
                        nodes[id] = TreeNode::Leaf {
                            weight: leaf_weight(g_tot[s], h_tot[s], p.l1, p.l2),
                        };
                    }
                }
            }
            for i in 0..n {
                let id = node_of[i];
                let s = if id < slot_of.len() { slot_of[id] } else { usize::MAX };
                if s == usize::MAX {
                    continue;
                }
                if let (Some(c), (l, r)) = (&best[s], children[s]) {
                    node_of[i] = if self.value(i, c.feature) < c.threshold { l } else { r };
                }
            }
            frontier = next;
        }
        RegressionTree { nodes, columns }
    }
}

/// Fits a boosted ensemble on squared error (`g = 2(pred - y)`, `h = 2`).
pub fn fit_gbrt(xs: &[Vec<f64>], ys: &[f64], params: &GbrtParams) -> Result<GbrtFit> {
    ensure!(!xs.is_empty(), Input, "no training rows");
    ensure!(
        xs.len() == ys.len(),
        Contract,
        "{} rows but {} labels",
        xs.len(),
        ys.len()
    );
    let d = xs[0].len();
    ensure!(d > 0, Input, "rows have no features");
    ensure!(xs.iter().all(|r| r.len() == d), Contract, "ragged feature rows");
    ensure!(
        params.shrinkage > 0.0 && params.colsample > 0.0 && params.colsample <= 1.0,
        Config,
        "shrinkage must be positive and colsample in (0, 1]"
    );
    let n = xs.len();
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let sorted: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| flat[a as usize * d + f].total_cmp(&flat[b as usize * d + f]));
            idx
        })
        .collect();
    let builder = TreeBuilder {
        x: &flat,
        d,
        sorted: &sorted,
        params,
    };
    let base_score = ys.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut train_rmse = Vec::with_capacity(params.rounds);
    let n_cols = ((params.colsample * d as f64).round() as usize).clamp(1, d);
    let hess = vec![2.0; n];
    for round in 0..params.rounds {
        let mut col_rng = rng::substream(params.seed, &format!("{}-tree-{round}", rng::FORECAST));
        let mut columns = index::sample(&mut col_rng, d, n_cols).into_vec();
        columns.sort_unstable();
        let grad: Vec<f64> = pred.iter().zip(ys).map(|(p, y)| 2.0 * (p - y)).collect();
        let tree = builder.build(&grad, &hess, columns);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += params.shrinkage * tree.predict(&xs[i]);
        }
        train_rmse.push(rmse(ys, &pred)?);
        trees.push(tree);
    }
    Ok(GbrtFit {
        model: GbrtModel {
            base_score,
            shrinkage: params.shrinkage,
            n_features: d,
            trees,
        },
        train_rmse,
    })
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    ensure!(
        y.len() == y_hat.len(),
        Contract,
        "{} actuals but {} predictions",
        y.len(),
        y_hat.len()
    );
    ensure!(!y.is_empty(), Contract, "rmse of empty sequences");
    let mse = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of points with `y(1+low) <= y_hat <= y(1+high)`; bins with a zero
/// actual are skipped because a relative band is undefined there.
pub fn band_accuracy(y: &[f64], y_hat: &[f64], low: f64, high: f64) -> f64 {
    let mut counted = 0usize;
    let mut hits = 0usize;
    for (&a, &p) in y.iter().zip(y_hat) {
        if a <= 0.0 {
            continue;
        }
        counted += 1;
        // Small slack so band edges computed in floating point count as inside.
        let tol = 1e-9 * a;
        if p >= a * (1.0 + low) - tol && p <= a * (1.0 + high) + tol {
            hits += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    }
}

/// `y_hat[t] = y[t-1]` for t >= 1.
pub fn persistence_forecast(counts: &[f64]) -> Vec<f64> {
    counts.windows(2).map(|w| w[0]).collect()
}

/// True counts plus Gaussian noise, clamped at zero.
pub fn noisy_oracle_forecast<R: Rng + ?Sized>(true_counts: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), Config, "noise sigma must be >= 0");
    if sigma == 0.0 {
        return Ok(true_counts.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    Ok(true_counts
        .iter()
        .map(|&c| (c + normal.sample(rng)).max(0.0))
        .collect())
}

/// Per-channel flow forecasts looked up by event time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowForecast {
    pub start_time: Seconds,
    pub bin_width: Seconds,
    /// `channels[i][k]` is the forecast count for channel `i` in bin `k`.
    pub channels: Vec<Vec<f64>>,
}

impl FlowForecast {
    pub fn zeros(n: usize) -> Self {
        FlowForecast {
            start_time: 0,
            bin_width: DEFAULT_BIN_WIDTH,
            channels: vec![Vec::new(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.channels.len()
    }

    /// Forecast for the window containing `time`; zero outside the series.
    pub fn at(&self, time: Seconds) -> Vec<f64> {
        let k = if time >= self.start_time {
            Some(((time - self.start_time) / self.bin_width) as usize)
        } else {
            None
        };
        self.channels
            .iter()
            .map(|c| k.and_then(|k| c.get(k)).copied().unwrap_or(0.0))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    bin_start: Seconds,
    count: f64,
}

pub fn write_series_csv(path: &Path, series: &BinnedSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for (k, &count) in series.counts.iter().enumerate() {
        w.serialize(SeriesRow {
            bin_start: series.start_time + k as Seconds * series.bin_width,
            count,
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_series_csv(path: &Path) -> Result<BinnedSeries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let rows: Vec<SeriesRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(path, e))?;
    let Some(first) = rows.first() else {
        return Err(Error::Input(format!("{}: empty series", path.display())));
    };
    let bin_width = match rows.get(1) {
        Some(second) => second.bin_start - first.bin_start,
        None => DEFAULT_BIN_WIDTH,
    };
    ensure!(bin_width > 0, Input, "{}: bin_start must increase", path.display());
    for (k, row) in rows.iter().enumerate() {
        ensure!(
            row.bin_start == first.bin_start + k as Seconds * bin_width,
            Input,
            "{}: row {} breaks the regular bin grid",
            path.display(),
            k + 1
        );
    }
    Ok(BinnedSeries {
        start_time: first.bin_start,
        bin_width,
        counts: rows.into_iter().map(|r| r.count).collect(),
    })
}
