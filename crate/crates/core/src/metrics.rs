//! Routing evaluation metrics computed from a per-arrival trace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{ChannelConfig, Seconds};
use crate::error::{ensure, Error, Result};

/// One routed arrival. `capacities` is the snapshot right after assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub time: Seconds,
    pub suggested_channel: usize,
    pub final_channel: usize,
    pub accepted: bool,
    pub g: f64,
    pub reward: f64,
    pub capacities: Vec<i64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    /// Congestion rate: share of records with any channel over capacity.
    pub ccr: f64,
    /// Average congestion, `-mean(sum_i max(0, -cap_i))` (non-positive).
    pub ac: f64,
    /// Lowest capacity seen on any channel.
    pub pc: i64,
    /// Average free capacity, `mean(sum_i max(0, cap_i))`.
    pub afr: f64,
    /// Share of accepted self-service suggestions.
    pub sp: f64,
    /// Share of accepted drainage suggestions.
    pub dp: f64,
    /// Share of customers who accepted a non-bottleneck channel.
    pub rr: f64,
    pub rn: u64,
    pub mean_reward: f64,
    /// Share of records with the bottleneck channel over capacity.
    pub bottleneck_congestion: f64,
    #[serde(default)]
    pub normalized_reward: Option<f64>,
}

pub fn compute_metrics(trace: &[TraceRecord], config: &ChannelConfig) -> Result<MetricsReport> {
    ensure!(!trace.is_empty(), Input, "empty trace");
    let n = config.n();
    let mut congested = 0u64;
    let mut congestion_sum = 0i64;
    let mut free_sum = 0i64;
    let mut pc = i64::MAX;
    let mut sp = 0u64;
    let mut dp = 0u64;
    let mut rn = 0u64;
    let mut reward_sum = 0.0;
    let mut bottleneck_congested = 0u64;
    for r in trace {
        ensure!(
            r.capacities.len() == n,
            Contract,
            "trace record {} has {} capacities, expected {n}",
            r.step,
            r.capacities.len()
        );
        let min = *r.capacities.iter().min().expect("n >= 2");
        if min < 0 {
            congested += 1;
        }
        pc = pc.min(min);
        congestion_sum += r.capacities.iter().map(|&c| (-c).max(0)).sum::<i64>();
        free_sum += r.capacities.iter().map(|&c| c.max(0)).sum::<i64>();
        if r.capacities[config.bottleneck_index] < 0 {
            bottleneck_congested += 1;
        }
        if r.accepted {
            if r.suggested_channel == config.self_service_index {
                sp += 1;
            }
            if r.suggested_channel == config.drainage_index {
                dp += 1;
            }
            if r.final_channel != config.bottleneck_index {
                rn += 1;
            }
        }
        reward_sum += r.reward;
    }
    let count = trace.len() as u64;
    let nf = count as f64;
    Ok(MetricsReport {
        n: count,
        ccr: congested as f64 / nf,
        ac: -(congestion_sum as f64) / nf,
        pc,
        afr: free_sum as f64 / nf,
        sp: sp as f64 / nf,
        dp: dp as f64 / nf,
        rr: rn as f64 / nf,
        rn,
        mean_reward: reward_sum / nf,
        bottleneck_congestion: bottleneck_congested as f64 / nf,
        normalized_reward: None,
    })
}

/// Z-scores of mean rewards across agents (population standard deviation).
pub fn normalize_rewards(mean_rewards: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    ensure!(
        mean_rewards.len() >= 2,
        Input,
        "reward normalization needs at least 2 agents, got {}",
        mean_rewards.len()
    );
    let k = mean_rewards.len() as f64;
    let mean = mean_rewards.values().sum::<f64>() / k;
    let var = mean_rewards.values().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    let std = var.sqrt();
    Ok(mean_rewards
        .iter()
        .map(|(name, r)| {
            let z = if std > 0.0 { (r - mean) / std } else { 0.0 };
            (name.clone(), z)
        })
        .collect())
}

/// Congestion share per fixed-width time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionPoint {
    pub window_start: Seconds,
    pub records: u64,
    pub bottleneck_congested: f64,
    pub any_congested: f64,
}

pub fn congestion_series(
    trace: &[TraceRecord],
    config: &ChannelConfig,
    window: Seconds,
) -> Vec<CongestionPoint> {
    let mut out: Vec<CongestionPoint> = Vec::new();
    let mut counts: Option<(Seconds, u64, u64, u64)> = None;
    let flush = |c: (Seconds, u64, u64, u64), out: &mut Vec<CongestionPoint>| {
        let (start, n, b, a) = c;
        out.push(CongestionPoint {
            window_start: start,
            records: n,
            bottleneck_congested: b as f64 / n as f64,
            any_congested: a as f64 / n as f64,
        });
    };
    for r in trace {
        let start = r.time.div_euclid(window) * window;
        match counts {
            Some(c) if c.0 == start => {}
            Some(c) => {
                flush(c, &mut out);
                counts = Some((start, 0, 0, 0));
            }
            None => counts = Some((start, 0, 0, 0)),
        }
        let c = counts.as_mut().expect("set above");
        c.1 += 1;
        if r.capacities[config.bottleneck_index] < 0 {
            c.2 += 1;
        }
        if r.capacities.iter().any(|&v| v < 0) {
            c.3 += 1;
        }
    }
    if let Some(c) = counts {
        flush(c, &mut out);
    }
    out
}

fn bool01(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// `step,time,action,final_channel,accepted,reward,capacity_0..,terminal`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<String> = ["step", "time", "action", "final_channel", "accepted", "reward"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n).map(|i| format!("capacity_{i}")));
    header.push("terminal".into());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in trace {
        let mut row = vec![
            r.step.to_string(),
            r.time.to_string(),
            r.suggested_channel.to_string(),
            r.final_channel.to_string(),
            bool01(r.accepted).to_string(),
            r.reward.to_string(),
        ];
        row.extend(r.capacities.iter().map(|c| c.to_string()));
        row.push(bool01(r.terminal).to_string());
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_congestion_csv(path: &Path, series: &[CongestionPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for p in series {
        w.serialize(p).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One row per (agent, seed).
pub fn write_reports_csv(path: &Path, rows: &[(String, u64, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "agent",
        "seed",
        "n",
        "ccr",
        "ac",
        "pc",
        "afr",
        "sp",
        "dp",
        "rr",
        "rn",
        "mean_reward",
        "normalized_reward",
        "bottleneck_congestion",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for (agent, seed, m) in rows {
        w.write_record([
            agent.clone(),
            seed.to_string(),
            m.n.to_string(),
            m.ccr.to_string(),
            m.ac.to_string(),
            m.pc.to_string(),
            m.afr.to_string(),
            m.sp.to_string(),
            m.dp.to_string(),
            m.rr.to_string(),
            m.rn.to_string(),
            m.mean_reward.to_string(),
            m.normalized_reward.map(|v| v.to_string()).unwrap_or_default(),
            m.bottleneck_congestion.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metric-per-row, agent-per-column comparison table.
pub fn write_comparison_csv(path: &Path, agents: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["metric".to_string()];
    header.extend(agents.iter().map(|(name, _)| name.clone()));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    type Getter = fn(&MetricsReport) -> String;
    let rows: [(&str, Getter); 9] = [
        ("CCR", |m| m.ccr.to_string()),
        ("AC", |m| m.ac.to_string()),
        ("PC", |m| m.pc.to_string()),
        ("AFR", |m| m.afr.to_string()),
        ("DP", |m| m.dp.to_string()),
        ("SP", |m| m.sp.to_string()),
        ("RR", |m| m.rr.to_string()),
        ("RN", |m| m.rn.to_string()),
        ("Rewards", |m| {
            m.normalized_reward
                .map(|v| v.to_string())
                .unwrap_or_else(|| m.mean_reward.to_string())
        }),
    ];
    for (name, get) in rows {
        let mut row = vec![name.to_string()];
        row.extend(agents.iter().map(|(_, m)| get(m)));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg2() -> ChannelConfig {
        ChannelConfig::new(vec![2, 2], 1, 0, 0).unwrap()
    }

    fn rec(step: u64, caps: Vec<i64>) -> TraceRecord {
        TraceRecord {
            step,
            time: step as Seconds * 100,
            suggested_channel: 1,
            final_channel: 1,
            accepted: true,
            g: 1.0,
            reward: 1.0,
            capacities: caps,
            terminal: false,
        }
    }

    #[test]
    fn toy_trace() {
        let trace: Vec<_> = [vec![1, -2], vec![0, 0], vec![-1, -1], vec![2, 0]]
            .into_iter()
            .enumerate()
            .map(|(i, c)| rec(i as u64, c))
            .collect();
        let m = compute_metrics(&trace, &cfg2()).unwrap();
        assert_eq!(m.ccr, 0.5);
        assert_eq!(m.ac, -1.0);
        assert_eq!(m.pc, -2);
        assert_eq!(m.afr, 0.75);
        assert_eq!(m.bottleneck_congestion, 0.5);
    }

    #[test]
    fn no_congestion() {
        let trace = vec![rec(0, vec![3, 1]), rec(1, vec![0, 2])];
        let m = compute_metrics(&trace, &cfg2()).unwrap();
        assert_eq!((m.ccr, m.ac, m.pc), (0.0, 0.0, 0));
    }

    #[test]
    fn suggestion_attribution() {
        let cfg = ChannelConfig::new(vec![5, 5, 5], 2, 0, 1).unwrap();
        let mut a = rec(0, vec![5, 5, 5]);
        a.suggested_channel = 0;
        a.final_channel = 0;
        let mut b = rec(1, vec![5, 5, 5]);
        b.suggested_channel = 1;
        b.final_channel = 2;
        b.accepted = false;
        let mut c = rec(2, vec![5, 5, 5]);
        c.suggested_channel = 1;
        c.final_channel = 1;
        let mut d = rec(3, vec![5, 5, 5]);
        d.suggested_channel = 2;
        d.final_channel = 2;
        let m = compute_metrics(&[a, b, c, d], &cfg).unwrap();
        assert_eq!((m.sp, m.dp, m.rr, m.rn), (0.25, 0.25, 0.5, 2));
    }

    #[test]
    fn empty_trace_rejected() {
        assert!(matches!(compute_metrics(&[], &cfg2()), Err(Error::Input(_))));
    }

    #[test]
    fn normalization() {
        let two: BTreeMap<_, _> = [("A".to_string(), 1.0), ("B".to_string(), -1.0)].into();
        let z = normalize_rewards(&two).unwrap();
        assert_eq!((z["A"], z["B"]), (1.0, -1.0));
        let same: BTreeMap<_, _> = [("A".to_string(), 3.0), ("B".to_string(), 3.0)].into();
        assert!(normalize_rewards(&same).unwrap().values().all(|&v| v == 0.0));
        let three: BTreeMap<_, _> = [
            ("A".to_string(), 2.0),
            ("B".to_string(), 0.0),
            ("C".to_string(), -2.0),
        ]
        .into();
        let z = normalize_rewards(&three).unwrap();
        assert!((z["A"] - 1.224_744_871).abs() < 1e-9);
        assert_eq!(z["B"], 0.0);
        assert!((z["C"] + 1.224_744_871).abs() < 1e-9);
        let one: BTreeMap<_, _> = [("A".to_string(), 1.0)].into();
        assert!(normalize_rewards(&one).is_err());
    }

    #[test]
    fn congestion_windows() {
        let trace = vec![rec(0, vec![1, -1]), rec(1, vec![1, 1]), rec(7, vec![-1, 0])];
        let s = congestion_series(&trace, &cfg2(), 600);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].records, 2);
        assert_eq!(s[0].bottleneck_congested, 0.5);
        assert_eq!(s[1].window_start, 600);
        assert_eq!(s[1].bottleneck_congested, 0.0);
        assert_eq!(s[1].any_congested, 1.0);
    }

    #[test]
    fn trace_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &[rec(0, vec![1, -2])], 2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,time,action,final_channel,accepted,reward,capacity_0,capacity_1,terminal"
        );
        assert_eq!(lines.next().unwrap(), "0,0,1,1,1,1,1,-2,0");
    }
}
