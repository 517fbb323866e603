use serde::{Deserialize, Serialize};

use super::sweep::{Column, SweepRow};
use crate::error::{Error, Result};

pub const MIN_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    pub r2: f64,
    pub kendall_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: usize,
    pub metrics: Vec<MetricCorrelation>,
}

impl CorrelationReport {
    pub fn get(&self, metric: &str) -> Option<&MetricCorrelation> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

/// Coefficient of determination of the least-squares line of `y` on `x`;
/// zero when either column is constant.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if x.is_empty() || constant(x) || constant(y) {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).min(1.0)
}

/// Kendall's tau-b; zero when either column is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                tie_x += 1;
            }
            if dy == 0 {
                tie_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n.saturating_sub(1)) / 2) as i64;
    let denom = (((pairs - tie_x) * (pairs - tie_y)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / denom
    }
}

/// R² and Kendall tau of each metric against the probe metric.
pub fn correlate(rows: &[SweepRow]) -> Result<CorrelationReport> {
    let usable: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| {
            [r.sad, r.saa, r.cad, r.cac, r.gpu, r.probe_metric]
                .iter()
                .all(|v| v.is_finite())
        })
        .collect();
    if usable.len() < MIN_ROWS {
        return Err(Error::InsufficientData {
            rows: usable.len(),
            needed: MIN_ROWS,
        });
    }
    let probe: Vec<f64> = usable.iter().map(|r| r.probe_metric).collect();
    let columns: [Column; 5] = [
        ("sad", |r| r.sad),
        ("saa", |r| r.saa),
        ("cad", |r| r.cad),
        ("cac", |r| r.cac),
        ("gpu", |r| r.gpu),
    ];
    let metrics = columns
        .iter()
        .map(|(name, get)| {
            let x: Vec<f64> = usable.iter().map(|r| get(r)).collect();
            MetricCorrelation {
                metric: name.to_string(),
                r2: r_squared(&x, &probe),
                kendall_tau: kendall_tau_b(&x, &probe),
            }
        })
        .collect();
    Ok(CorrelationReport {
        rows: usable.len(),
        metrics,
    })
}
