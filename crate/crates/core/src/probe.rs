//! Linear probe on frozen embeddings.
//!
//! Logistic regression fitted by full-batch gradient descent with
//! inverse-frequency class weights. Features are standardized with training
//! statistics during fitting and the weights are mapped back to raw inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{dot, Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.1 }
    }
}

/// Weights `w` followed by the bias; scores are `w·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeWeights {
    pub weights: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

impl ProbeWeights {
    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.weights.len() - 1;
        dot(&self.weights[..d], x) + self.weights[d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub weights: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(s))` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn counts(labels: &[u8]) -> [usize; 2] {
    let mut c = [0; 2];
    for &l in labels {
        c[usize::from(l == 1)] += 1;
    }
    c
}

pub fn fit_probe(x: &Mat, labels: &[u8], cfg: &ProbeConfig) -> Result<ProbeWeights> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::batch("label count differs from row count"));
    }
    let c = counts(labels);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::SingleClassTrainSet);
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("probe lr must be > 0"));
    }
    let d = x.cols();
    let nf = n as f64;

    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut sd = vec![0.0; d];
    for row in x.iter_rows() {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / nf).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let xs: Vec<Vec<f64>> = x
        .iter_rows()
        .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let alpha = [nf / (2.0 * c[0] as f64), nf / (2.0 * c[1] as f64)];
    let ys: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == 1))).collect();

    let loss_at = |v: &[f64]| -> f64 {
        let mut total = 0.0;
        for (xi, &y) in xs.iter().zip(&ys) {
            let s = dot(&v[..d], xi) + v[d];
            let a = alpha[y as usize];
            total += a * if y == 1.0 { softplus(-s) } else { softplus(s) };
        }
        total / nf
    };

    let mut v = vec![0.0; d + 1];
    let mut loss = loss_at(&v);
    let mut trace = vec![loss];
    let mut lr = cfg.lr;
    for _ in 0..cfg.epochs {
        let mut g = vec![0.0; d + 1];
        for (xi, &y) in xs.iter().zip(&ys) {
            let s = dot(&v[..d], xi) + v[d];
            let r = alpha[y as usize] * (sigmoid(s) - y);
            for (gk, xk) in g.iter_mut().zip(xi) {
                *gk += r * xk;
            }
            g[d] += r;
        }
        g.iter_mut().for_each(|gk| *gk /= nf);
        loop {
            let cand: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
            let cl = loss_at(&cand);
            if cl <= loss {
                v = cand;
                loss = cl;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
        trace.push(loss);
    }

    let mut weights: Vec<f64> = v[..d].iter().zip(&sd).map(|(a, s)| a / s).collect();
    let shift: f64 = weights.iter().zip(&mean).map(|(w, m)| w * m).sum();
    weights.push(v[d] - shift);
    Ok(ProbeWeights {
        weights,
        loss_trace: trace,
    })
}

/// Area under the ROC curve from midranks; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let c = counts(labels);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::SingleClassTestSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let n1 = c[1] as f64;
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * c[0] as f64))
}

/// Mean per-class recall with positives predicted at probability >= 0.5.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let c = counts(labels);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::SingleClassTestSet);
    }
    let mut hits = [0usize; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = sigmoid(s) >= 0.5;
        let actual = l == 1;
        if predicted == actual {
            hits[usize::from(actual)] += 1;
        }
    }
    Ok(0.5 * (hits[0] as f64 / c[0] as f64 + hits[1] as f64 / c[1] as f64))
}

pub fn evaluate_probe(weights: &ProbeWeights, x: &Mat, labels: &[u8]) -> Result<ProbeResult> {
    if x.rows() == 0 || labels.len() != x.rows() {
        return Err(Error::SingleClassTestSet);
    }
    let scores: Vec<f64> = x.iter_rows().map(|r| weights.score(r)).collect();
    Ok(ProbeResult {
        balanced_accuracy: balanced_accuracy(&scores, labels)?,
        auc: auc(&scores, labels)?,
        weights: weights.weights.clone(),
        train_size: 0,
        test_size: x.rows(),
    })
}

/// Indices of a class-balanced subset with
/// `clamp(round(fraction·n/2), 2, smaller class size)` rows per class.
pub fn balanced_subset(labels: &[u8], fraction: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let by_class: [Vec<usize>; 2] = [0u8, 1].map(|c| {
        (0..labels.len())
            .filter(|&i| u8::from(labels[i] == 1) == c)
            .collect()
    });
    let smaller = by_class[0].len().min(by_class[1].len());
    if smaller == 0 {
        return Err(Error::SingleClassTrainSet);
    }
    let per_class = ((fraction * labels.len() as f64 / 2.0).round() as usize)
        .max(2)
        .min(smaller);
    let mut out = Vec::with_capacity(2 * per_class);
    for members in &by_class {
        let mut picked: Vec<usize> = if per_class == members.len() {
            members.clone()
        } else {
            rng.choose_distinct(members.len(), per_class)
                .into_iter()
                .map(|k| members[k])
                .collect()
        };
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Fits on a balanced subset of the training split and scores the test split.
pub fn probe_protocol(
    train: (&Mat, &[u8]),
    test: (&Mat, &[u8]),
    fraction: f64,
    cfg: &ProbeConfig,
    rng: &mut RngStream,
) -> Result<ProbeResult> {
    let idx = balanced_subset(train.1, fraction, rng)?;
    let x = train.0.select_rows(&idx);
    let y: Vec<u8> = idx.iter().map(|&i| train.1[i]).collect();
    let weights = fit_probe(&x, &y, cfg)?;
    let mut result = evaluate_probe(&weights, test.0, test.1)?;
    result.train_size = idx.len();
    Ok(result)
}
