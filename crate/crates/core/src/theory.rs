//! Near-collapse gradient bound and collapse detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::eq_s2_s3_gradient;
use crate::metrics::MetricReport;
use crate::par;
use crate::sphere::{dist, norm, EmbeddingSet, Mat};

pub const DEFAULT_EPS_MAX: f64 = 0.3;

/// Largest pairwise distance among the rows.
pub fn measure_epsilon(z: &Mat) -> f64 {
    let n = z.rows();
    par::map_range(n, |i| {
        (i + 1..n)
            .map(|j| dist(z.row(i), z.row(j)))
            .fold(0.0, f64::max)
    })
    .into_iter()
    .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundForm {
    /// As stated in the theorem.
    Theorem,
    /// As reached on the last line of the proof.
    ProofFinal,
}

/// Upper bound on `||∂L_i/∂w_i||` for an anchor with `positives = |P(i)|`
/// and `others = |A(i)|` when all embeddings lie within `epsilon` of each other.
pub fn bound_rhs(
    epsilon: f64,
    tau: f64,
    w_norm: f64,
    positives: usize,
    others: usize,
    form: BoundForm,
) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("tau must be > 0, got {tau}")));
    }
    if !(w_norm > 0.0 && w_norm.is_finite()) {
        return Err(Error::config(format!("||w|| must be > 0, got {w_norm}")));
    }
    if positives == 0 || positives > others {
        return Err(Error::config(format!(
            "need 0 < |P| <= |A|, got |P| = {positives}, |A| = {others}"
        )));
    }
    if !(0.0..=2.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon must lie in [0, 2], got {epsilon}")));
    }
    let rest = 1.0 - positives as f64 / others as f64;
    let x = epsilon * epsilon / tau;
    let bracket = match form {
        BoundForm::Theorem => rest * (-x).exp() + x.exp_m1() + rest * rest * x.exp(),
        BoundForm::ProofFinal => rest * (-x).exp() + (-x).exp() * x.exp_m1() + rest * x.exp(),
    };
    Ok((epsilon + epsilon * epsilon / 2.0) * bracket / (tau * w_norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBound {
    pub index: usize,
    pub label: u8,
    pub grad_norm: f64,
    pub rhs_proof: f64,
    pub rhs_theorem: f64,
    pub positives: usize,
    pub others: usize,
    pub w_norm: f64,
    pub satisfied_proof: bool,
    pub satisfied_theorem: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEvaluation {
    pub epsilon: f64,
    pub eps_max: f64,
    pub tau: f64,
    /// The batch is wider than `eps_max`; the bound is evaluated anyway.
    pub premise_violated: bool,
    pub anchors: Vec<AnchorBound>,
    pub all_satisfied_proof: bool,
    pub all_satisfied_theorem: bool,
    /// Smallest and largest `rhs - grad_norm` for the proof-final form.
    pub min_slack_proof: f64,
    pub max_slack_proof: f64,
}

impl BoundEvaluation {
    /// Mean measured gradient norm over anchors with the given label.
    pub fn mean_grad_norm(&self, label: u8) -> Option<f64> {
        let v: Vec<f64> = self
            .anchors
            .iter()
            .filter(|a| a.label == label)
            .map(|a| a.grad_norm)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Measures the supervised-loss gradient of every view against both forms of
/// the bound.
pub fn verify_bound(
    emb: &EmbeddingSet,
    labels: &[u8],
    tau: f64,
    eps_max: f64,
) -> Result<BoundEvaluation> {
    let n = emb.len();
    if labels.len() != n {
        return Err(Error::batch("label count differs from view count"));
    }
    if n < 2 {
        return Err(Error::batch("need at least two views"));
    }
    let z = emb.z();
    let epsilon = measure_epsilon(z).min(2.0);
    let anchors = par::map_range(n, |i| -> Result<AnchorBound> {
        let w_norm = emb.norms()[i];
        let g = eq_s2_s3_gradient(z, labels, i, tau, w_norm)?;
        let positives = labels
            .iter()
            .enumerate()
            .filter(|&(j, &l)| j != i && l == labels[i])
            .count();
        let others = n - 1;
        let rhs_proof = bound_rhs(epsilon, tau, w_norm, positives, others, BoundForm::ProofFinal)?;
        let rhs_theorem = bound_rhs(epsilon, tau, w_norm, positives, others, BoundForm::Theorem)?;
        let grad_norm = norm(&g);
        Ok(AnchorBound {
            index: i,
            label: labels[i],
            grad_norm,
            rhs_proof,
            rhs_theorem,
            positives,
            others,
            w_norm,
            satisfied_proof: grad_norm <= rhs_proof,
            satisfied_theorem: grad_norm <= rhs_theorem,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let slack: Vec<f64> = anchors.iter().map(|a| a.rhs_proof - a.grad_norm).collect();
    Ok(BoundEvaluation {
        epsilon,
        eps_max,
        tau,
        premise_violated: epsilon > eps_max,
        all_satisfied_proof: anchors.iter().all(|a| a.satisfied_proof),
        all_satisfied_theorem: anchors.iter().all(|a| a.satisfied_theorem),
        min_slack_proof: slack.iter().copied().fold(f64::INFINITY, f64::min),
        max_slack_proof: slack.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseThresholds {
    pub saa: f64,
    pub cac_band: f64,
    pub similarity: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            saa: 0.05,
            cac_band: 0.05,
            similarity: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl TrajectorySummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let (&first, &last) = (values.first()?, values.last()?);
        Some(Self {
            first,
            last,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseVerdict {
    pub collapsed: bool,
    pub saa: f64,
    pub cac: f64,
    pub cac_baseline: f64,
    pub mean_cosine: f64,
    pub grad_norms: TrajectorySummary,
    pub thresholds: CollapseThresholds,
}

/// Collapsed when SAA is near zero, CAC sits at the label-mix baseline and
/// embeddings are nearly parallel.
pub fn detect_collapse(
    report: &MetricReport,
    grad_norms: &[f64],
    thresholds: CollapseThresholds,
) -> Result<CollapseVerdict> {
    let summary = TrajectorySummary::of(grad_norms)
        .ok_or_else(|| Error::config("gradient-norm trajectory is empty"))?;
    let baseline = report.label_mix_baseline();
    let collapsed = report.saa < thresholds.saa
        && (report.cac - baseline).abs() <= thresholds.cac_band
        && report.mean_cosine > thresholds.similarity;
    Ok(CollapseVerdict {
        collapsed,
        saa: report.saa,
        cac: report.cac,
        cac_baseline: baseline,
        mean_cosine: report.mean_cosine,
        grad_norms: summary,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::RngStream;

    #[test]
    fn epsilon_cases() {
        let same = Mat::from_rows(&vec![vec![1.0, 0.0]; 3]).unwrap();
        assert_eq!(measure_epsilon(&same), 0.0);
        let anti = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(measure_epsilon(&anti), 2.0);
    }

    #[test]
    fn rhs_zero_at_zero_epsilon() {
        for form in [BoundForm::Theorem, BoundForm::ProofFinal] {
            assert_eq!(bound_rhs(0.0, 0.07, 1.0, 3, 10, form).unwrap(), 0.0);
        }
    }

    #[test]
    fn rhs_all_positive_value() {
        let got = bound_rhs(0.1, 0.07, 1.0, 9, 9, BoundForm::ProofFinal).unwrap();
        let x: f64 = 0.01 / 0.07;
        let want = (1.0 / 0.07) * 0.105 * ((-x).exp() * (x.exp() - 1.0));
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn rhs_domain_errors() {
        assert!(bound_rhs(0.1, 0.0, 1.0, 1, 2, BoundForm::Theorem).is_err());
        assert!(bound_rhs(0.1, 0.1, 0.0, 1, 2, BoundForm::Theorem).is_err());
        assert!(bound_rhs(0.1, 0.1, 1.0, 0, 2, BoundForm::Theorem).is_err());
        assert!(bound_rhs(0.1, 0.1, 1.0, 3, 2, BoundForm::Theorem).is_err());
    }

    #[test]
    fn rhs_decreases_with_positives() {
        for form in [BoundForm::Theorem, BoundForm::ProofFinal] {
            let vals: Vec<f64> = (1..=20)
                .map(|p| bound_rhs(0.15, 0.07, 1.0, p, 20, form).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn rhs_increases_with_epsilon() {
        for form in [BoundForm::Theorem, BoundForm::ProofFinal] {
            let vals: Vec<f64> = (0..50)
                .map(|k| bound_rhs(0.3 * k as f64 / 49.0, 0.07, 1.0, 4, 20, form).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn verify_bound_on_collapsed_batch() {
        let z = Mat::from_rows(&vec![vec![0.0, 1.0, 0.0]; 8]).unwrap();
        let emb = EmbeddingSet::from_unit(z).unwrap();
        let eval = verify_bound(&emb, &[0, 0, 0, 0, 0, 0, 1, 1], 0.07, DEFAULT_EPS_MAX).unwrap();
        assert_eq!(eval.epsilon, 0.0);
        assert!(eval.all_satisfied_proof);
        assert!(eval.anchors.iter().all(|a| a.grad_norm == 0.0));
    }

    #[test]
    fn verify_bound_flags_wide_batches() {
        let mut rng = RngStream::new(2, 0);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| rng.unit_vec(4)).collect();
        let emb = EmbeddingSet::from_unit(Mat::from_rows(&rows).unwrap()).unwrap();
        let eval = verify_bound(&emb, &[0, 0, 0, 0, 1, 1, 1, 1], 0.5, DEFAULT_EPS_MAX).unwrap();
        assert!(eval.premise_violated);
    }

    fn report(saa: f64, cac: f64, cos: f64) -> MetricReport {
        MetricReport {
            sad: 0.0,
            saa,
            cad: 0.0,
            cac,
            gpu: 0.0,
            r_fraction: 0.05,
            r_count: 10,
            views: 200,
            class0_views: 190,
            class1_views: 10,
            mean_cosine: cos,
        }
    }

    #[test]
    fn collapse_verdicts() {
        let base = 0.95f64.powi(2) + 0.05f64.powi(2);
        let v = detect_collapse(&report(0.0, base, 0.999), &[1.0, 0.5], CollapseThresholds::default()).unwrap();
        assert!(v.collapsed);
        let v = detect_collapse(&report(1.0, 1.0, 0.1), &[1.0], CollapseThresholds::default()).unwrap();
        assert!(!v.collapsed);
        assert!(detect_collapse(&report(0.0, base, 1.0), &[], CollapseThresholds::default()).is_err());
    }
}
