//! Representation metrics: SAD, SAA, CAD, CAC and GPU.
//!
//! All metrics take unit embeddings as rows of a [`Mat`]. Distances are
//! computed by direct subtraction, per-row partial sums are produced in
//! parallel and combined in index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::sphere::{dist, dot, sq_dist, Mat, RngStream};

pub const DEFAULT_R_FRACTION: f64 = 0.05;

/// Tie rule for CAC neighborhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "seed")]
pub enum TieBreak {
    #[default]
    Index,
    /// Ties broken by a random permutation drawn from this seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sad: f64,
    pub saa: f64,
    pub cad: f64,
    pub cac: f64,
    pub gpu: f64,
    pub r_fraction: f64,
    pub r_count: usize,
    pub views: usize,
    pub class0_views: usize,
    pub class1_views: usize,
    pub mean_cosine: f64,
}

impl MetricReport {
    /// `Σ q_c²` over the view class fractions: the CAC of a random mix.
    pub fn label_mix_baseline(&self) -> f64 {
        let n = self.views as f64;
        let q0 = self.class0_views as f64 / n;
        let q1 = self.class1_views as f64 / n;
        q0 * q0 + q1 * q1
    }
}

fn check_partner(n: usize, partner: &[usize]) -> Result<()> {
    if partner.len() != n {
        return Err(Error::batch("partner map length differs from view count"));
    }
    for (i, &p) in partner.iter().enumerate() {
        if p >= n || p == i || partner[p] != i {
            return Err(Error::batch(format!("view {i} has no valid partner")));
        }
    }
    Ok(())
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::batch("label count differs from view count"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::batch("labels must be binary"));
    }
    Ok(())
}

/// Mean distance between the two views of each sample.
pub fn sad(z: &Mat, partner: &[usize]) -> Result<f64> {
    check_partner(z.rows(), partner)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &p) in partner.iter().enumerate() {
        if i < p {
            total += dist(z.row(i), z.row(p));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn saa_hit(z: &Mat, partner: &[usize], i: usize) -> bool {
    let zi = z.row(i);
    let pos = dist(zi, z.row(partner[i]));
    (0..z.rows())
        .filter(|&j| j != i && j != partner[i])
        .all(|j| pos < dist(zi, z.row(j)))
}

/// Fraction of views whose partner is strictly nearer than every other view.
pub fn saa(z: &Mat, partner: &[usize]) -> Result<f64> {
    let n = z.rows();
    check_partner(n, partner)?;
    if n < 4 {
        return Err(Error::batch("saa needs at least two samples"));
    }
    let hits = par::map_range(n, |i| saa_hit(z, partner, i));
    Ok(hits.iter().filter(|&&h| h).count() as f64 / n as f64)
}

/// Mean over classes of the mean within-class pairwise distance.
pub fn cad(z: &Mat, labels: &[u8]) -> Result<f64> {
    let n = z.rows();
    check_labels(n, labels)?;
    let rows = par::map_range(n, |i| {
        let mut s = 0.0;
        for j in i + 1..n {
            if labels[j] == labels[i] {
                s += dist(z.row(i), z.row(j));
            }
        }
        s
    });
    let mut sums = [0.0; 2];
    for (i, s) in rows.into_iter().enumerate() {
        sums[labels[i] as usize] += s;
    }
    let counts = class_counts(labels);
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..2 {
        if counts[c] >= 2 {
            let pairs = counts[c] * (counts[c] - 1) / 2;
            total += sums[c] / pairs as f64;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(Error::batch("cad needs a class with at least two views"));
    }
    Ok(total / classes as f64)
}

fn class_counts(labels: &[u8]) -> [usize; 2] {
    let mut c = [0; 2];
    for &l in labels {
        c[l as usize] += 1;
    }
    c
}

/// Neighborhood size for CAC: `max(1, round(r·n))`, capped at `n - 1`.
pub fn r_count(r_fraction: f64, views: usize) -> usize {
    ((r_fraction * views as f64).round() as usize)
        .max(1)
        .min(views.saturating_sub(1))
}

fn tie_ranks(n: usize, tie: TieBreak) -> Vec<usize> {
    match tie {
        TieBreak::Index => (0..n).collect(),
        TieBreak::Random(seed) => {
            let mut order: Vec<usize> = (0..n).collect();
            RngStream::new(seed, crate::sphere::streams::EVAL).shuffle(&mut order);
            let mut rank = vec![0; n];
            for (r, &v) in order.iter().enumerate() {
                rank[v] = r;
            }
            rank
        }
    }
}

fn cac_row(z: &Mat, labels: &[u8], i: usize, r: usize, rank: &[usize]) -> f64 {
    let zi = z.row(i);
    let mut others: Vec<(f64, usize, usize)> = (0..z.rows())
        .filter(|&j| j != i)
        .map(|j| (dist(zi, z.row(j)), rank[j], j))
        .collect();
    let key = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    if r < others.len() {
        others.select_nth_unstable_by(r - 1, key);
    }
    let same = others[..r].iter().filter(|o| labels[o.2] == labels[i]).count();
    same as f64 / r as f64
}

/// Mean fraction of same-label views among each view's `r` nearest others.
pub fn cac(z: &Mat, labels: &[u8], r_fraction: f64, tie: TieBreak) -> Result<f64> {
    let n = z.rows();
    check_labels(n, labels)?;
    if n < 2 {
        return Err(Error::batch("cac needs at least two views"));
    }
    if !(r_fraction > 0.0 && r_fraction < 1.0) {
        return Err(Error::config(format!("r-fraction must lie in (0, 1), got {r_fraction}")));
    }
    let r = r_count(r_fraction, n);
    let rank = tie_ranks(n, tie);
    let rows = par::map_range(n, |i| cac_row(z, labels, i, r, &rank));
    Ok(par::ordered_sum(&rows) / n as f64)
}

/// Log of the mean Gaussian potential `exp(-||z_i - z_j||²)` over distinct pairs.
pub fn gpu(z: &Mat) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::batch("gpu needs at least two views"));
    }
    let rows = par::map_range(n, |i| {
        let mut s = 0.0;
        for j in i + 1..n {
            s += (-sq_dist(z.row(i), z.row(j))).exp();
        }
        s
    });
    let pairs = n * (n - 1) / 2;
    Ok((par::ordered_sum(&rows) / pairs as f64).ln())
}

/// Mean `z_i·z_j` over distinct pairs.
pub fn mean_cosine(z: &Mat) -> f64 {
    let n = z.rows();
    if n < 2 {
        return 1.0;
    }
    let mut sum = vec![0.0; z.cols()];
    for row in z.iter_rows() {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    (dot(&sum, &sum) - n as f64) / (n * (n - 1)) as f64
}

/// All five metrics from one pass over the rows.
pub fn full_report(
    z: &Mat,
    labels: &[u8],
    partner: &[usize],
    r_fraction: f64,
    tie: TieBreak,
) -> Result<MetricReport> {
    let n = z.rows();
    check_partner(n, partner)?;
    check_labels(n, labels)?;
    if n < 4 {
        return Err(Error::batch("metrics need at least two samples"));
    }
    if !(r_fraction > 0.0 && r_fraction < 1.0) {
        return Err(Error::config(format!("r-fraction must lie in (0, 1), got {r_fraction}")));
    }
    let r = r_count(r_fraction, n);
    let rank = tie_ranks(n, tie);

    struct Row {
        saa: bool,
        cac: f64,
        cad: f64,
        gpu: f64,
    }
    let rows = par::map_range(n, |i| {
        let zi = z.row(i);
        let mut cad = 0.0;
        let mut gpu = 0.0;
        for j in i + 1..n {
            if labels[j] == labels[i] {
                cad += dist(zi, z.row(j));
            }
            gpu += (-sq_dist(zi, z.row(j))).exp();
        }
        Row {
            saa: saa_hit(z, partner, i),
            cac: cac_row(z, labels, i, r, &rank),
            cad,
            gpu,
        }
    });

    let mut cad_sums = [0.0; 2];
    let mut gpu_sum = 0.0;
    let mut cac_sum = 0.0;
    let mut hits = 0usize;
    for (i, row) in rows.iter().enumerate() {
        cad_sums[labels[i] as usize] += row.cad;
        gpu_sum += row.gpu;
        cac_sum += row.cac;
        hits += usize::from(row.saa);
    }
    let counts = class_counts(labels);
    let mut cad_total = 0.0;
    let mut classes = 0;
    for c in 0..2 {
        if counts[c] >= 2 {
            cad_total += cad_sums[c] / (counts[c] * (counts[c] - 1) / 2) as f64;
            classes += 1;
        }
    }

    Ok(MetricReport {
        sad: sad(z, partner)?,
        saa: hits as f64 / n as f64,
        cad: if classes > 0 { cad_total / classes as f64 } else { 0.0 },
        cac: cac_sum / n as f64,
        gpu: (gpu_sum / (n * (n - 1) / 2) as f64).ln(),
        r_fraction,
        r_count: r,
        views: n,
        class0_views: counts[0],
        class1_views: counts[1],
        mean_cosine: mean_cosine(z),
    })
}
