//! Synthetic imbalanced binary datasets, view augmentation and batch samplers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{Mat, RngStream};

/// Label used for the minority class by the generators.
pub const MINORITY_LABEL: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    inputs: Mat,
    labels: Vec<u8>,
    minority: u8,
    rho: f64,
}

impl LabeledDataset {
    /// Validates labels and derives the imbalance ratio from the minority count.
    pub fn new(inputs: Mat, labels: Vec<u8>, minority: u8) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::config(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::config("dataset needs at least 2 samples"));
        }
        if labels.iter().any(|&l| l > 1) || minority > 1 {
            return Err(Error::config("labels must be binary (0 or 1)"));
        }
        let n_min = labels.iter().filter(|&&l| l == minority).count();
        if n_min == 0 || n_min == labels.len() {
            return Err(Error::config("both classes must be nonempty"));
        }
        let rho = n_min as f64 / labels.len() as f64;
        Ok(Self {
            inputs,
            labels,
            minority,
            rho,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn minority(&self) -> u8 {
        self.minority
    }

    pub fn majority(&self) -> u8 {
        1 - self.minority
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn indices_of(&self, label: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn count_of(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Writes `id,label,x0..x{m-1}` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), self.labels[i].to_string()];
            rec.extend(self.input(i).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). The minority
    /// class is taken to be the rarer label.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let m = r
            .headers()?
            .iter()
            .filter(|h| h.starts_with('x'))
            .count();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != m + 2 {
                return Err(Error::config(format!(
                    "dataset row has {} fields, expected {}",
                    rec.len(),
                    m + 2
                )));
            }
            let label: u8 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad label {:?}", &rec[1])))?;
            let x = (2..m + 2)
                .map(|j| {
                    rec[j]
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad value {:?}", &rec[j])))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            rows.push(x);
        }
        let ones = labels.iter().filter(|&&l| l == 1).count();
        let minority = if ones * 2 <= labels.len() { 1 } else { 0 };
        Self::new(Mat::from_rows(&rows)?, labels, minority)
    }
}

/// Two isotropic Gaussian clusters placed `separation` apart along a random
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobGeometry {
    direction: Vec<f64>,
    separation: f64,
    spread: f64,
}

impl BlobGeometry {
    pub fn new(m: usize, separation: f64, spread: f64, rng: &mut RngStream) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        if !(separation >= 0.0) || !separation.is_finite() {
            return Err(Error::config("separation must be finite and >= 0"));
        }
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::config("spread must be finite and >= 0"));
        }
        Ok(Self {
            direction: rng.unit_vec(m),
            separation,
            spread,
        })
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    fn center(&self, label: u8) -> Vec<f64> {
        let s = if label == MINORITY_LABEL { 0.5 } else { -0.5 } * self.separation;
        self.direction.iter().map(|u| s * u).collect()
    }

    /// Draws a balanced pool, then subsamples the minority down to
    /// `round(rho * n)`, and shuffles sample order.
    pub fn sample(&self, n: usize, rho: f64, rng: &mut RngStream) -> Result<LabeledDataset> {
        if n < 4 {
            return Err(Error::config(format!("need n >= 4, got {n}")));
        }
        if !(rho > 0.0 && rho <= 0.5) {
            return Err(Error::config(format!("imbalance must lie in (0, 0.5], got {rho}")));
        }
        let n_min = (rho * n as f64).round() as usize;
        if n_min == 0 {
            return Err(Error::config(format!(
                "imbalance {rho} leaves no minority samples at n = {n}"
            )));
        }
        let n_maj = n - n_min;
        let m = self.dim();
        let mut draw = |label: u8, count: usize| -> Vec<Vec<f64>> {
            let c = self.center(label);
            (0..count)
                .map(|_| c.iter().map(|ci| ci + self.spread * rng.normal()).collect())
                .collect()
        };
        let majority = draw(1 - MINORITY_LABEL, n_maj);
        let mut minority = draw(MINORITY_LABEL, n_maj.max(n_min));
        minority.truncate(n_min);

        let mut items: Vec<(Vec<f64>, u8)> = majority
            .into_iter()
            .map(|x| (x, 1 - MINORITY_LABEL))
            .chain(minority.into_iter().map(|x| (x, MINORITY_LABEL)))
            .collect();
        rng.shuffle(&mut items);

        let mut inputs = Mat::zeros(n, m);
        let mut labels = Vec::with_capacity(n);
        for (i, (x, l)) in items.into_iter().enumerate() {
            inputs.row_mut(i).copy_from_slice(&x);
            labels.push(l);
        }
        LabeledDataset::new(inputs, labels, MINORITY_LABEL)
    }
}

pub fn generate_blobs(
    n: usize,
    rho: f64,
    m: usize,
    separation: f64,
    spread: f64,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    BlobGeometry::new(m, separation, spread, rng)?.sample(n, rho, rng)
}

/// `x + noise`, noise ~ N(0, sigma² I).
pub fn augment(x: &[f64], sigma: f64, rng: &mut RngStream) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|xi| xi + sigma * rng.normal()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    #[default]
    Uniform,
    Oversample,
    Undersample,
    GuaranteeMinority,
}

/// A multi-viewed batch: views `2k` and `2k + 1` are the two augmentations of
/// batch sample `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBatch {
    views: Mat,
    sample_ids: Vec<usize>,
    labels: Vec<u8>,
    partner: Vec<usize>,
}

impl ViewBatch {
    /// Builds a batch from per-view data, checking that the partner map is a
    /// symmetric perfect matching between views of the same sample.
    pub fn new(
        views: Mat,
        view_sample: Vec<usize>,
        labels: Vec<u8>,
        partner: Vec<usize>,
    ) -> Result<Self> {
        let n = views.rows();
        if view_sample.len() != n || labels.len() != n || partner.len() != n {
            return Err(Error::batch("view, sample, label and partner lengths differ"));
        }
        validate_pairing(&view_sample, &labels, &partner)?;
        Ok(Self {
            views,
            sample_ids: view_sample,
            labels,
            partner,
        })
    }

    /// Interleaved layout from per-sample view pairs.
    pub fn from_pairs(views: Mat, sample_ids: &[usize], sample_labels: &[u8]) -> Result<Self> {
        if views.rows() != 2 * sample_ids.len() || sample_ids.len() != sample_labels.len() {
            return Err(Error::batch("expected exactly two views per sample"));
        }
        let view_sample = sample_ids.iter().flat_map(|&s| [s, s]).collect();
        let labels = sample_labels.iter().flat_map(|&l| [l, l]).collect();
        let partner = (0..views.rows()).map(|i| i ^ 1).collect();
        Ok(Self {
            views,
            sample_ids: view_sample,
            labels,
            partner,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of samples (half the view count).
    pub fn batch_size(&self) -> usize {
        self.labels.len() / 2
    }

    pub fn views(&self) -> &Mat {
        &self.views
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn partner(&self) -> &[usize] {
        &self.partner
    }

    /// Dataset sample id of each view.
    pub fn view_sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// Which of its sample's two views this is (0 or 1).
    pub fn view_index(&self, i: usize) -> usize {
        usize::from(self.partner[i] < i)
    }

    /// Global view id `2 * sample + view_index`, used by the free-table
    /// encoder to address its rows.
    pub fn global_view_id(&self, i: usize) -> usize {
        2 * self.sample_ids[i] + self.view_index(i)
    }
}

pub(crate) fn validate_pairing(samples: &[usize], labels: &[u8], partner: &[usize]) -> Result<()> {
    let n = partner.len();
    if !n.is_multiple_of(2) {
        return Err(Error::batch("odd number of views"));
    }
    for (i, &p) in partner.iter().enumerate() {
        if p >= n || p == i {
            return Err(Error::batch(format!("view {i} has invalid partner {p}")));
        }
        if partner[p] != i {
            return Err(Error::batch(format!("partner map is not symmetric at view {i}")));
        }
        if samples[p] != samples[i] || labels[p] != labels[i] {
            return Err(Error::batch(format!(
                "view {i} and its partner belong to different samples"
            )));
        }
    }
    Ok(())
}

/// Chooses sample ids for one batch of `b` samples. Undersampling caps each
/// class at the minority count, so the returned batch may be smaller than `b`.
pub fn draw_samples(
    ds: &LabeledDataset,
    b: usize,
    mode: SamplerMode,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::config(format!("batch size must be >= 2, got {b}")));
    }
    let n = ds.len();
    let minority = ds.indices_of(ds.minority());
    let majority = ds.indices_of(ds.majority());
    match mode {
        SamplerMode::Uniform => {
            if b > n {
                return Err(Error::config(format!("batch size {b} exceeds dataset size {n}")));
            }
            Ok(rng.choose_distinct(n, b))
        }
        SamplerMode::GuaranteeMinority => {
            if b > n {
                return Err(Error::config(format!("batch size {b} exceeds dataset size {n}")));
            }
            const MAX_REDRAWS: usize = 100_000;
            for _ in 0..MAX_REDRAWS {
                let ids = rng.choose_distinct(n, b);
                if ids.iter().any(|&i| ds.labels()[i] == ds.minority()) {
                    return Ok(ids);
                }
            }
            Err(Error::config(format!(
                "no minority sample after {MAX_REDRAWS} redraws at batch size {b}"
            )))
        }
        SamplerMode::Oversample => {
            let k_min = b / 2;
            let k_maj = b - k_min;
            if k_maj > majority.len() {
                return Err(Error::config(format!(
                    "oversampling needs {k_maj} majority samples, dataset has {}",
                    majority.len()
                )));
            }
            let mut ids: Vec<usize> = (0..k_min)
                .map(|_| minority[rng.index(minority.len())])
                .collect();
            ids.extend(rng.choose_distinct(majority.len(), k_maj).into_iter().map(|j| majority[j]));
            Ok(ids)
        }
        SamplerMode::Undersample => {
            let k = (b / 2).min(minority.len());
            let mut ids: Vec<usize> = rng
                .choose_distinct(minority.len(), k)
                .into_iter()
                .map(|j| minority[j])
                .collect();
            ids.extend(rng.choose_distinct(majority.len(), k).into_iter().map(|j| majority[j]));
            Ok(ids)
        }
    }
}

/// Materializes two augmented views per sample id.
pub fn build_views(
    ds: &LabeledDataset,
    ids: &[usize],
    sigma_aug: f64,
    rng: &mut RngStream,
) -> Result<ViewBatch> {
    if !(sigma_aug >= 0.0) {
        return Err(Error::config("augmentation noise must be >= 0"));
    }
    let mut views = Mat::zeros(2 * ids.len(), ds.dim());
    for (k, &s) in ids.iter().enumerate() {
        for v in 0..2 {
            let x = augment(ds.input(s), sigma_aug, rng);
            views.row_mut(2 * k + v).copy_from_slice(&x);
        }
    }
    let labels: Vec<u8> = ids.iter().map(|&s| ds.labels()[s]).collect();
    ViewBatch::from_pairs(views, ids, &labels)
}

pub fn sample_batch(
    ds: &LabeledDataset,
    b: usize,
    mode: SamplerMode,
    sigma_aug: f64,
    sampler_rng: &mut RngStream,
    augment_rng: &mut RngStream,
) -> Result<ViewBatch> {
    let ids = draw_samples(ds, b, mode, sampler_rng)?;
    build_views(ds, &ids, sigma_aug, augment_rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{dist, streams};

    fn blobs(n: usize, rho: f64, seed: u64) -> LabeledDataset {
        generate_blobs(n, rho, 4, 6.0, 1.0, &mut RngStream::new(seed, streams::DATA)).unwrap()
    }

    #[test]
    fn minority_count_rounds() {
        let ds = blobs(100, 0.05, 1);
        assert_eq!(ds.count_of(ds.minority()), 5);
        assert_eq!(ds.count_of(ds.majority()), 95);
        assert!((ds.rho() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_separation_shares_center() {
        let g = BlobGeometry::new(3, 0.0, 1.0, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(g.center(0), g.center(1));
    }

    #[test]
    fn invalid_blob_configs() {
        let mut rng = RngStream::new(0, 0);
        assert!(generate_blobs(3, 0.5, 2, 1.0, 1.0, &mut rng).is_err());
        assert!(generate_blobs(100, 0.0, 2, 1.0, 1.0, &mut rng).is_err());
        assert!(generate_blobs(100, 0.6, 2, 1.0, 1.0, &mut rng).is_err());
        assert!(generate_blobs(100, 0.1, 2, -1.0, 1.0, &mut rng).is_err());
        assert!(generate_blobs(10, 0.01, 2, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(blobs(200, 0.1, 9), blobs(200, 0.1, 9));
        assert_ne!(blobs(200, 0.1, 9), blobs(200, 0.1, 10));
    }

    #[test]
    fn blob_centers_are_separation_apart() {
        let g = BlobGeometry::new(5, 3.0, 1.0, &mut RngStream::new(4, 0)).unwrap();
        assert!((dist(&g.center(0), &g.center(1)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn augment_zero_noise_copies() {
        let x = [1.0, -2.0, 3.5];
        assert_eq!(augment(&x, 0.0, &mut RngStream::new(0, 0)), x.to_vec());
    }

    #[test]
    fn augment_replays() {
        let x = [0.1; 6];
        let a = augment(&x, 0.3, &mut RngStream::new(5, 4));
        let b = augment(&x, 0.3, &mut RngStream::new(5, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn augment_noise_energy() {
        let m = 8;
        let sigma = 0.25;
        let x = vec![0.0; m];
        let mut rng = RngStream::new(77, streams::AUGMENT);
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| {
                let y = augment(&x, sigma, &mut rng);
                y.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            / draws as f64;
        let expected = m as f64 * sigma * sigma;
        assert!((mean - expected).abs() / expected < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn oversample_is_balanced() {
        let ds = blobs(100, 0.05, 2);
        let ids = draw_samples(&ds, 10, SamplerMode::Oversample, &mut RngStream::new(1, 3)).unwrap();
        let minority = ids.iter().filter(|&&i| ds.labels()[i] == ds.minority()).count();
        assert_eq!(ids.len(), 10);
        assert_eq!(minority, 5);
    }

    #[test]
    fn undersample_caps_at_minority() {
        let ds = blobs(100, 0.05, 2);
        let ids = draw_samples(&ds, 64, SamplerMode::Undersample, &mut RngStream::new(1, 3)).unwrap();
        assert_eq!(ids.len(), 10);
        let minority = ids.iter().filter(|&&i| ds.labels()[i] == ds.minority()).count();
        assert_eq!(minority, 5);
    }

    #[test]
    fn uniform_full_batch_covers_every_sample() {
        let ds = blobs(50, 0.1, 3);
        let mut ids = draw_samples(&ds, 50, SamplerMode::Uniform, &mut RngStream::new(0, 3)).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_rejects_oversized_batch() {
        let ds = blobs(50, 0.1, 3);
        assert!(draw_samples(&ds, 51, SamplerMode::Uniform, &mut RngStream::new(0, 3)).is_err());
        assert!(draw_samples(&ds, 1, SamplerMode::Uniform, &mut RngStream::new(0, 3)).is_err());
    }

    #[test]
    fn guarantee_minority_always_has_minority() {
        let ds = blobs(2000, 0.01, 4);
        let mut rng = RngStream::new(8, 3);
        for _ in 0..1000 {
            let ids = draw_samples(&ds, 64, SamplerMode::GuaranteeMinority, &mut rng).unwrap();
            assert!(ids.iter().any(|&i| ds.labels()[i] == ds.minority()));
        }
    }

    #[test]
    fn uniform_batches_match_class_ratio() {
        let ds = blobs(1000, 0.1, 5);
        let mut rng = RngStream::new(3, 3);
        let batches = 1000;
        let b = 50;
        let total: usize = (0..batches)
            .map(|_| {
                draw_samples(&ds, b, SamplerMode::Uniform, &mut rng)
                    .unwrap()
                    .iter()
                    .filter(|&&i| ds.labels()[i] == ds.minority())
                    .count()
            })
            .sum();
        let p = total as f64 / (batches * b) as f64;
        // Hypergeometric per batch; the binomial standard error bounds it.
        let se = (0.1 * 0.9 / (batches * b) as f64).sqrt();
        assert!((p - 0.1).abs() < 3.0 * se, "ratio {p}");
    }

    #[test]
    fn batch_views_pair_up() {
        let ds = blobs(100, 0.2, 6);
        let batch = sample_batch(
            &ds,
            16,
            SamplerMode::Oversample,
            0.1,
            &mut RngStream::new(0, 3),
            &mut RngStream::new(0, 4),
        )
        .unwrap();
        assert_eq!(batch.len(), 32);
        for i in 0..batch.len() {
            let p = batch.partner()[i];
            assert_eq!(batch.partner()[p], i);
            assert_eq!(batch.view_sample_ids()[p], batch.view_sample_ids()[i]);
            assert_ne!(batch.view_index(i), batch.view_index(p));
            assert_eq!(
                batch.global_view_id(i) / 2,
                batch.view_sample_ids()[i]
            );
        }
        let mut counts = std::collections::BTreeMap::new();
        for &s in batch.view_sample_ids() {
            *counts.entry(s).or_insert(0usize) += 1;
        }
        assert!(counts.values().all(|c| c % 2 == 0));
    }

    #[test]
    fn bad_pairing_is_rejected() {
        let views = Mat::zeros(4, 2);
        let err = ViewBatch::new(views, vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![1, 2, 3, 0]);
        assert!(matches!(err, Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn csv_round_trip() {
        let ds = blobs(40, 0.25, 7);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,label,x0,x1,x2,x3\n"));
        assert!(!text.contains('\r'));
        let back = LabeledDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }
}
