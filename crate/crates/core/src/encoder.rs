//! Encoders mapping views to pre-normalization vectors `w`.
//!
//! Two backends: a free table holding one trainable row per global view id,
//! and a small tanh MLP with hand-written backprop.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ViewBatch;
use crate::error::{Error, Result};
use crate::losses::LossOutput;
use crate::par;
use crate::sphere::{dot, EmbeddingSet, Mat, RngStream};

/// Target mean cosine similarity for near-collapsed initialization.
pub const COLLAPSE_TARGET: f64 = 0.99;
/// Default noise scale for near-collapsed initialization.
pub const DEFAULT_ETA: f64 = 0.05;
/// Views per chunk when accumulating MLP gradients.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum Backend {
    FreeTable { views: usize, dim: usize },
    Mlp { input: usize, hidden: Vec<usize>, output: usize },
}

impl Backend {
    pub fn mlp(input: usize, output: usize) -> Self {
        Backend::Mlp {
            input,
            hidden: vec![64, 64],
            output,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Backend::FreeTable { dim, .. } => *dim,
            Backend::Mlp { output, .. } => *output,
        }
    }

    fn widths(&self) -> Vec<usize> {
        match self {
            Backend::FreeTable { .. } => Vec::new(),
            Backend::Mlp {
                input,
                hidden,
                output,
            } => std::iter::once(*input)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(*output))
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Backend::FreeTable { views, dim } => {
                if *views == 0 || *dim < 2 {
                    return Err(Error::config("free table needs views >= 1 and dim >= 2"));
                }
            }
            Backend::Mlp { .. } => {
                if self.widths().contains(&0) || self.output_dim() < 2 {
                    return Err(Error::config("mlp layer widths must be positive, output >= 2"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = self
            .weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect();
        let post = match self.activation {
            Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
            Activation::Identity => pre.clone(),
        };
        (pre, post)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum EncoderParams {
    FreeTable { table: Mat },
    Mlp { layers: Vec<Layer> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub checked: usize,
    pub h: f64,
}

impl EncoderParams {
    pub fn free_table(table: Mat) -> Result<Self> {
        for (i, row) in table.iter_rows().enumerate() {
            if crate::sphere::norm(row) <= crate::sphere::NORM_FLOOR {
                return Err(Error::config(format!("free-table row {i} is degenerate")));
            }
        }
        Ok(EncoderParams::FreeTable { table })
    }

    pub fn mlp(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("mlp needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() {
                return Err(Error::config(format!("layer {k}: bias/weight shape mismatch")));
            }
            if k > 0 && layers[k - 1].weights.rows() != l.weights.cols() {
                return Err(Error::config(format!("layer {k}: input width does not chain")));
            }
        }
        Ok(EncoderParams::Mlp { layers })
    }

    /// Gaussian init: free-table rows `N(0, I)`, MLP weights `N(0, 1/fan_in)`
    /// with zero biases.
    pub fn standard(backend: &Backend, rng: &mut RngStream) -> Result<Self> {
        backend.validate()?;
        match backend {
            Backend::FreeTable { views, dim } => {
                let data = (0..views * dim).map(|_| rng.normal()).collect();
                Self::free_table(Mat::from_vec(*views, *dim, data)?)
            }
            Backend::Mlp { .. } => {
                let widths = backend.widths();
                let last = widths.len() - 2;
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(k, w)| {
                        let scale = 1.0 / (w[0] as f64).sqrt();
                        let data = (0..w[0] * w[1]).map(|_| scale * rng.normal()).collect();
                        Layer {
                            weights: Mat::from_vec(w[1], w[0], data).expect("shape"),
                            bias: vec![0.0; w[1]],
                            activation: if k == last {
                                Activation::Identity
                            } else {
                                Activation::Tanh
                            },
                        }
                    })
                    .collect();
                Self::mlp(layers)
            }
        }
    }

    /// Initialization whose outputs are nearly identical.
    ///
    /// Free table: rows `c + (η/√d)·ξ` for a random unit `c`. MLP: standard
    /// hidden layers, a last layer with weights `N(0, η²/(fan_in·d))` and bias
    /// `c`. Fails with [`Error::InitFailed`] if the mean pairwise cosine over
    /// the reference batch (the first 256 rows, or 256 Gaussian inputs for the
    /// MLP when none are given) is below [`COLLAPSE_TARGET`].
    pub fn init_near_collapsed(
        backend: &Backend,
        eta: f64,
        reference: Option<&Mat>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta <= 0.1) {
            return Err(Error::config(format!("eta must lie in (0, 0.1], got {eta}")));
        }
        backend.validate()?;
        let d = backend.output_dim();
        let c = rng.unit_vec(d);
        let noise = eta / (d as f64).sqrt();
        let params = match backend {
            Backend::FreeTable { views, .. } => {
                let mut table = Mat::zeros(*views, d);
                for i in 0..*views {
                    for (k, ck) in c.iter().enumerate() {
                        table.set(i, k, ck + noise * rng.normal());
                    }
                }
                Self::free_table(table)?
            }
            Backend::Mlp { .. } => {
                let mut params = Self::standard(backend, rng)?;
                if let EncoderParams::Mlp { layers } = &mut params {
                    let last = layers.last_mut().expect("nonempty");
                    let fan_in = last.weights.cols() as f64;
                    let scale = eta / (fan_in * d as f64).sqrt();
                    last.weights
                        .as_mut_slice()
                        .iter_mut()
                        .for_each(|w| *w = scale * rng.normal());
                    last.bias = c;
                }
                params
            }
        };

        let similarity = match (&params, reference) {
            (EncoderParams::FreeTable { table }, _) => {
                let n = table.rows().min(256);
                let idx: Vec<usize> = (0..n).collect();
                mean_pairwise_cosine(&EmbeddingSet::from_w(&table.select_rows(&idx))?)
            }
            (EncoderParams::Mlp { .. }, Some(inputs)) => {
                let n = inputs.rows().min(256);
                let idx: Vec<usize> = (0..n).collect();
                mean_pairwise_cosine(&params.encode_inputs(&inputs.select_rows(&idx))?)
            }
            (EncoderParams::Mlp { .. }, None) => {
                let m = params.input_dim().expect("mlp");
                let data = (0..256 * m).map(|_| rng.normal()).collect();
                mean_pairwise_cosine(&params.encode_inputs(&Mat::from_vec(256, m, data)?)?)
            }
        };
        if similarity < COLLAPSE_TARGET {
            return Err(Error::InitFailed {
                similarity,
                target: COLLAPSE_TARGET,
            });
        }
        Ok(params)
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderParams::FreeTable { table } => table.cols(),
            EncoderParams::Mlp { layers } => layers.last().expect("nonempty").weights.rows(),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            EncoderParams::FreeTable { .. } => None,
            EncoderParams::Mlp { layers } => Some(layers[0].weights.cols()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            EncoderParams::FreeTable { table } => table.as_slice().len(),
            EncoderParams::Mlp { layers } => layers.iter().map(Layer::num_params).sum(),
        }
    }

    /// Parameters in a fixed order: table rows, or per layer weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            EncoderParams::FreeTable { table } => table.as_slice().to_vec(),
            EncoderParams::Mlp { layers } => layers
                .iter()
                .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
                .collect(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        match self {
            EncoderParams::FreeTable { table } => table.as_mut_slice().copy_from_slice(flat),
            EncoderParams::Mlp { layers } => {
                let mut at = 0;
                for l in layers {
                    let nw = l.weights.as_slice().len();
                    l.weights.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
                    at += nw;
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(&flat[at..at + nb]);
                    at += nb;
                }
            }
        }
        Ok(())
    }

    /// Pre-normalization outputs for the views of a batch.
    pub fn forward_w(&self, batch: &ViewBatch) -> Result<Mat> {
        match self {
            EncoderParams::FreeTable { table } => {
                let ids: Vec<usize> = (0..batch.len()).map(|i| batch.global_view_id(i)).collect();
                if let Some(&bad) = ids.iter().find(|&&g| g >= table.rows()) {
                    return Err(Error::batch(format!(
                        "view id {bad} outside free table of {} rows",
                        table.rows()
                    )));
                }
                Ok(table.select_rows(&ids))
            }
            EncoderParams::Mlp { .. } => self.mlp_outputs(batch.views()),
        }
    }

    pub fn forward(&self, batch: &ViewBatch) -> Result<EmbeddingSet> {
        EmbeddingSet::from_w(&self.forward_w(batch)?)
    }

    fn mlp_outputs(&self, inputs: &Mat) -> Result<Mat> {
        let EncoderParams::Mlp { layers } = self else {
            unreachable!("mlp only")
        };
        if inputs.cols() != layers[0].weights.cols() {
            return Err(Error::batch(format!(
                "inputs have width {}, encoder expects {}",
                inputs.cols(),
                layers[0].weights.cols()
            )));
        }
        let d = self.output_dim();
        let mut out = Mat::zeros(inputs.rows(), d);
        par::fill_rows(out.as_mut_slice(), d, |i, row| {
            let mut x = inputs.row(i).to_vec();
            for l in layers {
                x = l.apply(&x).1;
            }
            row.copy_from_slice(&x);
        });
        Ok(out)
    }

    /// Embeddings of unaugmented inputs. For the free table, sample `s` is
    /// represented by `normalize(w_{2s} + w_{2s+1})` and `inputs` only fixes
    /// the sample count.
    pub fn encode_inputs(&self, inputs: &Mat) -> Result<EmbeddingSet> {
        match self {
            EncoderParams::FreeTable { table } => {
                let n = inputs.rows();
                if 2 * n > table.rows() {
                    return Err(Error::batch(format!(
                        "free table of {} rows cannot encode {n} samples",
                        table.rows()
                    )));
                }
                let d = table.cols();
                let mut w = Mat::zeros(n, d);
                for s in 0..n {
                    for k in 0..d {
                        w.set(s, k, table.get(2 * s, k) + table.get(2 * s + 1, k));
                    }
                }
                EmbeddingSet::from_w(&w)
            }
            EncoderParams::Mlp { .. } => EmbeddingSet::from_w(&self.mlp_outputs(inputs)?),
        }
    }

    /// Flat parameter gradient given `∂L/∂w` per view.
    pub fn backward(&self, batch: &ViewBatch, upstream: &Mat) -> Result<Vec<f64>> {
        if upstream.rows() != batch.len() || upstream.cols() != self.output_dim() {
            return Err(Error::batch("upstream gradient shape does not match the batch"));
        }
        match self {
            EncoderParams::FreeTable { table } => {
                let d = table.cols();
                let mut grad = vec![0.0; table.as_slice().len()];
                for i in 0..batch.len() {
                    let g = batch.global_view_id(i);
                    for (acc, u) in grad[g * d..(g + 1) * d].iter_mut().zip(upstream.row(i)) {
                        *acc += u;
                    }
                }
                Ok(grad)
            }
            EncoderParams::Mlp { layers } => {
                let inputs = batch.views();
                let chunks = batch.len().div_ceil(GRAD_CHUNK);
                let partials = par::map_range(chunks, |c| {
                    let mut grad = vec![0.0; self.num_params()];
                    let end = ((c + 1) * GRAD_CHUNK).min(batch.len());
                    for i in c * GRAD_CHUNK..end {
                        mlp_backprop(layers, inputs.row(i), upstream.row(i), &mut grad);
                    }
                    grad
                });
                let mut grad = vec![0.0; self.num_params()];
                for p in partials {
                    for (a, b) in grad.iter_mut().zip(p) {
                        *a += b;
                    }
                }
                Ok(grad)
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let params: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        match params {
            EncoderParams::FreeTable { table } => Self::free_table(table),
            EncoderParams::Mlp { layers } => Self::mlp(layers),
        }
    }

    /// Compares [`backward`](Self::backward) with central differences of
    /// `loss` on `coords` randomly chosen parameters that the batch touches.
    /// The error per coordinate is `|a - n| / max(|a|, |n|, 1e-2)`.
    pub fn gradcheck<F>(
        &self,
        batch: &ViewBatch,
        loss: F,
        coords: usize,
        rng: &mut RngStream,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&EmbeddingSet) -> Result<LossOutput>,
    {
        let h = 1e-6;
        let out = loss(&self.forward(batch)?)?;
        let analytic = self.backward(batch, &out.grad_w)?;

        let active: Vec<usize> = match self {
            EncoderParams::FreeTable { table } => {
                let d = table.cols();
                let mut rows: Vec<usize> = (0..batch.len()).map(|i| batch.global_view_id(i)).collect();
                rows.sort_unstable();
                rows.dedup();
                rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect()
            }
            EncoderParams::Mlp { .. } => (0..self.num_params()).collect(),
        };
        let picks = rng.choose_distinct(active.len(), coords.min(active.len()));

        let base = self.to_flat();
        let mut probe = self.clone();
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            checked: picks.len(),
            h,
        };
        let mut flat = base.clone();
        for p in picks {
            let k = active[p];
            flat[k] = base[k] + h;
            probe.set_flat(&flat)?;
            let up = loss(&probe.forward(batch)?)?.value;
            flat[k] = base[k] - h;
            probe.set_flat(&flat)?;
            let down = loss(&probe.forward(batch)?)?.value;
            flat[k] = base[k];
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            report.max_relative_error = report.max_relative_error.max(err);
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
        }
        Ok(report)
    }
}

fn mlp_backprop(layers: &[Layer], x: &[f64], upstream: &[f64], grad: &mut [f64]) {
    let mut acts = vec![x.to_vec()];
    let mut posts = Vec::with_capacity(layers.len());
    for l in layers {
        let (_, post) = l.apply(acts.last().expect("input"));
        posts.push(post.clone());
        acts.push(post);
    }
    let offsets: Vec<usize> = layers
        .iter()
        .scan(0, |at, l| {
            let o = *at;
            *at += l.num_params();
            Some(o)
        })
        .collect();

    let mut delta = upstream.to_vec();
    for (k, l) in layers.iter().enumerate().rev() {
        if l.activation == Activation::Tanh {
            for (dv, y) in delta.iter_mut().zip(&posts[k]) {
                *dv *= 1.0 - y * y;
            }
        }
        let input = &acts[k];
        let (rows, cols) = (l.weights.rows(), l.weights.cols());
        let base = offsets[k];
        for r in 0..rows {
            let dr = delta[r];
            if dr != 0.0 {
                let gw = &mut grad[base + r * cols..base + (r + 1) * cols];
                for (g, xi) in gw.iter_mut().zip(input) {
                    *g += dr * xi;
                }
            }
            grad[base + rows * cols + r] += dr;
        }
        if k > 0 {
            let mut next = vec![0.0; cols];
            for (r, w) in l.weights.iter_rows().enumerate() {
                for (n, wv) in next.iter_mut().zip(w) {
                    *n += delta[r] * wv;
                }
            }
            delta = next;
        }
    }
}

/// Mean of `z_i·z_j` over distinct pairs.
pub fn mean_pairwise_cosine(emb: &EmbeddingSet) -> f64 {
    crate::metrics::mean_cosine(emb.z())
}
