//! Unit-hypersphere geometry, a row-major matrix type, and seeded RNG streams.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Norms at or below this are rejected by [`normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::config(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }
}

/// A point on the unit sphere together with the raw vector it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    w: Vec<f64>,
    z: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// `||w||₂`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance by direct subtraction.
#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn normalize(w: &[f64]) -> Result<Embedding> {
    let n = norm(w);
    if !(n > NORM_FLOOR) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(Embedding {
        w: w.to_vec(),
        z: w.iter().map(|x| x / n).collect(),
        norm: n,
    })
}

/// Normalizes every row of `w`, returning the unit rows and the original norms.
pub fn normalize_rows(w: &Mat) -> Result<(Mat, Vec<f64>)> {
    let norms: Vec<f64> = w.iter_rows().map(norm).collect();
    if let Some(&n) = norms.iter().find(|n| !(**n > NORM_FLOOR)) {
        return Err(Error::DegenerateVector { norm: n });
    }
    let mut z = w.clone();
    for (i, n) in norms.iter().enumerate() {
        z.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok((z, norms))
}

/// Unit embeddings of a set of views together with the norms of their
/// pre-normalization vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    z: Mat,
    norms: Vec<f64>,
}

impl EmbeddingSet {
    pub fn from_w(w: &Mat) -> Result<Self> {
        let (z, norms) = normalize_rows(w)?;
        Ok(Self { z, norms })
    }

    /// Treats the rows as already unit-normalized outputs with `||w|| = 1`.
    pub fn from_unit(z: Mat) -> Result<Self> {
        for (i, row) in z.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("row {i} has norm {n}, expected 1")));
            }
        }
        let norms = vec![1.0; z.rows()];
        Ok(Self { z, norms })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &Mat {
        &self.z
    }

    pub fn zi(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    /// `||w_i||` per view.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        let z = self.z.row(i).to_vec();
        let w = z.iter().map(|x| x * self.norms[i]).collect();
        Embedding {
            w,
            z,
            norm: self.norms[i],
        }
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        (0..self.len()).map(|i| self.embedding(i)).collect()
    }
}

/// Entry `(i, j)` is `||a_i - b_j||² = 2 - 2 a_i·b_j` for unit rows.
pub fn pairwise_sq_dist(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.cols(), "dimension mismatch");
    let mut out = Mat::zeros(a.rows(), b.rows());
    let same = std::ptr::eq(a, b) || a == b;
    let width = b.rows();
    par::fill_rows(out.as_mut_slice(), width, |i, row| {
        let ai = a.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if same && i == j {
                0.0
            } else {
                (2.0 - 2.0 * dot(ai, b.row(j))).max(0.0)
            };
        }
    });
    out
}

/// Removes the component of `g` along the unit vector `z`.
pub fn tangent_project(z: &[f64], g: &[f64]) -> Vec<f64> {
    let c = dot(g, z);
    g.iter().zip(z).map(|(gi, zi)| gi - c * zi).collect()
}

/// Seeded, splittable random stream.
///
/// Each `(seed, stream)` pair selects an independent ChaCha8 keystream, so
/// samplers, initializers and augmenters never share draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const LOSS: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const PROTOTYPE: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const TEST_DATA: u64 = 9;
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        rand::Rng::random_range(&mut self.rng, 0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// A vector of `d` independent standard normals.
    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.normal()).collect()
    }

    /// A uniformly random unit vector.
    pub fn unit_vec(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(d);
            let n = norm(&v);
            if n > 1e-8 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}
