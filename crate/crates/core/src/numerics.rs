//! Dense row-major matrices, keyed random streams and parameter initialization.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default threshold below which a row is treated as degenerate by [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} × {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ × other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("({}x{})ᵀ × {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self × otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{}x{} × ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("bias {}x{} for {}-column matrix", bias.rows, bias.cols, self.cols),
            ));
        }
        let cols = self.cols;
        if cols == 0 {
            return Ok(());
        }
        for row in self.data.chunks_exact_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 × cols` matrix.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rows scaled to unit Euclidean norm, with the original norms retained for backward passes.
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub rows: Matrix,
    pub norms: Vec<f64>,
    /// Rows whose norm fell at or below eps; these are zeroed in `rows`.
    pub degenerate: Vec<usize>,
}

pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> NormalizedRows {
    let mut rows = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    let mut degenerate = Vec::new();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        norms.push(n);
        let row = rows.row_mut(i);
        if n <= eps {
            row.iter_mut().for_each(|v| *v = 0.0);
            degenerate.push(i);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    NormalizedRows {
        rows,
        norms,
        degenerate,
    }
}

/// Identity of a random stream. Streams with equal ids replay identical draws.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub seed: u64,
    pub domain: String,
    pub client: u64,
    pub round: u64,
}

/// A ChaCha stream whose key is a hash of its [`StreamId`].
///
/// Every consumer of randomness (partitioning, initialization, each client's
/// local update in each round) draws from its own stream, so results do not
/// depend on the order in which parallel tasks are scheduled.
#[derive(Debug, Clone)]
pub struct RngStream {
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, domain: &str, client: u64, round: u64) -> Self {
        let id = StreamId {
            seed,
            domain: domain.to_owned(),
            client,
            round,
        };
        let mut h = Sha256::new();
        h.update(b"repper-rng-v1");
        h.update(seed.to_le_bytes());
        h.update((domain.len() as u64).to_le_bytes());
        h.update(domain.as_bytes());
        h.update(client.to_le_bytes());
        h.update(round.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self {
            id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn id(&self) -> &StreamId {
        &self.id
    }

    /// A child stream keyed under the same seed with a sub-domain label.
    pub fn derive(&self, domain: &str, client: u64, round: u64) -> RngStream {
        RngStream::new(
            self.id.seed,
            &format!("{}/{}", self.id.domain, domain),
            client,
            round,
        )
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// U(−√(1/fan_in), √(1/fan_in)).
    UniformFanIn,
}

/// Draws a `fan_in × fan_out` matrix.
pub fn init_params(fan_in: usize, fan_out: usize, scheme: InitScheme, rng: &mut RngStream) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::shape(
            "init_params",
            format!("zero dimension in {fan_in}x{fan_out}"),
        ));
    }
    match scheme {
        InitScheme::UniformFanIn => {
            let bound = (1.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Matrix::new(fan_in, fan_out, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), b);

        let r = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, "test", 0, 0);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = triple_loop(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = a.transpose().matmul_tn(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        for ((x, y), z) in tn.as_slice().iter().zip(nt.as_slice()).zip(slow.as_slice()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = l2_normalize_rows(&m, NORM_EPS);
        assert!((n.rows.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.rows.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(n.degenerate.is_empty());

        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&m, NORM_EPS).rows, m);

        let m = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m, 1e-12);
        assert_eq!(n.rows.as_slice(), &[0.0, 0.0]);
        assert_eq!(n.degenerate, vec![0]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(
            100,
            20,
            InitScheme::UniformFanIn,
            &mut RngStream::new(1, "init", 0, 0),
        )
        .unwrap();
        let b = init_params(
            100,
            20,
            InitScheme::UniformFanIn,
            &mut RngStream::new(1, "init", 0, 0),
        )
        .unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.1));
        assert!(init_params(
            0,
            3,
            InitScheme::UniformFanIn,
            &mut RngStream::new(1, "init", 0, 0)
        )
        .is_err());
    }

    #[test]
    fn init_sample_mean_is_centered() {
        // U(-b, b) has σ = b/√3; the mean of n draws has standard error σ/√n.
        let fan_in = 100;
        let m = init_params(
            fan_in,
            1000,
            InitScheme::UniformFanIn,
            &mut RngStream::new(3, "init", 0, 0),
        )
        .unwrap();
        let n = m.len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let sigma = (1.0 / fan_in as f64).sqrt() / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn distinct_stream_ids_diverge() {
        let mut a = RngStream::new(1, "crl", 0, 0);
        let mut b = RngStream::new(1, "crl", 1, 0);
        let mut c = RngStream::new(1, "crl", 0, 1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert!(x != y && x != z && y != z);
    }
}
