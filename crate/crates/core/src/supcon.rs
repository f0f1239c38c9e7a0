//! Supervised contrastive loss over augmented batches, with analytic gradients.
//!
//! For an anchor `j` with candidates `A(j)` (every other row), positives
//! `P(j)` (same label) and negatives `N(j) = A(j) \ P(j)`:
//!
//! ```text
//! ℓ_j = −log( (1/|P(j)|) Σ_{p∈P(j)} exp(z_j·z_p/τ) / Σ_{a∈A(j)} exp(z_j·z_a/τ) )
//! ```
//!
//! Writing `P_ja` for the softmax of `z_j·z_a/τ` over `A(j)` and `X_jp` for the
//! softmax over `P(j)`, the partial w.r.t. the anchor embedding is
//!
//! ```text
//! ∂ℓ_j/∂z_j = (1/τ) ( Σ_p z_p (P_jp − X_jp) + Σ_n z_n P_jn )
//! ```
//!
//! and `∂ℓ_j/∂r_j = (1/‖r_j‖)(I − z_j z_jᵀ) ∂ℓ_j/∂z_j` for `z_j = r_j/‖r_j‖`.
//! Because every `z_k` also appears inside the other anchors' terms, the
//! gradient of the batch loss w.r.t. `z_k` adds `(1/τ) Σ_j z_j W_jk` to the
//! anchor partial, where `W_jk = P_jk − [k∈P(j)] X_jk`. Training uses that
//! total gradient; the anchor-only partials are kept for analysis.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, Matrix, RngStream, NORM_EPS};

/// Image-grid layout for flip/shift augmentations, features stored channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Mirror left-right with probability 1/2.
    pub flip: bool,
    /// Translate by up to this many pixels per axis, zero-filling the border.
    pub shift_radius: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Std-dev of additive per-feature gaussian noise.
    pub noise_sigma: f64,
    /// Probability of zeroing each feature.
    pub mask_prob: f64,
    #[serde(default)]
    pub image: Option<ImageGrid>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            mask_prob: 0.1,
            image: None,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            image: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma {} must be ≥ 0",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask probability {} not in [0,1]",
                self.mask_prob
            )));
        }
        if let Some(img) = &self.image {
            let n = img.channels * img.height * img.width;
            if n != dim {
                return Err(Error::Config(format!(
                    "image grid {}x{}x{} = {n} does not match feature dim {dim}",
                    img.channels, img.height, img.width
                )));
            }
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], out: &mut [f64], rng: &mut RngStream) {
        out.copy_from_slice(x);
        if let Some(img) = &self.image {
            augment_grid(img, x, out, rng);
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            for v in out.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        if self.mask_prob > 0.0 {
            for v in out.iter_mut() {
                if rng.uniform(0.0, 1.0) < self.mask_prob {
                    *v = 0.0;
                }
            }
        }
    }
}

fn augment_grid(img: &ImageGrid, x: &[f64], out: &mut [f64], rng: &mut RngStream) {
    let flip = img.flip && rng.uniform(0.0, 1.0) < 0.5;
    let r = img.shift_radius as i64;
    let (dy, dx) = if r > 0 {
        let span = (2 * r + 1) as f64;
        (
            (rng.uniform(0.0, span) as i64).min(2 * r) - r,
            (rng.uniform(0.0, span) as i64).min(2 * r) - r,
        )
    } else {
        (0, 0)
    };
    let (h, w) = (img.height as i64, img.width as i64);
    for c in 0..img.channels {
        let base = c * img.height * img.width;
        for y in 0..h {
            for xx in 0..w {
                let sy = y - dy;
                let mut sx = xx - dx;
                if flip {
                    sx = w - 1 - sx;
                }
                let v = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                    x[base + (sy * w + sx) as usize]
                } else {
                    0.0
                };
                out[base + (y * w + xx) as usize] = v;
            }
        }
    }
}

/// One augmented view per sample, row order preserved.
pub fn augment_once(samples: &Matrix, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Matrix> {
    policy.validate(samples.cols())?;
    let mut out = Matrix::zeros(samples.rows(), samples.cols());
    for k in 0..samples.rows() {
        policy.apply(samples.row(k), out.row_mut(k), rng);
    }
    Ok(out)
}

/// Two independent views of every sample: rows `2k` and `2k+1` come from input row `k`.
pub fn augment_twice(
    samples: &Matrix,
    labels: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut RngStream,
) -> Result<(Matrix, Vec<usize>)> {
    if samples.rows() == 0 {
        return Err(Error::Data("cannot augment an empty batch".into()));
    }
    if labels.len() != samples.rows() {
        return Err(Error::shape(
            "augment_twice",
            format!("{} labels for {} samples", labels.len(), samples.rows()),
        ));
    }
    policy.validate(samples.cols())?;
    let mut out = Matrix::zeros(2 * samples.rows(), samples.cols());
    let mut out_labels = Vec::with_capacity(2 * labels.len());
    for (k, &y) in labels.iter().enumerate() {
        for view in 0..2 {
            policy.apply(samples.row(k), out.row_mut(2 * k + view), rng);
            out_labels.push(y);
        }
    }
    Ok((out, out_labels))
}

/// Unit-norm embeddings with labels and temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    z: Matrix,
    labels: Vec<usize>,
    tau: f64,
    degenerate: Vec<bool>,
}

impl ContrastiveBatch {
    /// Rows of `z` must be unit-norm within 1e-9.
    pub fn new(z: Matrix, labels: Vec<usize>, tau: f64) -> Result<Self> {
        let degenerate = vec![false; z.rows()];
        Self::build(z, labels, tau, degenerate)
    }

    /// Normalizes raw features; rows with norm ≤ eps are zeroed and flagged.
    /// Returns the batch and the pre-normalization norms.
    pub fn from_features(r: &Matrix, labels: Vec<usize>, tau: f64) -> Result<(Self, Vec<f64>)> {
        let n = l2_normalize_rows(r, NORM_EPS);
        let mut degenerate = vec![false; r.rows()];
        for &i in &n.degenerate {
            degenerate[i] = true;
        }
        Ok((Self::build(n.rows, labels, tau, degenerate)?, n.norms))
    }

    fn build(z: Matrix, labels: Vec<usize>, tau: f64, degenerate: Vec<bool>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if labels.len() != z.rows() {
            return Err(Error::shape(
                "ContrastiveBatch",
                format!("{} labels for {} rows", labels.len(), z.rows()),
            ));
        }
        for (i, row) in z.iter_rows().enumerate() {
            if degenerate[i] {
                continue;
            }
            let n2 = dot(row, row);
            if (n2.sqrt() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "row {i} has norm {}, expected 1",
                    n2.sqrt()
                )));
            }
        }
        Ok(Self {
            z,
            labels,
            tau,
            degenerate,
        })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn degenerate_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.degenerate[i]).collect()
    }

    /// A(j): every row except `j`.
    pub fn candidates(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&a| a != j).collect()
    }

    /// P(j): rows sharing `j`'s label, excluding `j`.
    pub fn positives(&self, j: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| p != j && self.labels[p] == self.labels[j])
            .collect()
    }

    /// N(j): rows with a different label.
    pub fn negatives(&self, j: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&n| self.labels[n] != self.labels[j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScLoss {
    /// Σ_j ℓ_j.
    pub sum: f64,
    /// Sum divided by the number of contributing anchors (0 if none).
    pub mean: f64,
    pub per_anchor: Vec<f64>,
    /// Anchors with empty P(j); they contribute 0.
    pub skipped: usize,
}

impl ScLoss {
    pub fn contributing(&self) -> usize {
        self.per_anchor.len() - self.skipped
    }
}

/// Loss plus the coefficient matrix `W` with
/// `W_jk = P_jk − [k∈P(j)] X_jk` (zero on the diagonal and for skipped anchors).
struct Analysis {
    loss: ScLoss,
    weights: Matrix,
}

fn analyze(batch: &ContrastiveBatch) -> Analysis {
    let n = batch.len();
    let inv_tau = 1.0 / batch.tau;
    let mut sim = batch.z.matmul_nt(&batch.z).expect("square product");
    sim.scale(inv_tau);
    let mut weights = Matrix::zeros(n, n);
    let mut per_anchor = vec![0.0; n];
    let mut skipped = 0;
    for j in 0..n {
        let yj = batch.labels[j];
        let s = sim.row(j);
        let mut max_a = f64::NEG_INFINITY;
        let mut max_p = f64::NEG_INFINITY;
        let mut n_pos = 0usize;
        for k in 0..n {
            if k == j {
                continue;
            }
            max_a = max_a.max(s[k]);
            if batch.labels[k] == yj {
                max_p = max_p.max(s[k]);
                n_pos += 1;
            }
        }
        if n_pos == 0 {
            skipped += 1;
            continue;
        }
        let mut sum_a = 0.0;
        let mut sum_p = 0.0;
        for k in 0..n {
            if k == j {
                continue;
            }
            sum_a += (s[k] - max_a).exp();
            if batch.labels[k] == yj {
                sum_p += (s[k] - max_p).exp();
            }
        }
        let lse_a = max_a + sum_a.ln();
        let lse_p = max_p + sum_p.ln();
        per_anchor[j] = lse_a - lse_p + (n_pos as f64).ln();
        let w = weights.row_mut(j);
        for k in 0..n {
            if k == j {
                continue;
            }
            let mut c = (s[k] - lse_a).exp();
            if batch.labels[k] == yj {
                c -= (s[k] - lse_p).exp();
            }
            w[k] = c;
        }
    }
    let sum: f64 = per_anchor.iter().sum();
    let contributing = n - skipped;
    let mean = if contributing > 0 {
        sum / contributing as f64
    } else {
        0.0
    };
    Analysis {
        loss: ScLoss {
            sum,
            mean,
            per_anchor,
            skipped,
        },
        weights,
    }
}

pub fn sc_loss(batch: &ContrastiveBatch) -> ScLoss {
    analyze(batch).loss
}

/// Row `j` holds `∂ℓ_j/∂z_j` (anchor partial, other embeddings held fixed).
pub fn sc_grad_z(batch: &ContrastiveBatch) -> Matrix {
    let a = analyze(batch);
    let mut g = a.weights.matmul(&batch.z).expect("square weights");
    g.scale(1.0 / batch.tau);
    g
}

/// Row `k` holds `∂(Σ_j ℓ_j)/∂z_k`, including `z_k`'s role inside other anchors' terms.
pub fn sc_grad_z_total(batch: &ContrastiveBatch) -> Matrix {
    total_grad_z(batch, &analyze(batch).weights)
}

fn total_grad_z(batch: &ContrastiveBatch, weights: &Matrix) -> Matrix {
    let mut g = weights.matmul(&batch.z).expect("square weights");
    let ctx = weights.matmul_tn(&batch.z).expect("square weights");
    g.axpy(1.0, &ctx).expect("same shape");
    g.scale(1.0 / batch.tau);
    g
}

/// Gradient w.r.t. pre-normalization features.
#[derive(Debug, Clone)]
pub struct FeatureGrad {
    pub grad: Matrix,
    /// Rows with norm ≤ eps; their gradient row is zero.
    pub degenerate: Vec<usize>,
}

/// Applies the normalization Jacobian `(1/‖r_j‖)(I − z_j z_jᵀ)` row by row.
pub fn project_to_features(z: &Matrix, norms: &[f64], grad_z: &Matrix) -> Result<FeatureGrad> {
    if z.shape() != grad_z.shape() || norms.len() != z.rows() {
        return Err(Error::shape(
            "project_to_features",
            format!(
                "z {:?}, grad {:?}, {} norms",
                z.shape(),
                grad_z.shape(),
                norms.len()
            ),
        ));
    }
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut degenerate = Vec::new();
    for j in 0..z.rows() {
        if norms[j].is_nan() || norms[j] <= NORM_EPS {
            degenerate.push(j);
            continue;
        }
        let zj = z.row(j);
        let gj = grad_z.row(j);
        let along = dot(zj, gj);
        let inv = 1.0 / norms[j];
        for ((o, &g), &zv) in grad.row_mut(j).iter_mut().zip(gj).zip(zj) {
            *o = (g - along * zv) * inv;
        }
    }
    Ok(FeatureGrad { grad, degenerate })
}

/// Row `j` holds `∂ℓ_j/∂r_j` (anchor partial).
pub fn sc_grad_r(batch: &ContrastiveBatch, norms: &[f64]) -> Result<FeatureGrad> {
    project_to_features(&batch.z, norms, &sc_grad_z(batch))
}

/// Gradient of Σ_j ℓ_j w.r.t. every feature row.
pub fn sc_grad_r_total(batch: &ContrastiveBatch, norms: &[f64]) -> Result<FeatureGrad> {
    project_to_features(&batch.z, norms, &sc_grad_z_total(batch))
}

/// Loss and the gradient of its mean w.r.t. raw features, sharing one pass over the batch.
pub fn sc_mean_loss_and_grad_r(batch: &ContrastiveBatch, norms: &[f64]) -> Result<(ScLoss, FeatureGrad)> {
    let a = analyze(batch);
    let mut gz = total_grad_z(batch, &a.weights);
    let contributing = a.loss.contributing();
    if contributing > 0 {
        gz.scale(1.0 / contributing as f64);
    }
    let fg = project_to_features(&batch.z, norms, &gz)?;
    Ok((a.loss, fg))
}

/// The positive-set and negative-set parts of `∂ℓ_j/∂r_j`:
///
/// ```text
/// pos = 1/(τ‖r_j‖) Σ_p (z_p − (z_j·z_p) z_j)(P_jp − X_jp)
/// neg = 1/(τ‖r_j‖) Σ_n (z_n − (z_j·z_n) z_j) P_jn
/// ```
#[derive(Debug, Clone)]
pub struct AnchorTerms {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn anchor_gradient_terms(batch: &ContrastiveBatch, j: usize, r_norm: f64) -> AnchorTerms {
    let a = analyze(batch);
    let g = batch.z.cols();
    let mut positive = vec![0.0; g];
    let mut negative = vec![0.0; g];
    let zj = batch.z.row(j);
    let scale = 1.0 / (batch.tau * r_norm);
    for k in 0..batch.len() {
        if k == j {
            continue;
        }
        let zk = batch.z.row(k);
        let c = dot(zj, zk);
        let w = a.weights.get(j, k) * scale;
        let target = if batch.labels[k] == batch.labels[j] {
            &mut positive
        } else {
            &mut negative
        };
        for ((t, &zkv), &zjv) in target.iter_mut().zip(zk).zip(zj) {
            *t += (zkv - c * zjv) * w;
        }
    }
    AnchorTerms { positive, negative }
}

/// `‖z_p − (z_j·z_p) z_j‖` for unit vectors.
pub fn tangent_residual_norm(zj: &[f64], zp: &[f64]) -> f64 {
    let c = dot(zj, zp);
    zp.iter()
        .zip(zj)
        .map(|(p, j)| {
            let d = p - c * j;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
