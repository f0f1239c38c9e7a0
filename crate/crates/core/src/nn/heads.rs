//! Per-client classifier heads θ mapping features `r ∈ R^g` to `C` class scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Grads, Mlp, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Single linear layer, softmax cross-entropy.
    Logistic,
    /// Single linear layer, Crammer-Singer multiclass hinge with margin 1.
    LinearSvm,
    /// One ReLU hidden layer, softmax cross-entropy.
    Mlp,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Logistic, HeadKind::LinearSvm, HeadKind::Mlp];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Logistic => "logistic",
            HeadKind::LinearSvm => "linear-svm",
            HeadKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(HeadKind::Logistic),
            "linear-svm" | "svm" => Ok(HeadKind::LinearSvm),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::Config(format!(
                "unknown head kind {other:?} (expected logistic, linear-svm or mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    kind: HeadKind,
    net: Mlp,
}

/// Mean loss over the batch with gradients w.r.t. the head parameters and its input.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    pub grads: Grads,
    pub grad_input: Matrix,
}

impl HeadParams {
    /// `hidden` is only used by [`HeadKind::Mlp`].
    pub fn new(
        kind: HeadKind,
        feature_dim: usize,
        classes: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        let net = match kind {
            HeadKind::Logistic | HeadKind::LinearSvm => Mlp::new(&[feature_dim, classes], rng)?,
            HeadKind::Mlp => Mlp::new(&[feature_dim, hidden, classes], rng)?,
        };
        Ok(Self { kind, net })
    }

    pub fn from_parts(kind: HeadKind, net: Mlp) -> Result<Self> {
        let expected = match kind {
            HeadKind::Logistic | HeadKind::LinearSvm => 1,
            HeadKind::Mlp => 2,
        };
        if net.layers().len() != expected {
            return Err(Error::Contract(format!(
                "{kind} head needs {expected} layer(s), got {}",
                net.layers().len()
            )));
        }
        Ok(Self { kind, net })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn scores(&self, r: &Matrix) -> Result<Matrix> {
        self.net.predict(r)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, r: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(r)?))
    }

    pub fn forward_loss(&self, r: &Matrix, labels: &[usize]) -> Result<HeadLoss> {
        if r.cols() != self.feature_dim() {
            return Err(Error::shape(
                "head_forward_loss",
                format!(
                    "features have {} columns, head expects {}",
                    r.cols(),
                    self.feature_dim()
                ),
            ));
        }
        if labels.len() != r.rows() {
            return Err(Error::shape(
                "head_forward_loss",
                format!("{} labels for {} rows", labels.len(), r.rows()),
            ));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (scores, cache) = self.net.forward(r)?;
        let (loss, grad_scores) = match self.kind {
            HeadKind::Logistic | HeadKind::Mlp => softmax_cross_entropy(&scores, labels),
            HeadKind::LinearSvm => crammer_singer_hinge(&scores, labels),
        };
        let (grads, grad_input) = self.net.backward(&cache, &grad_scores)?;
        Ok(HeadLoss {
            loss,
            grads,
            grad_input,
        })
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

pub(crate) fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    scores
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient w.r.t. the scores.
fn softmax_cross_entropy(scores: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = scores.rows().max(1) as f64;
    let mut grad = Matrix::zeros(scores.rows(), scores.cols());
    let mut total = 0.0;
    for (i, row) in scores.iter_rows().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]];
        let g = grad.row_mut(i);
        for (c, gv) in g.iter_mut().enumerate() {
            *gv = (row[c] - log_z).exp() / n;
        }
        g[labels[i]] -= 1.0 / n;
    }
    (total / n, grad)
}

/// Mean of `max(0, 1 + max_{c≠y} s_c − s_y)` and a subgradient w.r.t. the scores.
fn crammer_singer_hinge(scores: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = scores.rows().max(1) as f64;
    let mut grad = Matrix::zeros(scores.rows(), scores.cols());
    let mut total = 0.0;
    for (i, row) in scores.iter_rows().enumerate() {
        let y = labels[i];
        let rival = row.iter().enumerate().filter(|&(c, _)| c != y).fold(
            None,
            |best: Option<(usize, f64)>, (c, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((c, v)),
            },
        );
        let Some((c, v)) = rival else { continue };
        let margin = 1.0 + v - row[y];
        if margin > 0.0 {
            total += margin;
            let g = grad.row_mut(i);
            g[c] += 1.0 / n;
            g[y] -= 1.0 / n;
        }
    }
    (total / n, grad)
}
