//! Round orchestration: client sampling, local updates, weighted aggregation,
//! head personalization and the FedAvg/FedProx baselines.

mod baseline;
mod crl;
mod pcl;

pub use baseline::{client_update_joint, run_baseline, BaselineOutcome, JointModel};
pub use crl::{client_update_crl, run_crl, CrlOutcome, LocalUpdate};
pub use pcl::{adapt_new_client, fine_tune_head, run_pcl, train_head, HeadSchedule, PersonalizedModel};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TestSetPolicy;
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerKind, Parameters};
use crate::numerics::{Matrix, RngStream};
use crate::supcon::AugmentationPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Repper,
    Fedavg,
    FedavgFt,
    Fedprox,
    FedproxFt,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Repper,
        Method::Fedavg,
        Method::FedavgFt,
        Method::Fedprox,
        Method::FedproxFt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Repper => "repper",
            Method::Fedavg => "fedavg",
            Method::FedavgFt => "fedavg-ft",
            Method::Fedprox => "fedprox",
            Method::FedproxFt => "fedprox-ft",
        }
    }

    pub fn is_baseline(&self) -> bool {
        *self != Method::Repper
    }

    pub fn fine_tunes(&self) -> bool {
        matches!(self, Method::FedavgFt | Method::FedproxFt)
    }

    pub fn is_prox(&self) -> bool {
        matches!(self, Method::Fedprox | Method::FedproxFt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {s:?} (expected repper, fedavg, fedavg-ft, fedprox or fedprox-ft)"
            ))
        })
    }
}

/// Which representation the classifier heads consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    /// Encoder output `r`.
    #[default]
    Raw,
    /// `z = r/‖r‖`, the embedding the contrastive loss shapes.
    Normalized,
}

/// Every protocol knob for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// K.
    pub clients: usize,
    /// C ∈ (0, 1].
    pub participation: f64,
    /// T.
    pub rounds: usize,
    /// τ_r, full passes over local data per round.
    pub local_epochs: usize,
    /// τ_c, head-training passes in the personalization stage.
    pub head_epochs: usize,
    pub batch_size: usize,
    /// η_r.
    pub lr: f64,
    /// η_c.
    pub head_lr: f64,
    pub temperature: f64,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Multiplier applied to η_r from `lr_decay_round` on.
    pub lr_decay: f64,
    /// Defaults to ⌈2T/3⌉.
    pub lr_decay_round: Option<usize>,
    /// FedProx μ.
    pub prox_mu: f64,
    pub fine_tune_epochs: usize,
    pub adapt_iterations: usize,
    pub min_client_size: usize,
    pub partition_retries: usize,
    pub seed: u64,
    pub method: Method,
    pub encoder_hidden: Vec<usize>,
    /// g; `None` picks min(64, d/2).
    pub feature_dim: Option<usize>,
    pub head_hidden: usize,
    pub head_input: HeadInput,
    pub augmentation: AugmentationPolicy,
    pub test_policy: TestSetPolicy,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            participation: 0.4,
            rounds: 100,
            local_epochs: 10,
            head_epochs: 10,
            batch_size: 256,
            lr: 0.001,
            head_lr: 0.001,
            temperature: 0.1,
            alpha: 0.5,
            optimizer: OptimizerKind::Adam,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_decay_round: None,
            prox_mu: 0.01,
            fine_tune_epochs: 10,
            adapt_iterations: 100,
            min_client_size: 10,
            partition_retries: 100,
            seed: 0,
            method: Method::Repper,
            encoder_hidden: vec![256, 128],
            feature_dim: None,
            head_hidden: 64,
            head_input: HeadInput::Raw,
            augmentation: AugmentationPolicy::default(),
            test_policy: TestSetPolicy::LocalClasses,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!(
                "participation C={} must lie in (0, 1]",
                self.participation
            ));
        }
        if self.clients == 0 {
            return bad("clients K must be positive".into());
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return bad(format!(
                "rounds ({}), local_epochs ({}) and batch_size ({}) must be positive",
                self.rounds, self.local_epochs, self.batch_size
            ));
        }
        for (name, v) in [("lr", self.lr), ("head_lr", self.head_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.prox_mu >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return bad("prox_mu and weight_decay must be ≥ 0, lr_decay > 0".into());
        }
        if self.encoder_hidden.contains(&0) || self.head_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.feature_dim == Some(0) {
            return bad("feature_dim must be positive".into());
        }
        Ok(())
    }

    /// Encoder widths `[d, hidden…, g]` for input dimension `d`.
    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let g = self.feature_dim.unwrap_or_else(|| (input_dim / 2).clamp(1, 64));
        let mut dims = vec![input_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(g);
        dims
    }

    pub fn decay_round(&self) -> usize {
        self.lr_decay_round
            .unwrap_or_else(|| (2 * self.rounds).div_ceil(3))
    }

    /// η_r in effect during `round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        if round >= self.decay_round() {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn optimizer(&self, lr: f64) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(lr, self.weight_decay),
            OptimizerKind::Sgd => OptimizerConfig::sgd(lr, self.weight_decay),
        }
    }

    pub fn selected_per_round(&self) -> usize {
        clients_per_round(self.clients, self.participation)
    }

    /// Stable short hash of the full configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// `max(⌊C·K⌋, 1)`.
pub fn clients_per_round(k: usize, c: f64) -> usize {
    // the small slack absorbs representation error such as 0.3·10 = 2.9999…
    ((c * k as f64 + 1e-9).floor() as usize).clamp(1, k)
}

/// Uniform sample without replacement of `max(⌊C·K⌋, 1)` clients, sorted by id.
pub fn sample_clients(round: usize, k: usize, c: f64, seed: u64) -> Vec<usize> {
    let m = clients_per_round(k, c);
    let mut ids: Vec<usize> = (0..k).collect();
    if m < k {
        let mut rng = RngStream::new(seed, "sample-clients", 0, round as u64);
        for i in 0..m {
            let j = i + (rng.uniform(0.0, (k - i) as f64) as usize).min(k - i - 1);
            ids.swap(i, j);
        }
        ids.truncate(m);
    }
    ids.sort_unstable();
    ids
}

/// Weighted average of uploads with weights `n_i / Σ n_j`.
///
/// Computed as `p_0 + Σ_i w_i (p_i − p_0)`, which reproduces identical uploads
/// bit for bit. Uploads are combined in the order given.
pub fn aggregate<P>(uploads: &[(P, usize)]) -> Result<(P, Vec<f64>)>
where
    P: Parameters + Clone,
{
    let Some((first, _)) = uploads.first() else {
        return Err(Error::Contract("aggregate needs at least one upload".into()));
    };
    let shapes = first.shapes();
    for (i, (p, _)) in uploads.iter().enumerate() {
        if p.shapes() != shapes {
            return Err(Error::Contract(format!(
                "upload {i} has shapes {:?}, expected {shapes:?}",
                p.shapes()
            )));
        }
    }
    let total: usize = uploads.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Contract("uploads carry zero samples".into()));
    }
    let weights: Vec<f64> = uploads.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let base = first.flatten();
    let mut acc = base.clone();
    for ((p, _), &w) in uploads.iter().zip(&weights).skip(1) {
        for ((a, v), b) in acc.iter_mut().zip(p.flatten()).zip(&base) {
            *a += w * (v - b);
        }
    }
    let mut out = first.clone();
    out.load_flat(&acc)?;
    Ok((out, weights))
}

/// Loss summary of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    /// Aggregation-weighted mean of the selected clients' local training losses.
    pub mean_train_loss: f64,
}

/// Mini-batches of source-sample indices for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

pub(crate) fn head_features(encoder: &crate::nn::Encoder, x: &Matrix, input: HeadInput) -> Result<Matrix> {
    let r = encoder.features(x)?;
    Ok(match input {
        HeadInput::Raw => r,
        HeadInput::Normalized => crate::numerics::l2_normalize_rows(&r, crate::numerics::NORM_EPS).rows,
    })
}
