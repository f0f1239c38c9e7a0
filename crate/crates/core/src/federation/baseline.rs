//! FedAvg and FedProx over a jointly trained encoder + linear classifier.

use std::sync::Arc;

use rayon::prelude::*;

use super::crl::LocalUpdate;
use super::pcl::{fine_tune_head, PersonalizedModel};
use super::{aggregate, epoch_batches, sample_clients, FederationConfig, RoundTrace};
use crate::data::{ClientData, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Encoder, Grads, HeadKind, HeadParams, OptimizerState, Parameters};
use crate::numerics::{Matrix, RngStream};
use crate::supcon::augment_once;

/// Encoder followed by a linear softmax classifier, trained end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub encoder: Encoder,
    pub head: HeadParams,
}

impl JointModel {
    pub fn new(input_dim: usize, classes: usize, cfg: &FederationConfig) -> Result<Self> {
        let encoder = Encoder::new(
            &cfg.encoder_dims(input_dim),
            &mut RngStream::new(cfg.seed, "encoder-init", 0, 0),
        )?;
        let head = HeadParams::new(
            HeadKind::Logistic,
            encoder.feature_dim(),
            classes,
            cfg.head_hidden,
            &mut RngStream::new(cfg.seed, "joint-head-init", 0, 0),
        )?;
        Ok(Self { encoder, head })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        self.head.predict(&self.encoder.features(x)?)
    }

    /// Mean cross-entropy on `(x, y)` with gradients for every parameter.
    pub fn loss_and_grads(&self, x: &Matrix, y: &[usize]) -> Result<(f64, JointGrads)> {
        let (r, cache) = self.encoder.forward(x)?;
        let out = self.head.forward_loss(&r, y)?;
        let (enc, _) = self.encoder.backward(&cache, &out.grad_input)?;
        Ok((
            out.loss,
            JointGrads {
                encoder: enc,
                head: out.grads,
            },
        ))
    }
}

impl Parameters for JointModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

#[derive(Debug, Clone)]
pub struct JointGrads {
    pub encoder: Grads,
    pub head: Grads,
}

impl Parameters for JointGrads {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Local cross-entropy training; with `mu > 0` every gradient also gets the
/// proximal pull `mu · (w − w_start)`.
pub fn client_update_joint(
    client_id: usize,
    data: &LabeledDataset,
    start: &JointModel,
    cfg: &FederationConfig,
    lr: f64,
    mu: f64,
    rng: &mut RngStream,
) -> Result<LocalUpdate<JointModel>> {
    if data.dim() != start.encoder.input_dim() {
        return Err(Error::Data(format!(
            "client {client_id} data has dim {}, model expects {}",
            data.dim(),
            start.encoder.input_dim()
        )));
    }
    let mut model = start.clone();
    let mut opt = OptimizerState::new(cfg.optimizer(lr), &model);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut batch_no = 0;
    for _ in 0..cfg.local_epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let x = augment_once(&data.features().select_rows(&idx), &cfg.augmentation, rng)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (loss, mut grads) = model.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    client: client_id,
                    batch: batch_no,
                    msg: format!("cross-entropy is {loss}"),
                });
            }
            if mu > 0.0 {
                add_proximal(&mut grads, &model, start, mu);
            }
            opt.step(&mut model, &grads)
                .map_err(|e| e.at_client(client_id, batch_no))?;
            sum += loss;
            count += 1;
            batch_no += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(LocalUpdate {
        params: model,
        epoch_losses,
    })
}

/// `g += mu · (w − anchor)`, the gradient of `mu/2 · ‖w − anchor‖²`.
pub(crate) fn add_proximal<G, P>(grads: &mut G, current: &P, anchor: &P, mu: f64)
where
    G: Parameters,
    P: Parameters,
{
    let cur = current.tensors();
    let anc = anchor.tensors();
    for ((g, w), a) in grads.tensors_mut().into_iter().zip(cur).zip(anc) {
        for ((gv, wv), av) in g.as_mut_slice().iter_mut().zip(w.as_slice()).zip(a.as_slice()) {
            *gv += mu * (wv - av);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub global: JointModel,
    pub traces: Vec<RoundTrace>,
    /// Per-client fine-tuned heads for the +FT variants.
    pub personalized: Option<Vec<PersonalizedModel>>,
}

/// FedAvg (or FedProx when the method says so) followed, for +FT methods,
/// by per-client head fine-tuning.
pub fn run_baseline(clients: &[ClientData], cfg: &FederationConfig) -> Result<BaselineOutcome> {
    if !cfg.method.is_baseline() {
        return Err(Error::Config(format!("{} is not a baseline method", cfg.method)));
    }
    let Some(first) = clients.first() else {
        return Err(Error::Config("no clients to train".into()));
    };
    let mut global = JointModel::new(first.train.dim(), first.train.classes(), cfg)?;
    let mu = if cfg.method.is_prox() { cfg.prox_mu } else { 0.0 };
    let k = clients.len();
    let mut traces = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let selected = sample_clients(t, k, cfg.participation, cfg.seed);
        let lr = cfg.lr_at(t);
        let updates: Vec<Result<LocalUpdate<JointModel>>> = selected
            .par_iter()
            .map(|&i| {
                let mut rng = RngStream::new(cfg.seed, "baseline-client", i as u64, t as u64);
                client_update_joint(i, &clients[i].train, &global, cfg, lr, mu, &mut rng)
            })
            .collect();
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = updates.iter().map(LocalUpdate::mean_loss).collect();
        let uploads: Vec<(JointModel, usize)> = updates
            .into_iter()
            .zip(&selected)
            .map(|(u, &i)| (u.params, clients[i].train.len()))
            .collect();
        let (next, weights) = aggregate(&uploads)?;
        global = next;
        let mean_train_loss = weights.iter().zip(&losses).map(|(w, l)| w * l).sum();
        traces.push(RoundTrace {
            round: t,
            selected,
            weights,
            mean_train_loss,
        });
    }
    let personalized = if cfg.method.fine_tunes() {
        let encoder = Arc::new(global.encoder.clone());
        let heads = clients
            .par_iter()
            .map(|c| fine_tune_head(&global, &encoder, c, cfg))
            .collect::<Result<Vec<_>>>()?;
        Some(heads)
    } else {
        None
    };
    Ok(BaselineOutcome {
        global,
        traces,
        personalized,
    })
}
