//! Federated representation learning with the supervised contrastive loss.

use rayon::prelude::*;

use super::{aggregate, epoch_batches, sample_clients, FederationConfig, RoundTrace};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Encoder, OptimizerState};
use crate::numerics::RngStream;
use crate::supcon::{augment_twice, sc_mean_loss_and_grad_r, ContrastiveBatch};

#[derive(Debug, Clone)]
pub struct LocalUpdate<P> {
    pub params: P,
    /// Mean mini-batch loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

impl<P> LocalUpdate<P> {
    pub fn mean_loss(&self) -> f64 {
        if self.epoch_losses.is_empty() {
            0.0
        } else {
            self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64
        }
    }
}

/// `cfg.local_epochs` passes over the client's data: augment each batch twice,
/// encode, normalize, take the mean contrastive loss and step the optimizer.
pub fn client_update_crl(
    client_id: usize,
    data: &LabeledDataset,
    start: &Encoder,
    cfg: &FederationConfig,
    lr: f64,
    rng: &mut RngStream,
) -> Result<LocalUpdate<Encoder>> {
    if data.dim() != start.input_dim() {
        return Err(Error::Data(format!(
            "client {client_id} data has dim {}, encoder expects {}",
            data.dim(),
            start.input_dim()
        )));
    }
    let mut enc = start.clone();
    let mut opt = OptimizerState::new(cfg.optimizer(lr), &enc);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut batch_no = 0;
    for _ in 0..cfg.local_epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let x = data.features().select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (views, view_labels) = augment_twice(&x, &y, &cfg.augmentation, rng)?;
            let (r, cache) = enc.forward(&views)?;
            let (batch, norms) = ContrastiveBatch::from_features(&r, view_labels, cfg.temperature)?;
            let (loss, grad_r) = sc_mean_loss_and_grad_r(&batch, &norms)?;
            if !loss.mean.is_finite() {
                return Err(Error::Numeric {
                    client: client_id,
                    batch: batch_no,
                    msg: format!("contrastive loss is {}", loss.mean),
                });
            }
            let (grads, _) = enc.backward(&cache, &grad_r.grad)?;
            opt.step(&mut enc, &grads)
                .map_err(|e| e.at_client(client_id, batch_no))?;
            sum += loss.mean;
            count += 1;
            batch_no += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(LocalUpdate {
        params: enc,
        epoch_losses,
    })
}

#[derive(Debug, Clone)]
pub struct CrlOutcome {
    pub encoder: Encoder,
    pub traces: Vec<RoundTrace>,
}

/// Stage one: `cfg.rounds` rounds of sample → local contrastive training from
/// the current global encoder → sample-weighted aggregation.
///
/// `clients[i]` is client `i`'s training data. Client updates within a round
/// run on the rayon pool; the result does not depend on its size.
pub fn run_crl(clients: &[LabeledDataset], cfg: &FederationConfig) -> Result<CrlOutcome> {
    let Some(first) = clients.first() else {
        return Err(Error::Config("no clients to train".into()));
    };
    let mut init_rng = RngStream::new(cfg.seed, "encoder-init", 0, 0);
    let encoder = Encoder::new(&cfg.encoder_dims(first.dim()), &mut init_rng)?;
    run_crl_from(clients, encoder, cfg)
}

/// [`run_crl`] from a given starting encoder.
pub(crate) fn run_crl_from(
    clients: &[LabeledDataset],
    mut encoder: Encoder,
    cfg: &FederationConfig,
) -> Result<CrlOutcome> {
    let k = clients.len();
    let mut traces = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let selected = sample_clients(t, k, cfg.participation, cfg.seed);
        let lr = cfg.lr_at(t);
        let updates: Vec<Result<LocalUpdate<Encoder>>> = selected
            .par_iter()
            .map(|&i| {
                let mut rng = RngStream::new(cfg.seed, "crl-client", i as u64, t as u64);
                client_update_crl(i, &clients[i], &encoder, cfg, lr, &mut rng)
            })
            .collect();
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = updates.iter().map(LocalUpdate::mean_loss).collect();
        let uploads: Vec<(Encoder, usize)> = updates
            .into_iter()
            .zip(&selected)
            .map(|(u, &i)| (u.params, clients[i].len()))
            .collect();
        let (next, weights) = aggregate(&uploads)?;
        encoder = next;
        let mean_train_loss = weights.iter().zip(&losses).map(|(w, l)| w * l).sum();
        traces.push(RoundTrace {
            round: t,
            selected,
            weights,
            mean_train_loss,
        });
    }
    Ok(CrlOutcome { encoder, traces })
}
