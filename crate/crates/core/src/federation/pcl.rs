//! Personalization: per-client heads trained on a frozen encoder.

use std::sync::Arc;

use super::baseline::JointModel;
use super::{epoch_batches, head_features, FederationConfig, HeadInput};
use crate::data::ClientData;
use crate::error::{Error, Result};
use crate::nn::{Encoder, HeadKind, HeadParams, OptimizerConfig, OptimizerState};
use crate::numerics::{Matrix, RngStream};

/// A frozen encoder shared across clients plus one client's own head.
#[derive(Debug, Clone)]
pub struct PersonalizedModel {
    pub client_id: usize,
    pub encoder: Arc<Encoder>,
    pub head: HeadParams,
    pub head_input: HeadInput,
    /// Loss of every head optimizer step.
    pub trace: Vec<f64>,
}

impl PersonalizedModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let f = head_features(&self.encoder, x, self.head_input)?;
        self.head.predict(&f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSchedule {
    /// Full passes over the data.
    Epochs(usize),
    /// Optimizer steps, walking the same shuffled epochs as [`HeadSchedule::Epochs`].
    Steps(usize),
}

/// Mini-batch training of `head` on fixed features.
pub fn train_head(
    mut head: HeadParams,
    features: &Matrix,
    labels: &[usize],
    schedule: HeadSchedule,
    batch_size: usize,
    opt: OptimizerConfig,
    rng: &mut RngStream,
) -> Result<(HeadParams, Vec<f64>)> {
    let n = features.rows();
    let mut state = OptimizerState::new(opt, &head);
    let mut trace = Vec::new();
    if n == 0 {
        return Ok((head, trace));
    }
    let (epochs, max_steps) = match schedule {
        HeadSchedule::Epochs(e) => (e, usize::MAX),
        HeadSchedule::Steps(s) => (s.div_ceil(n.div_ceil(batch_size.max(1))), s),
    };
    'outer: for _ in 0..epochs {
        for idx in epoch_batches(n, batch_size, rng) {
            if trace.len() >= max_steps {
                break 'outer;
            }
            let x = features.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = head.forward_loss(&x, &y)?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric {
                    client: 0,
                    batch: trace.len(),
                    msg: format!("head loss is {}", out.loss),
                });
            }
            state.step(&mut head, &out.grads)?;
            trace.push(out.loss);
        }
    }
    Ok((head, trace))
}

fn personalize(
    encoder: &Arc<Encoder>,
    client: &ClientData,
    kind: HeadKind,
    classes: usize,
    schedule: HeadSchedule,
    cfg: &FederationConfig,
) -> Result<PersonalizedModel> {
    let mut rng = RngStream::new(cfg.seed, "pcl", client.id as u64, 0);
    let head = HeadParams::new(kind, encoder.feature_dim(), classes, cfg.head_hidden, &mut rng)?;
    let features = head_features(encoder, client.train.features(), cfg.head_input)?;
    let (head, trace) = train_head(
        head,
        &features,
        client.train.labels(),
        schedule,
        cfg.batch_size,
        cfg.optimizer(cfg.head_lr),
        &mut rng,
    )
    .map_err(|e| e.at_client(client.id, 0))?;
    Ok(PersonalizedModel {
        client_id: client.id,
        encoder: Arc::clone(encoder),
        head,
        head_input: cfg.head_input,
        trace,
    })
}

/// Stage two: a fresh head trained for `cfg.head_epochs` on frozen features.
pub fn run_pcl(
    encoder: &Arc<Encoder>,
    client: &ClientData,
    kind: HeadKind,
    cfg: &FederationConfig,
) -> Result<PersonalizedModel> {
    personalize(
        encoder,
        client,
        kind,
        client.train.classes(),
        HeadSchedule::Epochs(cfg.head_epochs),
        cfg,
    )
}

/// Head-only training for a client that never took part in representation
/// learning; its class count may differ from the federation's.
pub fn adapt_new_client(
    encoder: &Arc<Encoder>,
    client: &ClientData,
    kind: HeadKind,
    iterations: usize,
    cfg: &FederationConfig,
) -> Result<PersonalizedModel> {
    if client.train.dim() != encoder.input_dim() {
        return Err(Error::Data(format!(
            "new client data has dim {}, encoder expects {}",
            client.train.dim(),
            encoder.input_dim()
        )));
    }
    personalize(
        encoder,
        client,
        kind,
        client.train.classes(),
        HeadSchedule::Steps(iterations),
        cfg,
    )
}

/// The +FT personalization: the global model's own head retrained on local
/// data for `cfg.fine_tune_epochs` with its encoder frozen.
pub fn fine_tune_head(
    global: &JointModel,
    encoder: &Arc<Encoder>,
    client: &ClientData,
    cfg: &FederationConfig,
) -> Result<PersonalizedModel> {
    let mut rng = RngStream::new(cfg.seed, "fine-tune", client.id as u64, 0);
    let features = encoder.features(client.train.features())?;
    let (head, trace) = train_head(
        global.head.clone(),
        &features,
        client.train.labels(),
        HeadSchedule::Epochs(cfg.fine_tune_epochs),
        cfg.batch_size,
        cfg.optimizer(cfg.head_lr),
        &mut rng,
    )
    .map_err(|e| e.at_client(client.id, 0))?;
    Ok(PersonalizedModel {
        client_id: client.id,
        encoder: Arc::clone(encoder),
        head,
        head_input: HeadInput::Raw,
        trace,
    })
}
