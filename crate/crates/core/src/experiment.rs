//! End-to-end pipeline: partition, federated training, personalization, evaluation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{
    client_views, dirichlet_partition, ClientData, ClientPartition, LabeledDataset, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::federation::{
    run_baseline, run_crl, run_pcl, BaselineOutcome, FederationConfig, JointModel, Method, PersonalizedModel,
    RoundTrace,
};
use crate::nn::{Encoder, HeadKind};
use crate::numerics::RngStream;
use crate::report::{evaluate, Checkpoint, EvalReport, Stage};

/// The partition and per-client views every method shares for a given seed.
pub fn federate(
    dataset: &LabeledDataset,
    cfg: &FederationConfig,
) -> Result<(ClientPartition, Vec<ClientData>)> {
    let spec = PartitionSpec {
        clients: cfg.clients,
        alpha: cfg.alpha,
        min_size: cfg.min_client_size,
        max_retries: cfg.partition_retries,
    };
    let part = dirichlet_partition(dataset, &spec, &mut RngStream::new(cfg.seed, "partition", 0, 0))?;
    let clients = client_views(dataset, &part, cfg.test_policy)?;
    Ok((part, clients))
}

#[derive(Debug, Clone)]
pub enum Trained {
    Repper {
        encoder: Arc<Encoder>,
        heads: Vec<PersonalizedModel>,
    },
    Baseline(BaselineOutcome),
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub partition: ClientPartition,
    pub clients: Vec<ClientData>,
    pub trained: Trained,
    pub traces: Vec<RoundTrace>,
    pub report: EvalReport,
}

impl Experiment {
    /// Encoder of the trained model: φ for RepPer, the joint model's encoder otherwise.
    pub fn encoder(&self) -> &Encoder {
        match &self.trained {
            Trained::Repper { encoder, .. } => encoder,
            Trained::Baseline(b) => &b.global.encoder,
        }
    }

    /// Checkpoints for every stage this run produced.
    pub fn checkpoints(&self, cfg: &FederationConfig) -> Vec<Checkpoint> {
        match &self.trained {
            Trained::Repper { encoder, heads } => {
                let mut crl = Checkpoint::new(Stage::Crl, cfg.clone());
                crl.push_params("encoder", encoder.as_ref());
                let mut pcl = Checkpoint::new(Stage::Pcl, cfg.clone());
                pcl.push_params("encoder", encoder.as_ref());
                push_heads(&mut pcl, heads);
                vec![crl, pcl]
            }
            Trained::Baseline(b) => {
                let mut ck = Checkpoint::new(Stage::Baseline, cfg.clone());
                ck.push_params("encoder", &b.global.encoder);
                ck.push_params("head", &b.global.head);
                if let Some(heads) = &b.personalized {
                    push_heads(&mut ck, heads);
                }
                vec![ck]
            }
        }
    }
}

fn push_heads(ck: &mut Checkpoint, heads: &[PersonalizedModel]) {
    for h in heads {
        let prefix = format!("client{}", h.client_id);
        ck.meta
            .insert(format!("{prefix}.kind"), h.head.kind().to_string());
        ck.push_params(&prefix, &h.head);
    }
}

/// Runs `cfg.method` on `dataset` and evaluates every client on its local test set.
/// `head` selects the RepPer head family; baselines always use a linear softmax head.
pub fn run_experiment(
    dataset: &LabeledDataset,
    cfg: &FederationConfig,
    head: HeadKind,
) -> Result<Experiment> {
    let (partition, clients) = federate(dataset, cfg)?;
    run_on_clients(partition, clients, cfg, head)
}

/// [`run_experiment`] on an existing partition.
pub fn run_on_clients(
    partition: ClientPartition,
    clients: Vec<ClientData>,
    cfg: &FederationConfig,
    head: HeadKind,
) -> Result<Experiment> {
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let (trained, traces) = match cfg.method {
        Method::Repper => {
            let train: Vec<LabeledDataset> = clients.iter().map(|c| c.train.clone()).collect();
            let crl = run_crl(&train, cfg)?;
            let encoder = Arc::new(crl.encoder);
            let heads = personalize_all(&encoder, &clients, head, cfg)?;
            (Trained::Repper { encoder, heads }, crl.traces)
        }
        _ => {
            let outcome = run_baseline(&clients, cfg)?;
            let traces = outcome.traces.clone();
            (Trained::Baseline(outcome), traces)
        }
    };
    let evals = match &trained {
        Trained::Repper { heads, .. } => evaluate(&clients, |c| heads[c.id].predict(c.test.features()))?,
        Trained::Baseline(b) => match &b.personalized {
            Some(heads) => evaluate(&clients, |c| heads[c.id].predict(c.test.features()))?,
            None => evaluate(&clients, |c| b.global.predict(c.test.features()))?,
        },
    };
    let report = EvalReport::new(cfg.method.as_str(), cfg.hash(), evals, traces.clone());
    Ok(Experiment {
        partition,
        clients,
        trained,
        traces,
        report,
    })
}

/// One personalized head per client on the shared frozen encoder.
pub fn personalize_all(
    encoder: &Arc<Encoder>,
    clients: &[ClientData],
    head: HeadKind,
    cfg: &FederationConfig,
) -> Result<Vec<PersonalizedModel>> {
    clients
        .par_iter()
        .map(|c| run_pcl(encoder, c, head, cfg))
        .collect()
}

/// Accuracy of the un-personalized joint model, for comparisons against heads.
pub fn evaluate_joint(
    model: &JointModel,
    clients: &[ClientData],
    cfg: &FederationConfig,
) -> Result<EvalReport> {
    let evals = evaluate(clients, |c| model.predict(c.test.features()))?;
    Ok(EvalReport::new("joint", cfg.hash(), evals, Vec::new()))
}
