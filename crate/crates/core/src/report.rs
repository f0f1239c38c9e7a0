//! Evaluation reports, metrics and embedding exports, and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientData, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, RoundTrace};
use crate::nn::{Activation, Dense, Encoder, HeadKind, HeadParams, Mlp, Parameters};
use crate::numerics::{l2_normalize_rows, Matrix, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub id: usize,
    pub n_test: usize,
    pub correct: usize,
    /// `None` when the client has no test samples.
    pub top1: Option<f64>,
    /// Only classes present in the client's test set.
    pub per_class: BTreeMap<usize, f64>,
}

/// Scores one client's predictions against its labels.
pub fn score_client(id: usize, predictions: &[usize], labels: &[usize]) -> Result<ClientEval> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "score_client",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let e = totals.entry(y).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
            correct += 1;
        }
    }
    let n_test = labels.len();
    Ok(ClientEval {
        id,
        n_test,
        correct,
        top1: (n_test > 0).then(|| correct as f64 / n_test as f64),
        per_class: totals
            .into_iter()
            .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
            .collect(),
    })
}

/// Runs `predict` on every client's test set in parallel. Output is ordered by
/// client id whatever the input order.
pub fn evaluate<F>(clients: &[ClientData], predict: F) -> Result<Vec<ClientEval>>
where
    F: Fn(&ClientData) -> Result<Vec<usize>> + Sync,
{
    let mut evals = clients
        .par_iter()
        .map(|c| {
            let preds = if c.test.is_empty() {
                Vec::new()
            } else {
                predict(c)?
            };
            score_client(c.id, &preds, c.test.labels())
        })
        .collect::<Result<Vec<_>>>()?;
    evals.sort_by_key(|e| e.id);
    Ok(evals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub clients: Vec<ClientEval>,
    /// Unweighted mean of per-client top-1 over clients with a test set.
    pub federation_top1_mean: Option<f64>,
    /// Pooled accuracy over every client's test samples.
    pub federation_top1_weighted: Option<f64>,
    pub round_traces: Vec<RoundTrace>,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        config_hash: impl Into<String>,
        mut clients: Vec<ClientEval>,
        round_traces: Vec<RoundTrace>,
    ) -> Self {
        clients.sort_by_key(|e| e.id);
        let scored: Vec<f64> = clients.iter().filter_map(|c| c.top1).collect();
        let federation_top1_mean =
            (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        let n: usize = clients.iter().map(|c| c.n_test).sum();
        let hit: usize = clients.iter().map(|c| c.correct).sum();
        Self {
            method: method.into(),
            config_hash: config_hash.into(),
            clients,
            federation_top1_mean,
            federation_top1_weighted: (n > 0).then(|| hit as f64 / n as f64),
            round_traces,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    /// Per-client table; `per_class` is packed as `class=acc` pairs joined by `;`.
    pub fn write_clients_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.clients {
            w.serialize(ClientRow::from(c))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_clients_csv(path: impl AsRef<Path>) -> Result<Vec<ClientEval>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize::<ClientRow>().map(|row| row?.try_into()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ClientRow {
    id: usize,
    n_test: usize,
    correct: usize,
    top1: Option<f64>,
    per_class: String,
}

impl From<&ClientEval> for ClientRow {
    fn from(c: &ClientEval) -> Self {
        let per_class = c
            .per_class
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        Self {
            id: c.id,
            n_test: c.n_test,
            correct: c.correct,
            top1: c.top1,
            per_class,
        }
    }
}

impl TryFrom<ClientRow> for ClientEval {
    type Error = Error;

    fn try_from(row: ClientRow) -> Result<Self> {
        let mut per_class = BTreeMap::new();
        for pair in row.per_class.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad per-class entry {pair:?}")))?;
            let k = k.parse().map_err(|_| Error::Data(format!("bad class {k:?}")))?;
            let v = v
                .parse()
                .map_err(|_| Error::Data(format!("bad accuracy {v:?}")))?;
            per_class.insert(k, v);
        }
        Ok(ClientEval {
            id: row.id,
            n_test: row.n_test,
            correct: row.correct,
            top1: row.top1,
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub mean_train_loss: f64,
}

pub fn metrics_rows(method: &str, seed: u64, traces: &[RoundTrace]) -> Vec<MetricsRow> {
    traces
        .iter()
        .map(|t| MetricsRow {
            method: method.to_string(),
            seed,
            round: t.round,
            mean_train_loss: t.mean_train_loss,
        })
        .collect()
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes `label,z0..z{g-1}` with unit-normalized encoder outputs, one row per sample.
pub fn export_embeddings(encoder: &Encoder, dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let z = l2_normalize_rows(&encoder.features(dataset.features())?, NORM_EPS).rows;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..z.cols()).map(|i| format!("z{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (row, label) in z.iter_rows().zip(dataset.labels()) {
        write!(out, "{label}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "repper-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Crl,
    Pcl,
    Baseline,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Crl => "crl",
            Stage::Pcl => "pcl",
            Stage::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crl" => Ok(Stage::Crl),
            "pcl" => Ok(Stage::Pcl),
            "baseline" => Ok(Stage::Baseline),
            other => Err(Error::Checkpoint(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Named parameter tensors plus the configuration that produced them.
///
/// On disk: a line-oriented UTF-8 header terminated by `end`, followed by
/// every tensor's values as little-endian f64 in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: FederationConfig,
    /// Free-form single-token annotations, e.g. head kinds.
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: FederationConfig) -> Self {
        Self {
            stage,
            config,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends `p`'s tensors as `{prefix}.0`, `{prefix}.1`, ...
    pub fn push_params<P: Parameters>(&mut self, prefix: &str, p: &P) {
        for (i, t) in p.tensors().into_iter().enumerate() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}.{i}"),
                value: t.clone(),
            });
        }
    }

    fn group(&self, prefix: &str) -> Vec<&NamedTensor> {
        let dotted = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|t| {
                t.name
                    .strip_prefix(&dotted)
                    .is_some_and(|rest| rest.parse::<usize>().is_ok())
            })
            .collect()
    }

    /// Copies the `prefix` group into `target`, which must have identical shapes.
    pub fn restore<P: Parameters>(&self, prefix: &str, target: &mut P) -> Result<()> {
        let group = self.group(prefix);
        let want = target.shapes();
        let have: Vec<(usize, usize)> = group.iter().map(|t| t.value.shape()).collect();
        if want != have {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {prefix}: {}",
                shape_diff(&have, &want)
            )));
        }
        for (dst, src) in target.tensors_mut().into_iter().zip(group) {
            dst.as_mut_slice().copy_from_slice(src.value.as_slice());
        }
        Ok(())
    }

    fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let group = self.group(prefix);
        if group.is_empty() || !group.len().is_multiple_of(2) {
            return Err(Error::Checkpoint(format!(
                "{prefix}: expected weight/bias pairs, found {} tensors",
                group.len()
            )));
        }
        let n = group.len() / 2;
        let layers = group
            .chunks(2)
            .enumerate()
            .map(|(i, wb)| Dense {
                weight: wb[0].value.clone(),
                bias: wb[1].value.clone(),
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
    }

    /// Rebuilds an encoder from the `prefix` group alone.
    pub fn encoder(&self, prefix: &str) -> Result<Encoder> {
        Encoder::from_mlp(self.mlp(prefix)?).map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
    }

    pub fn head(&self, prefix: &str, kind: HeadKind) -> Result<HeadParams> {
        HeadParams::from_parts(kind, self.mlp(prefix)?)
            .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
        header.push_str(&format!("stage {}\n", self.stage));
        header.push_str(&format!("config_hash {}\n", self.config.hash()));
        header.push_str(&format!("config {}\n", serde_json::to_string(&self.config)?));
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains(char::is_whitespace) || v.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "meta entry {k:?}={v:?} is not a token pair"
                )));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            if t.name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!(
                    "tensor name {:?} has whitespace",
                    t.name
                )));
            }
            let (r, c) = t.value.shape();
            header.push_str(&format!("tensor {} {r} {c}\n", t.name));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for t in &self.tensors {
            for v in t.value.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let end = find_subslice(bytes, b"\nend\n")
            .ok_or_else(|| bad("header is truncated or missing its end marker".into()))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not valid UTF-8".into()))?;
        let payload = &bytes[end + 5..];
        let mut lines = header.lines();

        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }

        let mut stage = None;
        let mut hash = None;
        let mut config: Option<FederationConfig> = None;
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "stage" => stage = Some(rest.parse::<Stage>()?),
                "config_hash" => hash = Some(rest.to_string()),
                "config" => {
                    config = Some(serde_json::from_str(rest).map_err(|e| bad(format!("config: {e}")))?)
                }
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed meta line {line:?}")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, r, c] = parts[..] else {
                        return Err(bad(format!("malformed tensor line {line:?}")));
                    };
                    let dim = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| bad(format!("bad dimension in {line:?}")))
                    };
                    shapes.push((name.to_string(), dim(r)?, dim(c)?));
                }
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        }
        let stage = stage.ok_or_else(|| bad("missing stage".into()))?;
        let config = config.ok_or_else(|| bad("missing config".into()))?;
        let hash = hash.ok_or_else(|| bad("missing config_hash".into()))?;
        if hash != config.hash() {
            return Err(bad(format!(
                "config hash {hash} does not match stored config ({})",
                config.hash()
            )));
        }

        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")));
        let tensors = shapes
            .into_iter()
            .map(|(name, r, c)| {
                let data: Vec<f64> = values.by_ref().take(r * c).collect();
                Ok(NamedTensor {
                    name,
                    value: Matrix::new(r, c, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stage,
            config,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn shape_diff(have: &[(usize, usize)], want: &[(usize, usize)]) -> String {
    if have.len() != want.len() {
        return format!("checkpoint has {} tensors, model has {}", have.len(), want.len());
    }
    have.iter()
        .zip(want)
        .enumerate()
        .filter(|(_, (h, w))| h != w)
        .map(|(i, (h, w))| format!("tensor {i}: checkpoint {}x{}, model {}x{}", h.0, h.1, w.0, w.1))
        .collect::<Vec<_>>()
        .join("; ")
}
