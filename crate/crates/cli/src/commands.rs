use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::Serialize;

use repper::data::{load_binary, load_csv, ClientData, LabeledDataset, Split};
use repper::experiment::run_experiment;
use repper::federation::{adapt_new_client, Method};
use repper::nn::HeadKind;
use repper::report::{self, evaluate, metrics_rows, Checkpoint, EvalReport, Stage};

use crate::config::{with_split, ExperimentConfig};

/// 3 for numeric failures anywhere in the chain, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<repper::Error>(),
            Some(repper::Error::Numeric { .. })
        )
    });
    if numeric {
        3
    } else {
        2
    }
}

pub fn run(
    config: &Path,
    seed: Option<u64>,
    method: Option<Method>,
    output_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.federation.seed = s;
    }
    if let Some(m) = method {
        cfg.federation.method = m;
    }
    let out = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let dataset = cfg.dataset(cfg.federation.seed)?;
    let exp = run_experiment(&dataset, &cfg.federation, cfg.head)?;
    exp.report.write_json(out.join("report.json"))?;
    exp.report.write_clients_csv(out.join("clients.csv"))?;
    report::write_metrics(
        out.join("metrics.csv"),
        &metrics_rows(cfg.federation.method.as_str(), cfg.federation.seed, &exp.traces),
    )?;
    for ck in exp.checkpoints(&cfg.federation) {
        ck.save(out.join(format!("{}.ckpt", ck.stage)))?;
    }
    print_summary(&exp.report);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.4}", a));
    println!(
        "{}: federation top-1 {} (sample-weighted {}) over {} clients",
        r.method,
        fmt(r.federation_top1_mean),
        fmt(r.federation_top1_weighted),
        r.clients.len()
    );
}

/// Mean and sample standard deviation; the latter needs two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

#[derive(Debug, Serialize)]
struct MethodSummary {
    method: String,
    per_seed: Vec<Option<f64>>,
    mean: Option<f64>,
    std: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    seeds: Vec<u64>,
    /// Client-partition fingerprint per seed, shared by every method.
    partition_hashes: BTreeMap<u64, String>,
    methods: Vec<MethodSummary>,
}

pub fn compare(
    config: &Path,
    methods: &[Method],
    seeds: &[u64],
    output_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.to_vec()
    };
    let seeds: Vec<u64> = if seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        seeds.to_vec()
    };
    let out = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut partition_hashes = BTreeMap::new();
    let mut per_method: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    let mut metrics = Vec::new();
    for &seed in &seeds {
        let dataset = cfg.dataset(seed)?;
        for (mi, &method) in methods.iter().enumerate() {
            let mut fed = cfg.federation.clone();
            fed.seed = seed;
            fed.method = method;
            let exp = run_experiment(&dataset, &fed, cfg.head)?;
            let hash = exp.partition.fingerprint();
            match partition_hashes.get(&seed) {
                Some(h) if *h != hash => bail!("{method} saw a different partition for seed {seed}"),
                Some(_) => {}
                None => {
                    partition_hashes.insert(seed, hash);
                }
            }
            exp.report
                .write_json(out.join(format!("report-{method}-seed{seed}.json")))?;
            metrics.extend(metrics_rows(method.as_str(), seed, &exp.traces));
            per_method
                .entry(mi)
                .or_default()
                .push(exp.report.federation_top1_mean);
            print_summary(&exp.report);
        }
    }
    report::write_metrics(out.join("metrics.csv"), &metrics)?;

    let summaries: Vec<MethodSummary> = methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let per_seed = per_method.remove(&mi).unwrap_or_default();
            let scored: Vec<f64> = per_seed.iter().flatten().copied().collect();
            let (mean, std) = if scored.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&scored);
                (Some(m), s)
            };
            MethodSummary {
                method: m.to_string(),
                per_seed,
                mean,
                std,
            }
        })
        .collect();

    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    w.write_record(["method", "mean", "std", "seeds"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &summaries {
        w.write_record([
            s.method.clone(),
            cell(s.mean),
            cell(s.std),
            seeds.len().to_string(),
        ])?;
    }
    w.flush()?;
    let comparison = Comparison {
        seeds,
        partition_hashes,
        methods: summaries,
    };
    fs::write(
        out.join("compare.json"),
        serde_json::to_string_pretty(&comparison)? + "\n",
    )?;
    for s in &comparison.methods {
        println!(
            "{:<11} {} ± {}",
            s.method,
            cell(s.mean),
            s.std.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<LabeledDataset> {
    let ds = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path)
    } else {
        load_binary(path)
    };
    ds.with_context(|| format!("loading {}", path.display()))
}

fn load_encoder_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.stage == Stage::Baseline {
        bail!(
            "{} is a baseline checkpoint; a crl or pcl checkpoint is required",
            path.display()
        );
    }
    Ok(ck)
}

pub fn adapt(
    checkpoint: &Path,
    data: &[PathBuf],
    head: HeadKind,
    iterations: Option<usize>,
    test_fraction: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let ck = load_encoder_checkpoint(checkpoint)?;
    let encoder = Arc::new(ck.encoder("encoder")?);
    let cfg = &ck.config;
    let iterations = iterations.unwrap_or(cfg.adapt_iterations);

    let mut clients = Vec::with_capacity(data.len());
    for (id, path) in data.iter().enumerate() {
        let ds = with_split(
            load_dataset(path)?,
            test_fraction,
            cfg.seed.wrapping_add(id as u64),
        )?;
        if ds.dim() != encoder.input_dim() {
            bail!(
                "{} has {} features but the checkpoint encoder expects {}",
                path.display(),
                ds.dim(),
                encoder.input_dim()
            );
        }
        let tags = ds.split_tags().expect("split assigned").to_vec();
        let pick = |want: Split| -> Vec<usize> { (0..ds.len()).filter(|&i| tags[i] == want).collect() };
        clients.push(ClientData {
            id,
            train: ds.subset(&pick(Split::Train)),
            test: ds.subset(&pick(Split::Test)),
        });
    }

    let before = encoder.fingerprint();
    let models = clients
        .iter()
        .map(|c| adapt_new_client(&encoder, c, head, iterations, cfg))
        .collect::<repper::Result<Vec<_>>>()?;
    debug_assert_eq!(encoder.fingerprint(), before);
    let evals = evaluate(&clients, |c| models[c.id].predict(c.test.features()))?;
    let report = EvalReport::new(format!("adapt-{head}"), cfg.hash(), evals, Vec::new());
    report.write_json(out)?;
    for c in &report.clients {
        println!(
            "new client {} ({}): top-1 {}",
            c.id,
            data[c.id].display(),
            c.top1.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    print_summary(&report);
    Ok(())
}

pub fn export_embeddings(checkpoint: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let encoder = ck.encoder("encoder")?;
    let ds = load_dataset(data)?;
    if ds.dim() != encoder.input_dim() {
        bail!(
            "{} has {} features but the checkpoint encoder expects {}",
            data.display(),
            ds.dim(),
            encoder.input_dim()
        );
    }
    report::export_embeddings(&encoder, &ds, out)?;
    println!("wrote {} embeddings to {}", ds.len(), out.display());
    Ok(())
}
