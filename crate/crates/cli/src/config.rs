use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use repper::data::{load_binary, load_csv, synth_gaussian_mixture, LabeledDataset, MixtureSpec};
use repper::federation::FederationConfig;
use repper::nn::HeadKind;
use repper::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synth,
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Required for csv and binary sources; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Fraction held out for testing when the file carries no split.
    pub test_fraction: f64,
    pub synth: MixtureSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synth,
            path: None,
            test_fraction: 0.2,
            synth: MixtureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Head family for the personalization stage.
    pub head: HeadKind,
    pub output_dir: PathBuf,
    /// Seeds swept by `compare`; `run` uses `federation.seed`.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub federation: FederationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Logistic,
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            federation: FederationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.federation.validate()?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            bail!("data.test_fraction must lie in [0, 1)");
        }
        if self.data.source != SourceKind::Synth && self.data.path.is_none() {
            bail!("data.path is required for a {:?} source", self.data.source);
        }
        Ok(())
    }

    /// The dataset for `seed`. Synthetic data and random splits depend on it.
    pub fn dataset(&self, seed: u64) -> anyhow::Result<LabeledDataset> {
        let ds = match self.data.source {
            SourceKind::Synth => {
                let mut rng = RngStream::new(seed, "synth", 0, 0);
                return Ok(synth_gaussian_mixture(&self.data.synth, &mut rng)?.dataset);
            }
            SourceKind::Csv => load_csv(self.data.path.as_ref().expect("validated"))?,
            SourceKind::Binary => load_binary(self.data.path.as_ref().expect("validated"))?,
        };
        with_split(ds, self.data.test_fraction, seed)
    }
}

pub fn with_split(ds: LabeledDataset, test_fraction: f64, seed: u64) -> anyhow::Result<LabeledDataset> {
    if ds.split_tags().is_some() {
        return Ok(ds);
    }
    Ok(ds.with_random_split(test_fraction, &mut RngStream::new(seed, "split", 0, 0))?)
}
