//! Flat dotted-key experiment configuration.
//!
//! The format is one `key = value` pair per line, `#` comments, no nesting.
//! Unknown keys are rejected so typos surface immediately. The canonical
//! rendering (every key, sorted, with overrides applied) is what gets
//! hashed into the run's provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use xaimb_core::{AttributionMethod, TargetPolicy};

/// Pipeline stages that can be requested in `stages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Baseline,
    Explain,
    Curves,
    BinaryA,
    BinaryB,
    Soft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Explain => "explain",
            Stage::Curves => "curves",
            Stage::BinaryA => "binary_a",
            Stage::BinaryB => "binary_b",
            Stage::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "explain" => Ok(Stage::Explain),
            "curves" => Ok(Stage::Curves),
            "binary_a" => Ok(Stage::BinaryA),
            "binary_b" => Ok(Stage::BinaryB),
            "soft" => Ok(Stage::Soft),
            other => bail!("unknown stage '{other}'"),
        }
    }

    /// Execution order; every stage after `Baseline` depends on it.
    pub fn all_in_order() -> [Stage; 6] {
        [
            Stage::Baseline,
            Stage::Explain,
            Stage::Curves,
            Stage::BinaryA,
            Stage::BinaryB,
            Stage::Soft,
        ]
    }
}

/// Which dataset the run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX file pairs under `dataset.dir` with the standard distribution
    /// file names.
    FashionMnist,
    /// The built-in four-class quadrant dataset.
    Synthetic,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

/// Settings for one training phase (baseline fit, fine-tuning, soft stack).
#[derive(Debug, Clone)]
pub struct FitSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

/// The full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset_kind: DatasetKind,
    pub dataset_dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_samples: usize,
    pub synthetic_test_samples: usize,
    pub synthetic_side: usize,

    pub model_hidden: Vec<usize>,

    pub grid_search: bool,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub train: FitSection,
    pub validation_fraction: f64,

    pub method: AttributionMethod,
    pub ig_steps: usize,

    pub curve_step_fraction: f64,
    pub curve_sample_limit: usize,
    pub curve_methods: Vec<AttributionMethod>,

    pub explain_sample_limit: usize,

    pub finetune: FitSection,
    pub soft: FitSection,
    pub export_masked_idx: bool,

    pub stages: BTreeSet<Stage>,
    pub seed: u64,
    pub target: TargetPolicy,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_kind: DatasetKind::Synthetic,
            dataset_dir: PathBuf::from("data/fashion-mnist"),
            train_limit: 0,
            test_limit: 0,
            synthetic_samples: 2000,
            synthetic_test_samples: 400,
            synthetic_side: 8,
            model_hidden: vec![128, 64],
            grid_search: false,
            batch_sizes: vec![64, 128, 256],
            learning_rates: vec![0.001, 0.003, 0.005, 0.007, 0.009],
            train: FitSection {
                batch_size: 128,
                learning_rate: 0.001,
                max_epochs: 100,
                patience: 10,
            },
            validation_fraction: 0.3,
            method: AttributionMethod::IntegratedGradients,
            ig_steps: 50,
            curve_step_fraction: 0.01,
            curve_sample_limit: 1000,
            curve_methods: vec![
                AttributionMethod::Saliency,
                AttributionMethod::GuidedBp,
                AttributionMethod::IntegratedGradients,
            ],
            explain_sample_limit: 100,
            finetune: FitSection {
                batch_size: 128,
                learning_rate: 0.001,
                max_epochs: 30,
                patience: 5,
            },
            soft: FitSection {
                batch_size: 128,
                learning_rate: 0.001,
                max_epochs: 30,
                patience: 5,
            },
            export_masked_idx: false,
            stages: Stage::all_in_order().into_iter().collect(),
            seed: 0,
            target: TargetPolicy::GroundTruth,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(value: &str, f: F) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key '{key}'", lineno + 1);
            }
            cfg.apply(key, value)
                .with_context(|| format!("line {}: key '{key}'", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> { Ok(v.parse::<usize>()?) };
        let parse_f64 = |v: &str| -> Result<f64> { Ok(v.parse::<f64>()?) };
        match key {
            "dataset.kind" => {
                self.dataset_kind = match value {
                    "fashion-mnist" => DatasetKind::FashionMnist,
                    "synthetic" => DatasetKind::Synthetic,
                    other => bail!("unknown dataset kind '{other}'"),
                };
            }
            "dataset.dir" => self.dataset_dir = PathBuf::from(value),
            "dataset.train_limit" => self.train_limit = value.parse()?,
            "dataset.test_limit" => self.test_limit = value.parse()?,
            "dataset.synthetic.samples" => self.synthetic_samples = value.parse()?,
            "dataset.synthetic.test_samples" => self.synthetic_test_samples = value.parse()?,
            "dataset.synthetic.side" => self.synthetic_side = value.parse()?,
            "model.hidden" => self.model_hidden = parse_list(value, |s| parse_usize(s))?,
            "train.grid_search" => self.grid_search = value.parse()?,
            "train.batch_sizes" => self.batch_sizes = parse_list(value, |s| parse_usize(s))?,
            "train.learning_rates" => self.learning_rates = parse_list(value, |s| parse_f64(s))?,
            "train.batch_size" => self.train.batch_size = value.parse()?,
            "train.learning_rate" => self.train.learning_rate = value.parse()?,
            "train.max_epochs" => self.train.max_epochs = value.parse()?,
            "train.patience" => self.train.patience = value.parse()?,
            "train.validation_fraction" => self.validation_fraction = value.parse()?,
            "attribution.method" => self.method = AttributionMethod::parse(value)?,
            "attribution.ig_steps" => self.ig_steps = value.parse()?,
            "curves.step_fraction" => self.curve_step_fraction = value.parse()?,
            "curves.sample_limit" => self.curve_sample_limit = value.parse()?,
            "curves.methods" => {
                self.curve_methods = parse_list(value, |s| Ok(AttributionMethod::parse(s)?))?;
            }
            "explain.sample_limit" => self.explain_sample_limit = value.parse()?,
            "finetune.batch_size" => self.finetune.batch_size = value.parse()?,
            "finetune.learning_rate" => self.finetune.learning_rate = value.parse()?,
            "finetune.max_epochs" => self.finetune.max_epochs = value.parse()?,
            "finetune.patience" => self.finetune.patience = value.parse()?,
            "soft.batch_size" => self.soft.batch_size = value.parse()?,
            "soft.learning_rate" => self.soft.learning_rate = value.parse()?,
            "soft.max_epochs" => self.soft.max_epochs = value.parse()?,
            "soft.patience" => self.soft.patience = value.parse()?,
            "masking.export_idx" => self.export_masked_idx = value.parse()?,
            "stages" => {
                self.stages = parse_list(value, |s| Stage::parse(s))?.into_iter().collect();
            }
            "seed" => self.seed = value.parse()?,
            "target" => self.target = TargetPolicy::parse(value)?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_hidden.is_empty() {
            bail!("model.hidden must list at least one layer width");
        }
        if self.stages.is_empty() {
            bail!("stages must not be empty");
        }
        if !(self.curve_step_fraction > 0.0 && self.curve_step_fraction <= 1.0) {
            bail!("curves.step_fraction must lie in (0, 1]");
        }
        if self.ig_steps == 0 {
            bail!("attribution.ig_steps must be positive");
        }
        Ok(())
    }

    /// Checks that files referenced by the config exist.
    pub fn check_paths(&self) -> Result<()> {
        if self.dataset_kind == DatasetKind::FashionMnist {
            for name in Self::IDX_FILES {
                let p = self.dataset_dir.join(name);
                if !p.exists() {
                    bail!("dataset file missing: {}", p.display());
                }
            }
        }
        Ok(())
    }

    pub const IDX_FILES: [&'static str; 4] = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];

    /// Every key with its effective value, sorted: the hashed provenance
    /// form.
    pub fn canonical(&self) -> String {
        let mut map: BTreeMap<&'static str, String> = BTreeMap::new();
        map.insert("dataset.kind", self.dataset_kind.name().to_string());
        map.insert("dataset.dir", self.dataset_dir.display().to_string());
        map.insert("dataset.train_limit", self.train_limit.to_string());
        map.insert("dataset.test_limit", self.test_limit.to_string());
        map.insert("dataset.synthetic.samples", self.synthetic_samples.to_string());
        map.insert(
            "dataset.synthetic.test_samples",
            self.synthetic_test_samples.to_string(),
        );
        map.insert("dataset.synthetic.side", self.synthetic_side.to_string());
        map.insert(
            "model.hidden",
            self.model_hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("train.grid_search", self.grid_search.to_string());
        map.insert(
            "train.batch_sizes",
            self.batch_sizes
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "train.learning_rates",
            self.learning_rates
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("train.batch_size", self.train.batch_size.to_string());
        map.insert("train.learning_rate", self.train.learning_rate.to_string());
        map.insert("train.max_epochs", self.train.max_epochs.to_string());
        map.insert("train.patience", self.train.patience.to_string());
        map.insert(
            "train.validation_fraction",
            self.validation_fraction.to_string(),
        );
        map.insert("attribution.method", self.method.name().to_string());
        map.insert("attribution.ig_steps", self.ig_steps.to_string());
        map.insert("curves.step_fraction", self.curve_step_fraction.to_string());
        map.insert("curves.sample_limit", self.curve_sample_limit.to_string());
        map.insert(
            "curves.methods",
            self.curve_methods
                .iter()
                .map(|m| m.name().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("explain.sample_limit", self.explain_sample_limit.to_string());
        map.insert("finetune.batch_size", self.finetune.batch_size.to_string());
        map.insert(
            "finetune.learning_rate",
            self.finetune.learning_rate.to_string(),
        );
        map.insert("finetune.max_epochs", self.finetune.max_epochs.to_string());
        map.insert("finetune.patience", self.finetune.patience.to_string());
        map.insert("soft.batch_size", self.soft.batch_size.to_string());
        map.insert("soft.learning_rate", self.soft.learning_rate.to_string());
        map.insert("soft.max_epochs", self.soft.max_epochs.to_string());
        map.insert("soft.patience", self.soft.patience.to_string());
        map.insert("masking.export_idx", self.export_masked_idx.to_string());
        map.insert(
            "stages",
            self.stages
                .iter()
                .map(|s| s.name().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("seed", self.seed.to_string());
        map.insert("target", self.target.name().to_string());
        map.insert("output.dir", self.out_dir.display().to_string());

        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical form; changes whenever any field does.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}
