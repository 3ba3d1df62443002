//! Experiment configuration (TOML).
//!
//! ```toml
//! name = "arch_interpolation"
//! seed = 0
//! out = "runs/arch_interpolation"
//!
//! [dataset]
//! kind = "arch"
//! n = 500
//! noise = 0.1
//!
//! [metric]
//! kind = "isomap"
//! k = 5
//!
//! [isometry]
//! alpha2 = 5.0
//! alpha4 = 0.001
//! ```
//!
//! Every section except `name` and `dataset` is optional. The top-level
//! `seed` drives every stage and overrides any `seed` set inside a section.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pfm_core::datasets::{CorpusParams, SwissRollParams};
use pfm_core::flow_matching::{FlowMode, FlowTrainConfig};
use pfm_core::geometry::Space;
use pfm_core::isometry_trainer::IsometryTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub isometry: IsometryTrainConfig,
    #[serde(default)]
    pub flow: Option<FlowSpec>,
    #[serde(default)]
    pub evaluation: EvaluationPlan,
    #[serde(default)]
    pub analogue: Option<AnalogueSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Arch {
        n: usize,
        noise: f64,
    },
    SwissRoll {
        n: usize,
        noise: f64,
        #[serde(default)]
        roll: SwissRollParams,
    },
    /// Point cloud CSV with header `[id,]x_1,...`.
    PointsCsv {
        path: PathBuf,
    },
    /// Generated sequence corpus.
    SequenceCorpus {
        #[serde(default)]
        corpus: CorpusParams,
        #[serde(default)]
        codec: CodecSpec,
    },
    /// Sequence CSV with header `id,sequence[,activity]`.
    SequencesCsv {
        path: PathBuf,
        #[serde(default)]
        codec: CodecSpec,
    },
}

impl DatasetSpec {
    pub fn is_sequence(&self) -> bool {
        matches!(self, DatasetSpec::SequenceCorpus { .. } | DatasetSpec::SequencesCsv { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSpec {
    pub embed_dim: usize,
    /// Defaults to the longest sequence in the data.
    pub max_len: Option<usize>,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    /// Graph geodesics on the symmetrised k-nearest-neighbour graph.
    Isomap { k: usize },
    /// Composite edit-distance and physico-chemical metric, standardised on
    /// the training split. `properties` overrides the built-in tables.
    Sequence {
        #[serde(default)]
        properties: Option<PathBuf>,
    },
    /// Precomputed matrix in the binary format written by `distances`.
    File { path: PathBuf },
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec::Isomap { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub mode: FlowMode,
    #[serde(default)]
    pub train: FlowTrainConfig,
    /// Samples drawn by `generate`; defaults to the test-split size.
    #[serde(default)]
    pub n_samples: Option<usize>,
    /// Frames in the exported trajectory (0 disables it).
    #[serde(default = "default_frames")]
    pub n_frames: usize,
}

fn default_frames() -> usize {
    11
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationPlan {
    pub interpolation: Vec<Space>,
    pub n_pairs: usize,
}

impl Default for EvaluationPlan {
    fn default() -> Self {
        Self {
            interpolation: vec![Space::Data, Space::Latent, Space::Submanifold],
            n_pairs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalogueSpec {
    pub taus: Vec<f64>,
    /// Significance level of the KS tests.
    pub alpha: f64,
}

impl Default for AnalogueSpec {
    fn default() -> Self {
        Self {
            taus: vec![0.01, 0.1, 0.5],
            alpha: 0.05,
        }
    }
}

impl ExperimentConfig {
    /// Parse, apply command-line overrides and validate.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
        let mut cfg: Self = toml::from_str(text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok((cfg, bytes))
    }

    fn apply_seed(&mut self) {
        self.isometry.seed = self.seed;
        if let Some(f) = self.flow.as_mut() {
            f.train.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.isometry.validate().context("invalid [isometry] section")?;
        if let Some(f) = &self.flow {
            f.train.validate().context("invalid [flow.train] section")?;
        }
        match &self.dataset {
            DatasetSpec::Arch { n, noise } | DatasetSpec::SwissRoll { n, noise, .. } => {
                if *n < 2 {
                    bail!("dataset.n: need at least 2 points");
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    bail!("dataset.noise: must be >= 0");
                }
            }
            DatasetSpec::PointsCsv { path } | DatasetSpec::SequencesCsv { path, .. } => {
                if !path.exists() {
                    bail!("dataset.path: {} does not exist", path.display());
                }
            }
            DatasetSpec::SequenceCorpus { .. } => {}
        }
        match &self.metric {
            MetricSpec::Isomap { k } if *k == 0 => bail!("metric.k: must be at least 1"),
            MetricSpec::File { path } if !path.exists() => {
                bail!("metric.path: {} does not exist", path.display())
            }
            MetricSpec::Sequence { properties: Some(p) } if !p.exists() => {
                bail!("metric.properties: {} does not exist", p.display())
            }
            MetricSpec::Sequence { .. } if !self.dataset.is_sequence() => {
                bail!("metric.kind: the sequence metric needs a sequence dataset")
            }
            _ => {}
        }
        if let Some(a) = &self.analogue {
            if a.taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                bail!("analogue.taus: temperatures must be >= 0");
            }
            if !(a.alpha > 0.0 && a.alpha < 1.0) {
                bail!("analogue.alpha: must lie in (0, 1)");
            }
        }
        Ok(())
    }
}
