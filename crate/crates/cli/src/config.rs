//! TOML run configuration. Every section is optional; command-line flags
//! override the values read here.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use posekit_core::classifier::{ExtractorKind, PatchSpec};
use posekit_core::data::synth::SyntheticConfig;
use posekit_core::eval::{LossScalingConfig, PipelineConfig};
use posekit_core::model::{FrameSource, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::exit::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen_data: GenDataSection,
    pub cluster: ClusterSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub smooth: SmoothSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSection {
    pub out: Option<PathBuf>,
    pub synth: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// absent means one class per example
    pub k: Option<usize>,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            k: None,
            tau: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// add mirrored copies of the training records
    pub flip: bool,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
pub enum EvalPolicy {
    /// staged pipeline report
    #[default]
    #[serde(rename = "pipeline")]
    Pipeline,
    /// plain MAP prediction, no clicks
    #[serde(rename = "none")]
    None,
    /// no click, one click on a fixed landmark, best single click
    #[serde(rename = "1pt")]
    #[value(name = "1pt")]
    OnePoint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub policy: EvalPolicy,
    pub out_dir: Option<PathBuf>,
    /// click tolerance in canonical units; half the model's tau when absent
    pub tolerance: Option<f64>,
    /// clicked landmark for `1pt`; the schema's nose when absent
    pub landmark: Option<usize>,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    #[default]
    Head,
    Loss,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub kind: BenchKind,
    pub out_dir: Option<PathBuf>,
    pub head: HeadBenchSection,
    pub loss: LossBenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadBenchSection {
    pub k_grid: Vec<usize>,
    pub repetitions: usize,
    pub extractor: ExtractorKind,
    pub patch: PatchSpec,
    pub seed: u64,
}

impl Default for HeadBenchSection {
    fn default() -> Self {
        Self {
            k_grid: vec![10, 100, 1_000, 10_000],
            repetitions: 100,
            extractor: ExtractorKind::default(),
            patch: PatchSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossBenchSection {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub flip: bool,
    pub scaling: LossScalingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSection {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub window: usize,
}

impl Default for SmoothSection {
    fn default() -> Self {
        Self {
            input: None,
            out: None,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub frame: FrameSource,
    pub refine: bool,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            host: "127.0.0.1".into(),
            port: 8080,
            frame: FrameSource::GroundTruth,
            refine: true,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("config: {}", e.message())).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn load_opt(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// A path given by flag or config, or a usage error naming the flag.
pub fn require(path: Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("missing {flag} (flag or config key)")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            r#"
            [train]
            data = "d"
            flip = true
            [train.model]
            k = 50
            tau = 0.2
            [train.model.extractor]
            kind = "random"
            dim = 64
            [train.model.train]
            loss = "softmax"
            [eval]
            policy = "1pt"
            [serve]
            port = 9000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.model.k, Some(50));
        assert_eq!(cfg.train.model.extractor, ExtractorKind::Random { dim: 64 });
        assert_eq!(cfg.eval.policy, EvalPolicy::OnePoint);
        assert_eq!(cfg.serve.port, 9000);
        assert_eq!(cfg.smooth.window, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["[train]\nbogus = 1", "[nope]\n", "[train.model]\nkk = 3", "[gen_data.synth]\nseeds = 1"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{text}");
        }
    }
}
