//! Run configuration: flat `section.key = value` lines with `#` comments.
//!
//! Values use TOML syntax (quoted strings, bracketed lists), so any file of
//! dotted keys is also a valid TOML document.

use std::path::{Path, PathBuf};

use gaitrdae::blocks::ModelConfig;
use gaitrdae::synth::{DatasetSpec, GalleryProtocol};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 4],
    /// Fraction of channels routed through the offset branch.
    pub r: f64,
    pub enable_rda: bool,
    pub enable_sme: bool,
    pub enable_cme: bool,
    pub parts: usize,
    /// Training clip length.
    pub frames: usize,
    /// Number of training identities; 0 until a dataset fixes it.
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            height: d.height,
            width: d.width,
            channels: d.channels,
            r: d.offset_ratio,
            enable_rda: d.enable_rda,
            enable_sme: d.enable_sme,
            enable_cme: d.enable_cme,
            parts: d.parts,
            frames: d.frames,
            num_classes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_ids: usize,
    pub test_ids: usize,
    pub seqs_per_id: usize,
    /// Rendered frames per sequence.
    pub frames: usize,
    /// `grew` (two gallery sequences per test id) or `gait3d` (one).
    pub protocol: String,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            train_ids: d.train_ids,
            test_ids: d.test_ids,
            seqs_per_id: d.seqs_per_id,
            frames: d.frames,
            protocol: d.protocol.as_str().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub margin: f64,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    pub max_iters: usize,
    /// Identities per batch.
    pub p: usize,
    /// Sequences per identity.
    pub k: usize,
    /// Upper bound on the global L2 norm of each step's gradient; 0 disables
    /// clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.1,
            weight_decay: 0.0005,
            momentum: 0.9,
            margin: 0.2,
            milestones: vec![2000, 3500, 4500],
            max_iters: 5000,
            p: 4,
            k: 4,
            clip_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset directory (holds `manifest.csv`).
    pub data: PathBuf,
    /// Output directory for training and export artifacts.
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// One `section.key = value` line per field.
    pub fn serialize(&self) -> String {
        let value = toml::Value::try_from(self).expect("config fields are plain data");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    /// Model configuration; `num_classes` must be fixed.
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            height: m.height,
            width: m.width,
            channels: m.channels,
            offset_ratio: m.r,
            enable_rda: m.enable_rda,
            enable_sme: m.enable_sme,
            enable_cme: m.enable_cme,
            parts: m.parts,
            num_classes: m.num_classes,
            frames: m.frames,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> CliResult<DatasetSpec> {
        let spec = DatasetSpec {
            train_ids: self.data.train_ids,
            test_ids: self.data.test_ids,
            seqs_per_id: self.data.seqs_per_id,
            frames: self.data.frames,
            height: self.model.height,
            width: self.model.width,
            protocol: GalleryProtocol::parse(&self.data.protocol)?,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the training schedule and everything but `num_classes`.
    pub fn validate(&self) -> CliResult<()> {
        let t = &self.train;
        let bad = |m: String| Err(CliError::Config(m));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.weight_decay >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return bad("train.weight_decay must be >= 0 and train.momentum in [0, 1)".into());
        }
        if !(t.clip_norm >= 0.0 && t.clip_norm.is_finite()) {
            return bad(format!("train.clip_norm must be finite and >= 0, got {}", t.clip_norm));
        }
        if !(t.margin >= 0.0) {
            return bad(format!("train.margin must be >= 0, got {}", t.margin));
        }
        if t.max_iters == 0 {
            return bad("train.max_iters must be positive".into());
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) || t.milestones.iter().any(|&m| m >= t.max_iters) {
            return bad(format!(
                "train.milestones {:?} must be strictly increasing and below max_iters {}",
                t.milestones, t.max_iters
            ));
        }
        if t.p < 2 || t.k < 2 {
            return bad(format!("batch P={} K={} must both be at least 2", t.p, t.k));
        }
        let mut probe = self.clone();
        probe.model.num_classes = probe.model.num_classes.max(1);
        probe.model_config()?;
        GalleryProtocol::parse(&self.data.protocol)?;
        Ok(())
    }

    /// Sets `max_iters` to `iters`, scaling each milestone by the same
    /// factor and dropping those that land on 0 or at or beyond `iters`.
    pub fn set_iters(&mut self, iters: usize) {
        let from = self.train.max_iters.max(1) as u128;
        let mut m: Vec<usize> = self
            .train
            .milestones
            .iter()
            .map(|&m| (m as u128 * iters as u128 / from) as usize)
            .filter(|&m| m > 0 && m < iters)
            .collect();
        m.dedup();
        self.train.milestones = m;
        self.train.max_iters = iters;
    }

    /// Learning rate at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = self.train.milestones.iter().filter(|&&m| m <= iter).count();
        self.train.lr * 0.1f64.powi(drops as i32)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push_str(&format!("{prefix} = {v}\n")),
    }
}
