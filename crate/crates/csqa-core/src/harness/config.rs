//! Run configuration: flat dotted-key text files with strict unknown-key
//! rejection, since a silently ignored hyper-parameter is the worst failure
//! mode a reimplementation can have.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{CsqaError, Result};
use crate::model::ModelConfig;
use crate::mpmsca::{DwConvAxis, MaskMode};
use crate::tensor::init::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub resolution: usize,
    /// Pixel side of the class motif stamped into synthetic images.
    pub motif_size: usize,
    /// Random crop + horizontal flip during training.
    pub augment: bool,
    /// Image root for directory datasets.
    pub path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CsqaError::Config("dataset needs at least 2 classes".into()));
        }
        if self.kind == DataKind::Synthetic {
            if self.samples_per_class == 0 {
                return Err(CsqaError::Config("samples_per_class must be positive".into()));
            }
            if self.motif_size < 8 || self.motif_size + 4 > self.resolution {
                return Err(CsqaError::Config(format!(
                    "motif size {} must fit resolution {} with margin",
                    self.motif_size, self.resolution
                )));
            }
        }
        if self.kind == DataKind::Directory && self.path.is_none() {
            return Err(CsqaError::Config("directory dataset needs data.path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Constant learning rate of the auxiliary heads' own optimizer.
    pub aux_lr: f64,
    pub aux_momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DatasetSpec,
    pub out_dir: PathBuf,
    /// Stream per-sample QP probe records into the metrics file.
    pub qp_stream: bool,
}

impl RunConfig {
    /// Desk-scale defaults: every field of the canonical text corresponds to
    /// one config key.
    pub fn desk_default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(8),
            optimizer: OptimConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                warmup_epochs: 5,
                aux_lr: 0.01,
                aux_momentum: 0.9,
            },
            epochs: 20,
            batch_size: 16,
            seed: 1,
            data: DatasetSpec {
                kind: DataKind::Synthetic,
                classes: 8,
                samples_per_class: 32,
                test_samples_per_class: 8,
                resolution: 64,
                motif_size: 16,
                augment: false,
                path: None,
            },
            out_dir: PathBuf::from("runs/default"),
            qp_stream: false,
        }
    }

    /// The full-scale schedule the desk configuration scales down from:
    /// 50 epochs with 5 warm-up epochs, batch 16, momentum 0.9, weight decay
    /// 5e-4, auxiliary rate fixed at 0.01.
    pub fn paper_schedule() -> OptimConfig {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            aux_lr: 0.01,
            aux_momentum: 0.9,
        }
    }

    pub fn paper_epochs() -> usize {
        50
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CsqaError::Config("epochs and batch size must be positive".into()));
        }
        if self.optimizer.lr <= 0.0 || self.optimizer.aux_lr <= 0.0 {
            return Err(CsqaError::Config("learning rates must be positive".into()));
        }
        if self.data.resolution != self.model.backbone.resolution {
            return Err(CsqaError::Config(format!(
                "data resolution {} must match backbone resolution {}",
                self.data.resolution, self.model.backbone.resolution
            )));
        }
        if self.data.classes != self.model.classes {
            return Err(CsqaError::Config(format!(
                "data classes {} must match model classes {}",
                self.data.classes, self.model.classes
            )));
        }
        Ok(())
    }

    /// Canonical key = value rendering; also the checkpoint-embedded form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("run.seed", self.seed.to_string());
        kv("run.epochs", self.epochs.to_string());
        kv("run.batch_size", self.batch_size.to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("optimizer.lr", fmt_f64(self.optimizer.lr));
        kv("optimizer.momentum", fmt_f64(self.optimizer.momentum));
        kv("optimizer.weight_decay", fmt_f64(self.optimizer.weight_decay));
        kv("optimizer.warmup_epochs", self.optimizer.warmup_epochs.to_string());
        kv("optimizer.aux_lr", fmt_f64(self.optimizer.aux_lr));
        kv("optimizer.aux_momentum", fmt_f64(self.optimizer.aux_momentum));
        kv("model.classes", m.classes.to_string());
        kv("backbone.stages", m.backbone.stages.to_string());
        kv("backbone.channels", join(&m.backbone.channels));
        kv("backbone.blocks", m.backbone.blocks.to_string());
        kv("backbone.resolution", m.backbone.resolution.to_string());
        kv("mlsqe.enabled", m.mlsqe.enabled.to_string());
        kv("mlsqe.stages_used", m.mlsqe.stages_used.to_string());
        kv("mlsqe.proj_channels", m.mlsqe.proj_channels.to_string());
        kv("mlsqe.alpha", m.mlsqe.alpha.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        kv("mlsqe.eca_kernel", m.mlsqe.eca_kernel.to_string());
        kv("qp.lambda", fmt_f64(m.qp.lambda));
        kv("qp.reinit_period", m.qp.reinit_period.to_string());
        kv("navigator.enabled", m.navigator.enabled.to_string());
        kv("navigator.levels", m.navigator.levels.to_string());
        kv("navigator.anchor_scales", join(&m.navigator.anchor_scales));
        kv("navigator.grid_resolutions", join(&m.navigator.grid_resolutions));
        kv("navigator.parts", m.navigator.parts.to_string());
        kv("navigator.iou_threshold", fmt_f64(m.navigator.iou_threshold));
        kv("navigator.ranking_loss", m.navigator.ranking_loss.to_string());
        kv("navigator.dump_proposals", m.navigator.dump_proposals.to_string());
        kv("attention.enabled", m.attention.enabled.to_string());
        kv("attention.heads", m.attention.heads.to_string());
        kv("attention.top_v", m.attention.top_v.to_string());
        kv("attention.beta_init", fmt_f64(m.attention.beta_init));
        kv(
            "attention.mask_mode",
            match m.attention.mask_mode {
                MaskMode::Exclude => "exclude".into(),
                MaskMode::Literal => "literal".into(),
            },
        );
        kv(
            "attention.dwconv_axis",
            match m.attention.dwconv_axis {
                DwConvAxis::Channel => "channel".into(),
                DwConvAxis::Sequence => "sequence".into(),
            },
        );
        kv(
            "data.kind",
            match self.data.kind {
                DataKind::Synthetic => "synthetic".into(),
                DataKind::Directory => "directory".into(),
            },
        );
        kv("data.classes", self.data.classes.to_string());
        kv("data.samples_per_class", self.data.samples_per_class.to_string());
        kv("data.test_samples_per_class", self.data.test_samples_per_class.to_string());
        kv("data.resolution", self.data.resolution.to_string());
        kv("data.motif_size", self.data.motif_size.to_string());
        kv("data.augment", self.data.augment.to_string());
        if let Some(p) = &self.data.path {
            kv("data.path", p.display().to_string());
        }
        kv("metrics.qp_stream", self.qp_stream.to_string());
        s
    }

    /// Hash of the canonical text; embedded in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk_default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CsqaError::Format {
                path: "<config>".into(),
                detail: format!("line {}: expected `key = value`, got `{raw}`", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CsqaError::Format {
                    path: "<config>".into(),
                    detail: format!("duplicate key `{key}`"),
                });
            }
            cfg.apply(key, value).map_err(|e| CsqaError::Format {
                path: "<config>".into(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
        Self::parse(&text).map_err(|e| match e {
            CsqaError::Format { detail, .. } => CsqaError::Format { path: path.display().to_string(), detail },
            other => other,
        })
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "run.seed" => self.seed = parse(value)?,
            "run.epochs" => self.epochs = parse(value)?,
            "run.batch_size" => self.batch_size = parse(value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "optimizer.lr" => self.optimizer.lr = parse(value)?,
            "optimizer.momentum" => self.optimizer.momentum = parse(value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(value)?,
            "optimizer.warmup_epochs" => self.optimizer.warmup_epochs = parse(value)?,
            "optimizer.aux_lr" => self.optimizer.aux_lr = parse(value)?,
            "optimizer.aux_momentum" => self.optimizer.aux_momentum = parse(value)?,
            "model.classes" => m.classes = parse(value)?,
            "backbone.stages" => m.backbone.stages = parse(value)?,
            "backbone.channels" => m.backbone.channels = parse_list(value)?,
            "backbone.blocks" => m.backbone.blocks = parse(value)?,
            "backbone.resolution" => m.backbone.resolution = parse(value)?,
            "mlsqe.enabled" => m.mlsqe.enabled = parse_bool(value)?,
            "mlsqe.stages_used" => m.mlsqe.stages_used = parse(value)?,
            "mlsqe.proj_channels" => m.mlsqe.proj_channels = parse(value)?,
            "mlsqe.alpha" => m.mlsqe.alpha = parse_list(value)?,
            "mlsqe.eca_kernel" => m.mlsqe.eca_kernel = parse(value)?,
            "qp.lambda" => m.qp.lambda = parse(value)?,
            "qp.reinit_period" => m.qp.reinit_period = parse(value)?,
            "navigator.enabled" => m.navigator.enabled = parse_bool(value)?,
            "navigator.levels" => m.navigator.levels = parse(value)?,
            "navigator.anchor_scales" => m.navigator.anchor_scales = parse_list(value)?,
            "navigator.grid_resolutions" => m.navigator.grid_resolutions = parse_list(value)?,
            "navigator.parts" => m.navigator.parts = parse(value)?,
            "navigator.iou_threshold" => m.navigator.iou_threshold = parse(value)?,
            "navigator.ranking_loss" => m.navigator.ranking_loss = parse_bool(value)?,
            "navigator.dump_proposals" => m.navigator.dump_proposals = parse_bool(value)?,
            "attention.enabled" => m.attention.enabled = parse_bool(value)?,
            "attention.heads" => m.attention.heads = parse(value)?,
            "attention.top_v" => m.attention.top_v = parse(value)?,
            "attention.beta_init" => m.attention.beta_init = parse(value)?,
            "attention.mask_mode" => {
                m.attention.mask_mode = match value {
                    "exclude" => MaskMode::Exclude,
                    "literal" => MaskMode::Literal,
                    other => return Err(format!("unknown mask mode `{other}` (exclude|literal)")),
                }
            }
            "attention.dwconv_axis" => {
                m.attention.dwconv_axis = match value {
                    "channel" => DwConvAxis::Channel,
                    "sequence" => DwConvAxis::Sequence,
                    other => return Err(format!("unknown dwconv axis `{other}` (channel|sequence)")),
                }
            }
            "data.kind" => {
                self.data.kind = match value {
                    "synthetic" => DataKind::Synthetic,
                    "directory" => DataKind::Directory,
                    other => return Err(format!("unknown data kind `{other}` (synthetic|directory)")),
                }
            }
            "data.classes" => self.data.classes = parse(value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(value)?,
            "data.test_samples_per_class" => self.data.test_samples_per_class = parse(value)?,
            "data.resolution" => self.data.resolution = parse(value)?,
            "data.motif_size" => self.data.motif_size = parse(value)?,
            "data.augment" => self.data.augment = parse_bool(value)?,
            "data.path" => self.data.path = Some(PathBuf::from(value)),
            "metrics.qp_stream" => self.qp_stream = parse_bool(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v}")
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(format!("cannot parse `{other}` as bool")),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let trimmed = value.trim_start_matches('[').trim_end_matches(']');
    trimmed
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("cannot parse list item `{s}`: {e}")))
        .collect()
}
