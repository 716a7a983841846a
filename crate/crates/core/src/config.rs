//! Run configuration shared by every command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::proto_net::{LabelMode, Normalizer};
use crate::seq_model::ModelConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `train.jsonl`, `val.jsonl`, `test.jsonl` and `vocab.json`.
    pub data_dir: Option<PathBuf>,
    /// Prototype matrix file.
    pub prototypes: Option<PathBuf>,
    /// Where run artifacts are written.
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, clustering, shuffling and dropout.
    pub seed: u64,
    pub num_categories: usize,
    pub prototypes_per_category: usize,
    /// Prototypes kept per query position.
    pub gamma: usize,
    pub query_heads: usize,
    /// Query width d.
    pub query_dim: usize,
    /// Prototype projection width C_P.
    pub proto_proj_dim: usize,
    /// Global visual feature width C₁.
    pub global_visual_dim: usize,
    /// Global textual feature width C₂.
    pub global_text_dim: usize,
    pub normalizer: Normalizer,
    pub inference_label_mode: LabelMode,
    /// Probability that a training sample queries every category instead of
    /// its labels, matching the all-ones mask used at inference.
    pub label_mask_dropout: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate of the prototype matrix, querying and fusion layers.
    pub lr_prototype: f64,
    /// Learning rate of the visual extractor and the encoder-decoder.
    pub lr_model: f64,
    /// Multiplier applied to both rates after every epoch.
    pub lr_decay: f64,
    /// Beam width for evaluation and generation; 1 is greedy.
    pub beam_size: usize,
    /// Beam width used for the per-epoch validation score.
    pub validation_beam_size: usize,
    /// Random instead of clustered prototype initialization.
    pub disable_pi: bool,
    /// Fixed target 1 instead of the label-overlap tolerance.
    pub disable_imlcs: bool,
    /// No prototype pipeline at all.
    pub disable_cmpnet: bool,
    /// Worker threads for evaluation and generation.
    pub jobs: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_categories: 14,
            prototypes_per_category: 20,
            gamma: 15,
            query_heads: 2,
            query_dim: 32,
            proto_proj_dim: 32,
            global_visual_dim: 16,
            global_text_dim: 16,
            normalizer: Normalizer::Softmax,
            inference_label_mode: LabelMode::All,
            label_mask_dropout: 0.5,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            batch_size: 4,
            epochs: 12,
            lr_prototype: 2e-3,
            lr_model: 1e-3,
            lr_decay: 0.8,
            beam_size: 3,
            validation_beam_size: 1,
            disable_pi: false,
            disable_imlcs: false,
            disable_cmpnet: false,
            jobs: 1,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Prototype width D.
    pub fn proto_dim(&self) -> usize {
        self.global_visual_dim + self.global_text_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        need(
            self.num_categories > 0,
            "num_categories: must be positive".into(),
        );
        need(
            self.prototypes_per_category > 0,
            "prototypes_per_category: must be positive".into(),
        );
        need(self.gamma > 0, "gamma: must be positive".into());
        need(
            self.query_heads > 0 && self.query_dim % self.query_heads == 0,
            format!(
                "query_dim: {} is not divisible by query_heads {}",
                self.query_dim, self.query_heads
            ),
        );
        need(
            self.proto_proj_dim > 0 && self.global_visual_dim > 0 && self.global_text_dim > 0,
            "proto_proj_dim, global_visual_dim, global_text_dim: must be positive".into(),
        );
        need(self.batch_size > 0, "batch_size: must be positive".into());
        for (name, lr) in [
            ("lr_prototype", self.lr_prototype),
            ("lr_model", self.lr_model),
        ] {
            need(
                lr > 0.0 && lr.is_finite(),
                format!("{name}: {lr} must be > 0"),
            );
        }
        need(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            format!("lr_decay: {} not in (0, 1]", self.lr_decay),
        );
        need(self.beam_size > 0, "beam_size: must be positive".into());
        need(
            self.validation_beam_size > 0,
            "validation_beam_size: must be positive".into(),
        );
        need(self.jobs > 0, "jobs: must be positive".into());
        need(
            (0.0..=1.0).contains(&self.label_mask_dropout),
            format!(
                "label_mask_dropout: {} not in [0, 1]",
                self.label_mask_dropout
            ),
        );
        if let Err(e) = self.loss.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Parses JSON, rejecting unknown keys, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short tag naming the active ablation switches.
    pub fn variant_name(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_pi {
            parts.push("w/o PI");
        }
        if self.disable_imlcs {
            parts.push("w/o IMLCS");
        }
        if self.disable_cmpnet {
            parts.push("w/o CMPNet");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join(", ")
        }
    }
}
