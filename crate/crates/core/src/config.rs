//! Flat JSON experiment configuration. Every field has a default, and the
//! fully expanded config is copied into emitted reports.

use std::path::{Path, PathBuf};

use ctg_autodiff::SgdConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CtgError, Result};
use crate::grounding::AblationFlags;
use crate::model::{ModelConfig, SegmentationMode};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub word_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub pos_dim: usize,
    pub phi_hidden: usize,
    pub video_dim: usize,
    pub video_hidden: usize,
    pub attention_hidden: usize,
    pub num_heads: usize,
    pub mode: SegmentationMode,

    pub use_masks: bool,
    pub use_refinement: bool,
    pub use_position: bool,
    pub use_weights: bool,

    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lstm_lr_mult: f64,
    pub inter_weight: f64,
    pub margin: f64,
    pub patience: usize,

    /// Train one model per modality and fuse their scores.
    pub fusion: bool,
    /// Weight of the first modality in the fused score.
    pub fusion_lambda: f64,
    /// Pick `fusion_lambda` from a 0.1-step grid by validation Average R@1
    /// after training.
    pub select_fusion_lambda: bool,
    /// Feature modalities; only the first is used without fusion.
    pub modalities: Vec<String>,

    pub train_path: Option<String>,
    pub val_path: Option<String>,
    pub test_path: Option<String>,
    pub embeddings_path: Option<String>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        ExperimentConfig {
            word_dim: m.word_dim,
            feature_dim: m.feature_dim,
            embed_dim: m.embed_dim,
            pos_dim: m.pos_dim,
            phi_hidden: m.phi_hidden,
            video_dim: m.video_dim,
            video_hidden: m.video_hidden,
            attention_hidden: m.attention_hidden,
            num_heads: m.num_heads,
            mode: m.mode,
            use_masks: true,
            use_refinement: true,
            use_position: true,
            use_weights: true,
            learning_rate: t.sgd.base_lr,
            lr_decay: t.sgd.decay,
            decay_period: t.sgd.decay_period,
            batch_size: t.sgd.batch_size,
            max_epochs: t.sgd.max_epochs,
            lstm_lr_mult: m.lstm_lr_mult,
            inter_weight: t.inter_weight,
            margin: t.margin,
            patience: t.patience,
            fusion: false,
            fusion_lambda: 0.3,
            select_fusion_lambda: false,
            modalities: vec!["rgb".into(), "flow".into()],
            train_path: None,
            val_path: None,
            test_path: None,
            embeddings_path: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CtgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CtgError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_path, &mut cfg.val_path, &mut cfg.test_path, &mut cfg.embeddings_path]
            .into_iter()
            .flatten()
        {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().sgd.validate().map_err(CtgError::Config)?;
        if !(self.margin >= 0.0) || !(self.inter_weight >= 0.0) {
            return Err(CtgError::Config("margin and inter_weight must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion_lambda) {
            return Err(CtgError::Config(format!("fusion_lambda must lie in [0, 1], got {}", self.fusion_lambda)));
        }
        let needed = if self.fusion { 2 } else { 1 };
        if self.modalities.len() < needed {
            return Err(CtgError::Config(format!("{needed} modalities needed, {} given", self.modalities.len())));
        }
        Ok(())
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_masks: self.use_masks,
            use_refinement: self.use_refinement,
            use_position: self.use_position,
            use_weights: self.use_weights,
        }
    }

    pub fn set_flags(&mut self, f: AblationFlags) {
        self.use_masks = f.use_masks;
        self.use_refinement = f.use_refinement;
        self.use_position = f.use_position;
        self.use_weights = f.use_weights;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            pos_dim: self.pos_dim,
            phi_hidden: self.phi_hidden,
            video_dim: self.video_dim,
            video_hidden: self.video_hidden,
            attention_hidden: self.attention_hidden,
            num_heads: self.num_heads,
            mode: self.mode,
            flags: self.flags(),
            lstm_lr_mult: self.lstm_lr_mult,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                base_lr: self.learning_rate,
                decay: self.lr_decay,
                decay_period: self.decay_period,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
            },
            margin: self.margin,
            inter_weight: self.inter_weight,
            patience: self.patience,
            max_inter_resamples: 50,
            seed: self.seed,
        }
    }

    /// Modalities that get a trained model.
    pub fn active_modalities(&self) -> Vec<String> {
        let n = if self.fusion { 2 } else { 1 };
        self.modalities.iter().take(n).cloned().collect()
    }

    pub fn require_path(&self, which: &str) -> Result<PathBuf> {
        let p = match which {
            "train" => &self.train_path,
            "val" => &self.val_path,
            "test" => &self.test_path,
            _ => &None,
        };
        p.as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| CtgError::Config(format!("{which}_path is not set")))
    }
}
