use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::graph::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Train-time crop length; `None` keeps whole videos.
    pub max_frames: Option<usize>,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub attribute_loss_weight: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            learning_rate: 3e-3,
            batch_size: 8,
            max_frames: Some(64),
            plateau_factor: 0.5,
            plateau_patience: 8,
            max_epochs: 200,
            seed: 7,
            attribute_loss_weight: 1.0,
            clip_grad_norm: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            learning_rate: 1e-4,
            batch_size: 32,
            max_frames: None,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        // A zero rate is allowed: it runs the loop without moving any weight.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.plateau_factor.is_finite() && self.plateau_factor > 0.0) {
            return Err(Error::Config(format!(
                "plateau_factor must be positive, got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_factor >= 1.0 {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_frames == Some(0) {
            return Err(Error::Config("batch_size and max_frames must be at least 1".into()));
        }
        if !(self.attribute_loss_weight.is_finite() && self.attribute_loss_weight >= 0.0) {
            return Err(Error::Config("attribute_loss_weight must be non-negative".into()));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }

    /// Takes the input, attribute and class sizes from the corpus.
    pub fn fit_to(mut self, corpus: &Corpus) -> Self {
        self.model.feature_dim = corpus.feature_dim;
        self.model.attributes = corpus.attribute_count();
        self.model.classes = corpus.class_count;
        self
    }
}
