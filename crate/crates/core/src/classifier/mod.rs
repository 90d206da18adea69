//! The black-box classifier contract, the built-in convolutional scorer and
//! the external-process bridge.

mod bridge;
mod scorer;

use serde::{Deserialize, Serialize};

pub use bridge::{serve_stdio, BridgeClient, BridgeOptions, ServeExit, ServeOptions, BRIDGE_HELLO, BRIDGE_VERSION};
pub use scorer::{gradient_check, Architecture, ConvScorer, EpochLog, TrainingLog};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Probability that an image belongs to the NOK class.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("confidence {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn ok(self) -> f64 {
        1.0 - self.0
    }

    /// Confidence in `label`.
    pub fn of(self, label: Label) -> f64 {
        match label {
            Label::Nok => self.0,
            Label::Ok => 1.0 - self.0,
        }
    }

    /// Predicted class; exactly 0.5 resolves to OK.
    pub fn label(self) -> Label {
        if self.0 > 0.5 {
            Label::Nok
        } else {
            Label::Ok
        }
    }

    /// `max(f, 1 - f)`; lower means less certain.
    pub fn certainty(self) -> f64 {
        self.0.max(1.0 - self.0)
    }
}

/// Penultimate-layer activation vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// An opaque binary classifier: NOK confidence plus an embedding.
pub trait BlackBox: Send + Sync {
    fn predict(&self, image: &Image) -> Result<Confidence>;

    fn embed(&self, image: &Image) -> Result<Embedding>;

    fn embedding_len(&self) -> usize;

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Confidence>> {
        images.iter().map(|i| self.predict(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            patience: 10,
            max_epochs: 100,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be nonnegative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}
