//! Explainable anomaly classification workbench: inverted randomized-input
//! saliency (InvRISE) and its RISE baseline, embedding-space near hits and
//! misses, and the Near CAIPI interactive learning loop around any black-box
//! binary classifier.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod interaction;
pub mod metrics;
pub mod neighbors;
pub mod rng;
pub mod saliency;

pub use classifier::{BlackBox, Confidence, ConvScorer, Embedding, TrainConfig};
pub use dataset::{Label, LabeledInstance};
pub use error::{Error, Result};
pub use imaging::{BinaryMask, Image};
pub use saliency::{MaskConfig, MaskSet, SaliencyMap, SaliencyMethod};
