//! Language-free anomaly detection on frozen vision-encoder features.
//!
//! Learned normal/anomaly prototypes per encoder layer score the global
//! token (image level) and every patch token (pixel level). An optional
//! memory of normal reference tokens adds nearest-neighbour distances for
//! few-shot use.

pub mod error;
pub mod fewshot;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use fewshot::{build_bank, predict_few_shot, FewShotOptions, MemoryBank, TokenStore};
pub use model::{
    predict_zero_shot, AnomalyPrediction, FeatureStack, HeadWeights, LayerFeatures, LayerWeights, Provenance,
    WeightBank,
};
pub use raster::{Grid, Mask, Raster};
pub use training::{train, TrainConfig, TrainOutcome};
