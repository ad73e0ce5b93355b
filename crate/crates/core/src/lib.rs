//! Calibrated out-of-distribution detection over pre-extracted embeddings.
//!
//! A linear probe and a nearest-mean classifier are trained on in-distribution
//! embeddings. Their class-conditional responses span a two-dimensional score
//! space in which every class is modelled by a bivariate Gaussian and tested
//! against a broad OOD reference Gaussian with a Neyman-Pearson threshold, so
//! that every class is falsely rejected at the same user-chosen rate.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod linear_probe;
pub mod metrics;
pub mod model_io;
pub mod nearest_mean;
pub mod pipeline;
pub mod synthetic;

pub use dataset::{
    apply_split, load_embeddings, write_embeddings, EmbeddingRecord, EmbeddingSet, Split,
    SplitManifest,
};
pub use detector::{
    build_ood_model, calibrate, fit_class_gaussians, log_likelihood_ratio, score_point,
    ClassGaussian, ClassStrategy, GroodModel, OodGaussian, OodPriorConfig, ScorePoint, Verdict,
};
pub use error::{Error, ErrorFamily, Result};
pub use linear_probe::{train_lp, LinearProbeModel, LpTrainConfig};
pub use metrics::{EvalReport, ScoredSample};
pub use nearest_mean::{fit_nm, NearestMeanModel};
