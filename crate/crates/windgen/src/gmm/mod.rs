//! Gaussian mixture baseline: EM fitting in PCA space, BIC model
//! selection, and rejection-sampling conditional generation.

mod em;
mod pipeline;
mod sample;

pub use em::{
    bic, em_fit, parameter_count, select_k, total_log_likelihood, BicPoint, EmFit, EmOptions,
    Gmm, KSelection, COLLAPSE_WEIGHT, COVARIANCE_REG,
};
pub use pipeline::{
    fit_gmm_pipeline, ConditionLayout, ConditionalDraw, GmmFitReport, GmmPipeline,
    GmmTrainConfig, DEFAULT_MAX_DRAWS,
};
pub use sample::{gmm_logpdf, gmm_sample};
