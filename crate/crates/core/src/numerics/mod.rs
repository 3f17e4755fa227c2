//! PCA and least-squares fitting of the projection from text-embedding space
//! to the mid-level feature space.

use nalgebra::DMatrix;
use thiserror::Error;

pub mod linear;
pub mod model;
pub mod pca;

pub use linear::{fit_linear, ridge_objective, LinearMap};
pub use model::{
    fit_projection, load_model, model_to_string, parse_model, project_text, save_model, train_model,
    PcaSetting, ProjectionConfig, ProjectionModel, Standardization, AUTO_RIDGE_LAMBDA, DEFAULT_PCA_FRACTION,
};
pub use pca::{apply_pca, fit_pca, PcaTarget, PcaTransform};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("component count must be at least 1")]
    InvalidComponentCount,
    #[error("variance fraction {0} outside (0, 1]")]
    InvalidVarianceFraction(f64),
    #[error("ridge lambda must be finite and >= 0, got {0}")]
    InvalidRidge(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file: {0}")]
    Io(String),
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(what))
    }
}
