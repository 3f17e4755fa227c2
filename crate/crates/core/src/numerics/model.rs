//! The trained text-to-feature projection and its model file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::linear::{fit_linear, LinearMap};
use super::pca::{apply_pca, fit_pca, PcaTarget, PcaTransform};
use super::NumericsError;
use crate::corpus::DescriptionPair;
use crate::features::{MidLevelVector, Profile, MID_LEVEL_DIM};
use crate::text_encoder::{encode_text_with, Aggregate, TextEmbedding, WordEmbeddingTable};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Ridge strength used when there are fewer training pairs than inputs.
pub const AUTO_RIDGE_LAMBDA: f64 = 1e-2;

/// Default variance fraction kept when PCA is enabled.
pub const DEFAULT_PCA_FRACTION: f64 = 0.95;

/// Per-dimension z-scoring of mid-level targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; MID_LEVEL_DIM],
    pub std: [f64; MID_LEVEL_DIM],
}

impl Standardization {
    /// Mean and sample standard deviation of `targets`.
    ///
    /// A dimension without spread (or a single target) gets `std = 1`.
    pub fn from_targets(targets: &[MidLevelVector]) -> Self {
        let n = targets.len();
        let mut mean = [0.0; MID_LEVEL_DIM];
        for t in targets {
            mean.iter_mut().zip(t.values()).for_each(|(m, v)| *m += v);
        }
        if n > 0 {
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        let mut std = [1.0; MID_LEVEL_DIM];
        if n > 1 {
            for (j, s) in std.iter_mut().enumerate() {
                let var = targets
                    .iter()
                    .map(|t| (t.values()[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64;
                let sd = var.sqrt();
                *s = if sd > 1e-12 { sd } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, v: &MidLevelVector) -> Profile {
        let x = v.values();
        Profile(std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j]))
    }

    pub fn invert(&self, p: &Profile) -> Profile {
        Profile(std::array::from_fn(|j| p.0[j] * self.std[j] + self.mean[j]))
    }
}

/// PCA setting as given on the command line: `off`, a component count or a variance fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum PcaSetting {
    Off,
    Components(usize),
    VarianceFraction(f64),
}

impl PcaSetting {
    pub fn target(&self) -> Option<PcaTarget> {
        match *self {
            PcaSetting::Off => None,
            PcaSetting::Components(k) => Some(PcaTarget::Components(k)),
            PcaSetting::VarianceFraction(v) => Some(PcaTarget::VarianceFraction(v)),
        }
    }

    pub fn is_enabled(&self) -> bool {
        !matches!(self, PcaSetting::Off)
    }
}

impl Default for PcaSetting {
    fn default() -> Self {
        PcaSetting::VarianceFraction(DEFAULT_PCA_FRACTION)
    }
}

impl FromStr for PcaSetting {
    type Err = String;

    /// `off`, an integer (component count) or a decimal in (0, 1] (variance fraction).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("off") || s.eq_ignore_ascii_case("none") {
            return Ok(PcaSetting::Off);
        }
        if let Ok(k) = s.parse::<usize>() {
            return if k >= 1 {
                Ok(PcaSetting::Components(k))
            } else {
                Err("component count must be >= 1".into())
            };
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v <= 1.0 => Ok(PcaSetting::VarianceFraction(v)),
            Ok(v) => Err(format!("variance fraction {v} outside (0, 1]")),
            Err(_) => Err(format!("expected off, a component count or a fraction, got {s:?}")),
        }
    }
}

impl fmt::Display for PcaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PcaSetting::Off => f.write_str("off"),
            PcaSetting::Components(k) => write!(f, "{k}"),
            PcaSetting::VarianceFraction(v) => write!(f, "{v:?}"),
        }
    }
}

/// Everything that determines a trained projection besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub pca: PcaSetting,
    /// `None` picks [`AUTO_RIDGE_LAMBDA`] when pairs < inputs, else 0.
    pub ridge_lambda: Option<f64>,
    pub standardize: bool,
    pub aggregate: Aggregate,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            pca: PcaSetting::default(),
            ridge_lambda: None,
            standardize: true,
            aggregate: Aggregate::Sum,
        }
    }
}

/// Text embedding → (PCA) → linear map → mid-level profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub pca: Option<PcaTransform>,
    pub map: LinearMap,
    pub feature_standardization: Option<Standardization>,
    pub aggregate: Aggregate,
    pub config_fingerprint: String,
    /// Training pair counts per source.
    pub trained_on: BTreeMap<String, usize>,
}

impl ProjectionModel {
    /// Checks the dimensional chain d → (k) → 8.
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.map.output_dim() != MID_LEVEL_DIM || self.map.bias.len() != MID_LEVEL_DIM {
            return Err(NumericsError::InvalidModel(format!(
                "map must produce {MID_LEVEL_DIM} outputs, produces {}",
                self.map.output_dim()
            )));
        }
        if let Some(pca) = &self.pca {
            if pca.output_dim() != self.map.input_dim() {
                return Err(NumericsError::InvalidModel(format!(
                    "PCA yields {} components but the map expects {} inputs",
                    pca.output_dim(),
                    self.map.input_dim()
                )));
            }
            if pca.explained_variance_ratio.len() != pca.output_dim() {
                return Err(NumericsError::InvalidModel(
                    "explained_variance_ratio length differs from component count".into(),
                ));
            }
        }
        if let Some(st) = &self.feature_standardization {
            if st.std.iter().any(|s| s.is_nan() || *s <= 0.0) {
                return Err(NumericsError::InvalidModel("standardization std must be > 0".into()));
            }
        }
        let finite = self.map.weights.iter().chain(self.map.bias.iter()).all(|v| v.is_finite())
            && self.pca.as_ref().is_none_or(|p| {
                p.mean.iter().chain(p.components.iter()).all(|v| v.is_finite())
            });
        if !finite {
            return Err(NumericsError::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Dimension of the text embeddings the model accepts.
    pub fn input_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.map.input_dim(), |p| p.input_dim())
    }

    pub fn standardizes(&self) -> bool {
        self.feature_standardization.is_some()
    }

    /// Maps a measured feature vector into the model's comparison coordinates.
    pub fn to_comparison_space(&self, v: &MidLevelVector) -> Profile {
        match &self.feature_standardization {
            Some(st) => st.apply(v),
            None => Profile::from(*v),
        }
    }

    /// Projects a raw embedding vector.
    pub fn project_vector(&self, x: &[f64]) -> Result<Profile, NumericsError> {
        let input = match &self.pca {
            Some(pca) => apply_pca(pca, x)?,
            None => {
                if x.len() != self.map.input_dim() {
                    return Err(NumericsError::DimensionMismatch {
                        expected: self.map.input_dim(),
                        found: x.len(),
                    });
                }
                DVector::from_column_slice(x)
            }
        };
        let out = self.map.apply(&input)?;
        let mut arr = [0.0; MID_LEVEL_DIM];
        arr.copy_from_slice(out.as_slice());
        Ok(Profile(arr))
    }
}

/// Projects an encoded text into the model's comparison coordinates.
pub fn project_text(model: &ProjectionModel, embedding: &TextEmbedding) -> Result<Profile, NumericsError> {
    model.project_vector(&embedding.vector)
}

/// Fits PCA (optional), target standardization (optional) and the linear map.
///
/// `inputs` holds one text embedding per row, `targets` the matching
/// mid-level vectors.
pub fn fit_projection(
    inputs: &DMatrix<f64>,
    targets: &[MidLevelVector],
    config: &ProjectionConfig,
) -> Result<ProjectionModel, NumericsError> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(NumericsError::EmptyInput);
    }
    if targets.len() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: n,
            found: targets.len(),
        });
    }
    let pca = match config.pca.target() {
        Some(target) => Some(fit_pca(inputs, target)?),
        None => None,
    };
    let reduced = match &pca {
        Some(p) => {
            let mut out = DMatrix::zeros(n, p.output_dim());
            for (i, row) in inputs.row_iter().enumerate() {
                let x: Vec<f64> = row.iter().copied().collect();
                out.set_row(i, &apply_pca(p, &x)?.transpose());
            }
            out
        }
        None => inputs.clone(),
    };
    let standardization = config.standardize.then(|| Standardization::from_targets(targets));
    let y = DMatrix::from_fn(n, MID_LEVEL_DIM, |i, j| match &standardization {
        Some(st) => st.apply(&targets[i]).0[j],
        None => targets[i].values()[j],
    });
    let lambda = config.ridge_lambda.unwrap_or(if n < reduced.ncols() {
        AUTO_RIDGE_LAMBDA
    } else {
        0.0
    });
    let map = fit_linear(&reduced, &y, lambda)?;
    let model = ProjectionModel {
        pca,
        map,
        feature_standardization: standardization,
        aggregate: config.aggregate,
        config_fingerprint: String::new(),
        trained_on: BTreeMap::new(),
    };
    model.validate()?;
    Ok(model)
}

/// Encodes training pairs, fits the projection and fingerprints the result.
///
/// Pairs whose text has no in-vocabulary token are skipped with a warning.
pub fn train_model(
    table: &WordEmbeddingTable,
    pairs: &[DescriptionPair],
    config: &ProjectionConfig,
) -> Result<ProjectionModel, NumericsError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut trained_on = BTreeMap::new();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    hasher.update(table.dimension().to_le_bytes());
    let mut skipped = 0usize;
    for pair in pairs {
        match encode_text_with(table, &pair.text, config.aggregate) {
            Ok(e) => {
                rows.extend(e.vector);
                targets.push(pair.target_features);
                *trained_on.entry(pair.source.to_string()).or_insert(0) += 1;
                hasher.update(pair.source.as_str().as_bytes());
                hasher.update([0u8]);
                hasher.update(pair.text.as_bytes());
                hasher.update([0u8]);
                for v in pair.target_features.values() {
                    hasher.update(v.to_le_bytes());
                }
            }
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} training pair(s) skipped: no in-vocabulary tokens");
    }
    if targets.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let inputs = DMatrix::from_row_slice(targets.len(), table.dimension(), &rows);
    let mut model = fit_projection(&inputs, &targets, config)?;
    model.config_fingerprint = hex::encode(&hasher.finalize()[..16]);
    model.trained_on = trained_on;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pca: Option<PcaDocument>,
    map: MapDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_standardization: Option<Standardization>,
    #[serde(default)]
    aggregate: Aggregate,
    config_fingerprint: String,
    #[serde(default)]
    trained_on: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct PcaDocument {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MapDocument {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    ridge_lambda: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, NumericsError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(NumericsError::InvalidModel(format!("{what} is not a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

pub fn model_to_string(model: &ProjectionModel) -> String {
    let doc = ModelDocument {
        schema_version: MODEL_SCHEMA_VERSION,
        pca: model.pca.as_ref().map(|p| PcaDocument {
            mean: p.mean.iter().copied().collect(),
            components: rows_of(&p.components),
            explained_variance_ratio: p.explained_variance_ratio.clone(),
        }),
        map: MapDocument {
            weights: rows_of(&model.map.weights),
            bias: model.map.bias.iter().copied().collect(),
            ridge_lambda: model.map.ridge_lambda,
        },
        feature_standardization: model.feature_standardization,
        aggregate: model.aggregate,
        config_fingerprint: model.config_fingerprint.clone(),
        trained_on: model.trained_on.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}

pub fn parse_model(text: &str) -> Result<ProjectionModel, NumericsError> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| NumericsError::InvalidModel(e.to_string()))?;
    if doc.schema_version != MODEL_SCHEMA_VERSION {
        return Err(NumericsError::InvalidModel(format!(
            "unsupported schema_version {}",
            doc.schema_version
        )));
    }
    let pca = match doc.pca {
        Some(p) => {
            let components = matrix_from_rows(&p.components, "pca.components")?;
            if components.ncols() != p.mean.len() {
                return Err(NumericsError::InvalidModel("pca.mean length differs from components".into()));
            }
            Some(PcaTransform {
                mean: DVector::from_vec(p.mean),
                components,
                explained_variance_ratio: p.explained_variance_ratio,
            })
        }
        None => None,
    };
    let model = ProjectionModel {
        pca,
        map: LinearMap {
            weights: matrix_from_rows(&doc.map.weights, "map.weights")?,
            bias: DVector::from_vec(doc.map.bias),
            ridge_lambda: doc.map.ridge_lambda,
        },
        feature_standardization: doc.feature_standardization,
        aggregate: doc.aggregate,
        config_fingerprint: doc.config_fingerprint,
        trained_on: doc.trained_on,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &ProjectionModel, path: impl AsRef<Path>) -> Result<(), NumericsError> {
    let path = path.as_ref();
    fs::write(path, model_to_string(model)).map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ProjectionModel, NumericsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}
