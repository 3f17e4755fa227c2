//! Per-piece ranking of performances by cosine similarity to a projected query.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Catalog;
use crate::features::{Profile, DIMENSION_NAMES, MID_LEVEL_DIM};
use crate::numerics::{project_text, NumericsError, ProjectionModel, Standardization};
use crate::text_encoder::{encode_text_with, EncodeError, WordEmbeddingTable};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown piece {0:?}")]
    UnknownPiece(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("index was built for model {index} but model {model} was supplied")]
    FingerprintMismatch { index: String, model: String },
    #[error("performance {0:?} has non-finite features in comparison space")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedPerformance {
    pub performance_id: String,
    pub artist_label: String,
    /// Features in the model's comparison coordinates.
    pub profile: Profile,
}

/// Immutable per-piece search space.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    by_piece: BTreeMap<String, Vec<IndexedPerformance>>,
    standardization: Option<Standardization>,
    model_fingerprint: String,
}

impl RetrievalIndex {
    pub fn piece(&self, piece_id: &str) -> Option<&[IndexedPerformance]> {
        self.by_piece.get(piece_id).map(Vec::as_slice)
    }

    pub fn piece_ids(&self) -> impl Iterator<Item = &str> {
        self.by_piece.keys().map(String::as_str)
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    /// Mean comparison-space profile of a piece's performances.
    pub fn piece_mean(&self, piece_id: &str) -> Option<Profile> {
        Profile::mean(self.piece(piece_id)?.iter().map(|p| &p.profile))
    }
}

/// Transforms every catalog performance into the model's comparison coordinates.
pub fn build_index(catalog: &Catalog, model: &ProjectionModel) -> Result<RetrievalIndex, RetrievalError> {
    model.validate()?;
    let mut by_piece: BTreeMap<String, Vec<IndexedPerformance>> = BTreeMap::new();
    for piece in catalog.pieces() {
        let mut entries = Vec::with_capacity(piece.performance_ids.len());
        for perf in catalog.performances_of(&piece.piece_id) {
            let profile = model.to_comparison_space(&perf.features);
            if !profile.is_finite() {
                return Err(RetrievalError::NonFinite(perf.performance_id.clone()));
            }
            entries.push(IndexedPerformance {
                performance_id: perf.performance_id.clone(),
                artist_label: perf.artist_label.clone(),
                profile,
            });
        }
        entries.sort_by(|a, b| a.performance_id.cmp(&b.performance_id));
        by_piece.insert(piece.piece_id.clone(), entries);
    }
    Ok(RetrievalIndex {
        by_piece,
        standardization: model.feature_standardization,
        model_fingerprint: model.config_fingerprint.clone(),
    })
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_similarity(a: &Profile, b: &Profile) -> Option<f64> {
    let denom = a.norm() * b.norm();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some((a.dot(b) / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub performance_id: String,
    pub artist_label: String,
    pub score: f64,
    pub rank: usize,
    pub predicted_profile: Profile,
    pub performance_profile: Profile,
    /// Set when the score was forced to 0 because a vector had zero norm.
    pub zero_norm: bool,
}

/// Ranks the performances of one piece against a query already in comparison space.
///
/// Sorted by descending score, ties by ascending performance id.
pub fn rank_profile(
    index: &RetrievalIndex,
    piece_id: &str,
    query: &Profile,
) -> Result<Vec<RankedResult>, RetrievalError> {
    let entries = index
        .piece(piece_id)
        .ok_or_else(|| RetrievalError::UnknownPiece(piece_id.to_string()))?;
    let mut results: Vec<RankedResult> = entries
        .iter()
        .map(|e| {
            let cos = cosine_similarity(query, &e.profile);
            RankedResult {
                performance_id: e.performance_id.clone(),
                artist_label: e.artist_label.clone(),
                score: cos.unwrap_or(0.0),
                rank: 0,
                predicted_profile: *query,
                performance_profile: e.profile,
                zero_norm: cos.is_none(),
            }
        })
        .collect();
    results.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.performance_id.cmp(&b.performance_id))
    });
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(results)
}

/// Ranked performances for a text query plus encoding diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub results: Vec<RankedResult>,
    pub predicted_profile: Profile,
    pub oov_tokens: Vec<String>,
    pub token_count: usize,
}

/// Encodes, projects and ranks a text query within one piece.
pub fn rank_performances(
    index: &RetrievalIndex,
    model: &ProjectionModel,
    table: &WordEmbeddingTable,
    piece_id: &str,
    text: &str,
) -> Result<QueryOutput, RetrievalError> {
    if index.model_fingerprint != model.config_fingerprint {
        return Err(RetrievalError::FingerprintMismatch {
            index: index.model_fingerprint.clone(),
            model: model.config_fingerprint.clone(),
        });
    }
    if index.piece(piece_id).is_none() {
        return Err(RetrievalError::UnknownPiece(piece_id.to_string()));
    }
    let embedding = encode_text_with(table, text, model.aggregate)?;
    let predicted = project_text(model, &embedding)?;
    let results = rank_profile(index, piece_id, &predicted)?;
    Ok(QueryOutput {
        results,
        predicted_profile: predicted,
        oov_tokens: embedding.oov_tokens,
        token_count: embedding.token_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionExplanation {
    pub dimension: String,
    pub predicted: f64,
    pub performance: f64,
    /// Predicted value minus the piece mean.
    pub predicted_deviation: f64,
    /// Performance value minus the piece mean.
    pub performance_deviation: f64,
}

/// Per-dimension comparison of the query's predicted profile, a performance
/// and the piece's mean profile, all in comparison coordinates (standard
/// deviations when the model standardizes features).
pub fn explain(result: &RankedResult, piece_mean: &Profile) -> Vec<DimensionExplanation> {
    (0..MID_LEVEL_DIM)
        .map(|j| DimensionExplanation {
            dimension: DIMENSION_NAMES[j].to_string(),
            predicted: result.predicted_profile.0[j],
            performance: result.performance_profile.0[j],
            predicted_deviation: result.predicted_profile.0[j] - piece_mean.0[j],
            performance_deviation: result.performance_profile.0[j] - piece_mean.0[j],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviations {
    pub predicted: [f64; MID_LEVEL_DIM],
    pub performance: [f64; MID_LEVEL_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub performance_id: String,
    pub artist_label: String,
    pub score: f64,
    pub rank: usize,
    pub predicted_profile: [f64; MID_LEVEL_DIM],
    pub performance_profile: [f64; MID_LEVEL_DIM],
    pub deviations: Deviations,
}

/// The query result document shared by the HTTP service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub piece_id: String,
    pub query: String,
    /// Dimension names in profile order.
    pub dimensions: Vec<String>,
    /// `standardized` or `raw`.
    pub feature_space: String,
    pub results: Vec<ResultRecord>,
    pub oov_tokens: Vec<String>,
    pub warnings: Vec<String>,
}

/// Runs a query and assembles the result document with explanations.
pub fn query_response(
    index: &RetrievalIndex,
    model: &ProjectionModel,
    table: &WordEmbeddingTable,
    piece_id: &str,
    text: &str,
) -> Result<QueryResponse, RetrievalError> {
    let out = rank_performances(index, model, table, piece_id, text)?;
    let mean = index.piece_mean(piece_id).unwrap_or(Profile::ZERO);
    let mut warnings = Vec::new();
    if !out.oov_tokens.is_empty() {
        warnings.push(format!(
            "{} word(s) not in the vocabulary were ignored: {}",
            out.oov_tokens.len(),
            out.oov_tokens.join(", ")
        ));
    }
    for r in out.results.iter().filter(|r| r.zero_norm) {
        warnings.push(format!(
            "zero-norm vector for {}; score set to 0",
            r.performance_id
        ));
    }
    let results = out
        .results
        .iter()
        .map(|r| {
            let expl = explain(r, &mean);
            ResultRecord {
                performance_id: r.performance_id.clone(),
                artist_label: r.artist_label.clone(),
                score: r.score,
                rank: r.rank,
                predicted_profile: r.predicted_profile.0,
                performance_profile: r.performance_profile.0,
                deviations: Deviations {
                    predicted: std::array::from_fn(|j| expl[j].predicted_deviation),
                    performance: std::array::from_fn(|j| expl[j].performance_deviation),
                },
            }
        })
        .collect();
    Ok(QueryResponse {
        piece_id: piece_id.to_string(),
        query: text.to_string(),
        dimensions: DIMENSION_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_space: if model.standardizes() { "standardized" } else { "raw" }.into(),
        results,
        oov_tokens: out.oov_tokens,
        warnings,
    })
}
