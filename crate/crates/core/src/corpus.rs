//! Pieces, performances and description pairs.
//!
//! A [`Catalog`] groups the recorded performances of each piece together with
//! their mid-level feature vectors. [`DescriptionPair`]s associate free text
//! with the feature vector it describes; core pairs point at a catalog
//! performance, auxiliary pairs (augmentation corpora) only carry targets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{MidLevelVector, Profile, MID_LEVEL_DIM};
use crate::text_encoder::tokenize;

/// Version written to, and required from, catalog and pairs documents.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("dimension error in {context}: expected {MID_LEVEL_DIM} features, found {found}")]
    Dimension { context: String, found: usize },
    #[error("invalid features in {context}: {reason}")]
    InvalidFeatures { context: String, reason: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("record {index}: {reason}")]
    InvalidPair { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub piece_id: String,
    pub title: String,
    pub performance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub performance_id: String,
    pub piece_id: String,
    pub artist_label: String,
    pub features: MidLevelVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
}

/// Validated set of pieces and their performances.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pieces: Vec<Piece>,
    performances: Vec<Performance>,
    perf_index: HashMap<String, usize>,
    piece_index: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog, checking referential integrity in both directions.
    pub fn new(pieces: Vec<Piece>, performances: Vec<Performance>) -> Result<Self, CorpusError> {
        if pieces.is_empty() {
            return Err(CorpusError::Integrity("catalog has no pieces".into()));
        }
        let mut piece_index = HashMap::new();
        for (i, piece) in pieces.iter().enumerate() {
            if piece_index.insert(piece.piece_id.clone(), i).is_some() {
                return Err(CorpusError::Integrity(format!(
                    "duplicate piece_id {:?}",
                    piece.piece_id
                )));
            }
            if piece.performance_ids.is_empty() {
                return Err(CorpusError::Integrity(format!(
                    "piece {:?} lists no performances",
                    piece.piece_id
                )));
            }
        }
        let mut perf_index = HashMap::new();
        for (i, perf) in performances.iter().enumerate() {
            if perf_index.insert(perf.performance_id.clone(), i).is_some() {
                return Err(CorpusError::Integrity(format!(
                    "duplicate performance_id {:?}",
                    perf.performance_id
                )));
            }
            if !piece_index.contains_key(&perf.piece_id) {
                return Err(CorpusError::Integrity(format!(
                    "performance {:?} references unknown piece {:?}",
                    perf.performance_id, perf.piece_id
                )));
            }
        }
        let mut listed = HashSet::new();
        for piece in &pieces {
            for pid in &piece.performance_ids {
                let Some(&idx) = perf_index.get(pid) else {
                    return Err(CorpusError::Integrity(format!(
                        "piece {:?} lists unknown performance {:?}",
                        piece.piece_id, pid
                    )));
                };
                if performances[idx].piece_id != piece.piece_id {
                    return Err(CorpusError::Integrity(format!(
                        "piece {:?} lists performance {:?} which belongs to {:?}",
                        piece.piece_id, pid, performances[idx].piece_id
                    )));
                }
                if !listed.insert(pid.as_str()) {
                    return Err(CorpusError::Integrity(format!(
                        "performance {pid:?} listed more than once"
                    )));
                }
            }
        }
        if let Some(orphan) = performances
            .iter()
            .find(|p| !listed.contains(p.performance_id.as_str()))
        {
            return Err(CorpusError::Integrity(format!(
                "performance {:?} is not listed by piece {:?}",
                orphan.performance_id, orphan.piece_id
            )));
        }
        Ok(Self {
            pieces,
            performances,
            perf_index,
            piece_index,
        })
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn performances(&self) -> &[Performance] {
        &self.performances
    }

    pub fn piece(&self, piece_id: &str) -> Option<&Piece> {
        self.piece_index.get(piece_id).map(|&i| &self.pieces[i])
    }

    pub fn performance(&self, performance_id: &str) -> Option<&Performance> {
        self.perf_index
            .get(performance_id)
            .map(|&i| &self.performances[i])
    }

    /// Performances of a piece in the order the piece lists them.
    pub fn performances_of<'a>(
        &'a self,
        piece_id: &str,
    ) -> impl Iterator<Item = &'a Performance> + 'a {
        self.piece(piece_id)
            .into_iter()
            .flat_map(|p| p.performance_ids.iter())
            .filter_map(|id| self.performance(id))
    }

    /// Pieces with a single performance. Legal, but they score rank 1 trivially.
    pub fn singleton_pieces(&self) -> Vec<&str> {
        self.pieces
            .iter()
            .filter(|p| p.performance_ids.len() == 1)
            .map(|p| p.piece_id.as_str())
            .collect()
    }

    /// Returns a copy with some performances' features replaced.
    pub fn with_features(
        &self,
        features: &HashMap<String, MidLevelVector>,
    ) -> Result<Self, CorpusError> {
        let mut performances = self.performances.clone();
        for perf in &mut performances {
            if let Some(f) = features.get(&perf.performance_id) {
                perf.features = *f;
            }
        }
        Self::new(self.pieces.clone(), performances)
    }
}

#[derive(Serialize, Deserialize)]
struct CatalogDocument {
    schema_version: u32,
    pieces: Vec<Piece>,
    performances: Vec<RawPerformance>,
}

#[derive(Serialize, Deserialize)]
struct RawPerformance {
    performance_id: String,
    piece_id: String,
    artist_label: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_path: Option<String>,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    fs::write(path, contents).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_schema(version: u32) -> Result<(), CorpusError> {
    if version != SCHEMA_VERSION {
        return Err(CorpusError::SchemaVersion { found: version });
    }
    Ok(())
}

fn parse_features(values: &[f64], context: impl Fn() -> String) -> Result<MidLevelVector, CorpusError> {
    if values.len() != MID_LEVEL_DIM {
        return Err(CorpusError::Dimension {
            context: context(),
            found: values.len(),
        });
    }
    MidLevelVector::from_slice(values).map_err(|reason| CorpusError::InvalidFeatures {
        context: context(),
        reason,
    })
}

pub fn parse_catalog(text: &str) -> Result<Catalog, CorpusError> {
    let doc: CatalogDocument =
        serde_json::from_str(text).map_err(|e| CorpusError::Parse(e.to_string()))?;
    check_schema(doc.schema_version)?;
    let performances = doc
        .performances
        .into_iter()
        .map(|raw| {
            let features = parse_features(&raw.features, || {
                format!("performance {:?}", raw.performance_id)
            })?;
            Ok(Performance {
                performance_id: raw.performance_id,
                piece_id: raw.piece_id,
                artist_label: raw.artist_label,
                features,
                audio_path: raw.audio_path,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Catalog::new(doc.pieces, performances)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog, CorpusError> {
    parse_catalog(&read_file(path.as_ref())?)
}

pub fn catalog_to_string(catalog: &Catalog) -> String {
    let doc = CatalogDocument {
        schema_version: SCHEMA_VERSION,
        pieces: catalog.pieces.clone(),
        performances: catalog
            .performances
            .iter()
            .map(|p| RawPerformance {
                performance_id: p.performance_id.clone(),
                piece_id: p.piece_id.clone(),
                artist_label: p.artist_label.clone(),
                features: p.features.values().to_vec(),
                audio_path: p.audio_path.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("catalog serializes")
}

pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_file(path.as_ref(), &catalog_to_string(catalog))
}

/// Where a description pair comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Core,
    Musiccaps,
    Pitchfork,
}

impl PairSource {
    pub const ALL: [PairSource; 3] = [PairSource::Core, PairSource::Musiccaps, PairSource::Pitchfork];

    pub fn as_str(&self) -> &'static str {
        match self {
            PairSource::Core => "core",
            PairSource::Musiccaps => "musiccaps",
            PairSource::Pitchfork => "pitchfork",
        }
    }
}

impl fmt::Display for PairSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "core" => Ok(PairSource::Core),
            "musiccaps" => Ok(PairSource::Musiccaps),
            "pitchfork" => Ok(PairSource::Pitchfork),
            other => Err(format!(
                "unknown source {other:?} (expected core, musiccaps or pitchfork)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionPair {
    pub text: String,
    pub target_features: MidLevelVector,
    pub source: PairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PairsDocument {
    schema_version: u32,
    pairs: Vec<RawPair>,
}

#[derive(Serialize, Deserialize)]
struct RawPair {
    text: String,
    target_features: Vec<f64>,
    source: PairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    piece_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    performance_id: Option<String>,
}

/// Parses a pairs document, keeping only pairs from `allowed` sources.
///
/// Every record is validated, including filtered-out ones, so that errors
/// report stable record indices. Core pairs are checked against `catalog`
/// when one is given.
pub fn parse_pairs(
    text: &str,
    allowed: &BTreeSet<PairSource>,
    catalog: Option<&Catalog>,
) -> Result<Vec<DescriptionPair>, CorpusError> {
    let doc: PairsDocument =
        serde_json::from_str(text).map_err(|e| CorpusError::Parse(e.to_string()))?;
    check_schema(doc.schema_version)?;
    let mut out = Vec::new();
    for (index, raw) in doc.pairs.into_iter().enumerate() {
        let invalid = |reason: String| CorpusError::InvalidPair { index, reason };
        if tokenize(&raw.text).is_empty() {
            return Err(invalid("text is empty after tokenization".into()));
        }
        let target_features = parse_features(&raw.target_features, || format!("pair record {index}"))?;
        if raw.source == PairSource::Core {
            let (Some(piece_id), Some(perf_id)) = (&raw.piece_id, &raw.performance_id) else {
                return Err(invalid("core pair must carry piece_id and performance_id".into()));
            };
            if let Some(catalog) = catalog {
                let perf = catalog
                    .performance(perf_id)
                    .ok_or_else(|| invalid(format!("unknown performance_id {perf_id:?}")))?;
                if &perf.piece_id != piece_id {
                    return Err(invalid(format!(
                        "performance {perf_id:?} belongs to piece {:?}, not {piece_id:?}",
                        perf.piece_id
                    )));
                }
            }
        }
        if allowed.contains(&raw.source) {
            out.push(DescriptionPair {
                text: raw.text,
                target_features,
                source: raw.source,
                piece_id: raw.piece_id,
                performance_id: raw.performance_id,
            });
        }
    }
    Ok(out)
}

pub fn load_pairs(
    path: impl AsRef<Path>,
    allowed: &BTreeSet<PairSource>,
    catalog: Option<&Catalog>,
) -> Result<Vec<DescriptionPair>, CorpusError> {
    parse_pairs(&read_file(path.as_ref())?, allowed, catalog)
}

pub fn pairs_to_string(pairs: &[DescriptionPair]) -> String {
    let doc = PairsDocument {
        schema_version: SCHEMA_VERSION,
        pairs: pairs
            .iter()
            .map(|p| RawPair {
                text: p.text.clone(),
                target_features: p.target_features.values().to_vec(),
                source: p.source,
                piece_id: p.piece_id.clone(),
                performance_id: p.performance_id.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("pairs serialize")
}

pub fn save_pairs(pairs: &[DescriptionPair], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_file(path.as_ref(), &pairs_to_string(pairs))
}

/// Keeps pairs whose source is allowed, preserving order.
pub fn filter_sources(pairs: &[DescriptionPair], allowed: &BTreeSet<PairSource>) -> Vec<DescriptionPair> {
    pairs
        .iter()
        .filter(|p| allowed.contains(&p.source))
        .cloned()
        .collect()
}

/// How core descriptions are turned into queries and training examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGranularity {
    /// All core texts of a performance are concatenated into one description.
    #[default]
    PerPerformance,
    /// Every core pair stands on its own (one query per annotator).
    PerPair,
}

/// Applies `granularity` to core pairs; auxiliary pairs pass through unchanged.
///
/// Grouped pairs appear at the position of their first member, their text is
/// the members' texts joined by `", "` and their target is the members' mean.
pub fn group_core_pairs(pairs: &[DescriptionPair], granularity: QueryGranularity) -> Vec<DescriptionPair> {
    if granularity == QueryGranularity::PerPair {
        return pairs.to_vec();
    }
    let mut out: Vec<DescriptionPair> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        match (pair.source, pair.performance_id.as_deref()) {
            (PairSource::Core, Some(perf)) => {
                if let Some(&j) = slot.get(perf) {
                    members[j].push(i);
                    let text = &mut out[j].text;
                    text.push_str(", ");
                    text.push_str(&pair.text);
                } else {
                    slot.insert(perf, out.len());
                    members.push(vec![i]);
                    out.push(pair.clone());
                }
            }
            _ => {
                members.push(vec![i]);
                out.push(pair.clone());
            }
        }
    }
    for (grouped, idx) in out.iter_mut().zip(&members) {
        if idx.len() > 1 {
            let targets: Vec<Profile> = idx.iter().map(|&i| pairs[i].target_features.into()).collect();
            let mean = Profile::mean(&targets).expect("group is non-empty");
            grouped.target_features = MidLevelVector::new(mean.0).expect("mean of valid vectors is valid");
        }
    }
    out
}
