//! Ranking metrics, leave-one-piece-out cross-validation, the random
//! baseline and the augmentation × PCA ablation grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{group_core_pairs, Catalog, DescriptionPair, PairSource, QueryGranularity};
use crate::numerics::{train_model, NumericsError, PcaSetting, ProjectionConfig};
use crate::retrieval::{build_index, rank_performances, RetrievalError};
use crate::text_encoder::WordEmbeddingTable;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outcomes to score")]
    EmptyOutcomes,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("piece {0:?} has no core description pairs")]
    NoCorePairs(String),
    #[error("piece {0:?} has a single performance; pass allow_singleton to evaluate it separately")]
    SingletonPiece(String),
    #[error("fold {piece}: {source}")]
    Training {
        piece: String,
        #[source]
        source: NumericsError,
    },
    #[error("fold {piece}: {source}")]
    Retrieval {
        piece: String,
        #[source]
        source: RetrievalError,
    },
    #[error("empty configuration grid")]
    EmptyGrid,
    #[error("trials must be at least 1")]
    NoTrials,
}

/// Where the true performance landed for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub piece_id: String,
    pub performance_id: String,
    pub rank_of_truth: usize,
    pub candidate_count: usize,
}

/// Fraction of outcomes whose true item ranks at `k` or better.
pub fn top_k_ratio(outcomes: &[QueryOutcome], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if outcomes.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let hits = outcomes.iter().filter(|o| o.rank_of_truth <= k).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Mean reciprocal rank of the true items.
pub fn mrr(outcomes: &[QueryOutcome]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let sum: f64 = outcomes.iter().map(|o| 1.0 / o.rank_of_truth as f64).sum();
    Ok(sum / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top2: f64,
    pub mrr: f64,
    pub query_count: usize,
}

impl Metrics {
    pub fn from_outcomes(outcomes: &[QueryOutcome]) -> Result<Self, EvalError> {
        Ok(Self {
            top1: top_k_ratio(outcomes, 1)?,
            top2: top_k_ratio(outcomes, 2)?,
            mrr: mrr(outcomes)?,
            query_count: outcomes.len(),
        })
    }
}

/// One cross-validation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub augment_pitchfork: bool,
    pub augment_musiccaps: bool,
    pub projection: ProjectionConfig,
    pub granularity: QueryGranularity,
    /// Evaluate single-performance pieces (reported separately, outside the aggregate).
    pub allow_singleton: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            augment_pitchfork: false,
            augment_musiccaps: false,
            projection: ProjectionConfig::default(),
            granularity: QueryGranularity::PerPerformance,
            allow_singleton: false,
            seed: 0,
        }
    }
}

impl EvalConfig {
    fn training_sources(&self) -> BTreeSet<PairSource> {
        let mut s = BTreeSet::new();
        if self.augment_pitchfork {
            s.insert(PairSource::Pitchfork);
        }
        if self.augment_musiccaps {
            s.insert(PairSource::Musiccaps);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub piece_id: String,
    pub candidate_count: usize,
    pub training_pairs: usize,
    pub pca_components: Option<usize>,
    pub ridge_lambda: f64,
    /// Held-out queries with no in-vocabulary word; scored at rank K.
    pub unencodable_queries: usize,
    pub outcomes: Vec<QueryOutcome>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_fold: Vec<FoldReport>,
    /// Folds of single-performance pieces, excluded from `aggregate`.
    pub singleton_folds: Vec<FoldReport>,
    /// Micro-average over all queries of the regular folds.
    pub aggregate: Metrics,
    /// Digest of the held-out query set, independent of training composition.
    pub query_set_hash: String,
}

impl EvalReport {
    pub fn outcomes(&self) -> impl Iterator<Item = &QueryOutcome> {
        self.per_fold.iter().flat_map(|f| f.outcomes.iter())
    }
}

/// Leave-one-piece-out cross-validation.
///
/// For each piece the projection is trained on the core pairs of all other
/// pieces plus the enabled augmentation corpora, then every core query of the
/// held-out piece is ranked among that piece's performances.
pub fn run_piecewise_cv(
    catalog: &Catalog,
    pairs: &[DescriptionPair],
    table: &WordEmbeddingTable,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let core: Vec<DescriptionPair> = pairs.iter().filter(|p| p.source == PairSource::Core).cloned().collect();
    let queries = group_core_pairs(&core, config.granularity);
    let aux_sources = config.training_sources();
    let aux: Vec<DescriptionPair> = pairs.iter().filter(|p| aux_sources.contains(&p.source)).cloned().collect();

    for piece in catalog.pieces() {
        if !queries.iter().any(|q| q.piece_id.as_deref() == Some(piece.piece_id.as_str())) {
            return Err(EvalError::NoCorePairs(piece.piece_id.clone()));
        }
        if piece.performance_ids.len() == 1 && !config.allow_singleton {
            return Err(EvalError::SingletonPiece(piece.piece_id.clone()));
        }
    }

    let mut hasher = Sha256::new();
    for q in &queries {
        for field in [q.piece_id.as_deref(), q.performance_id.as_deref(), Some(q.text.as_str())] {
            hasher.update(field.unwrap_or("").as_bytes());
            hasher.update([0u8]);
        }
    }
    let query_set_hash = hex::encode(&hasher.finalize()[..16]);

    let folds: Vec<FoldReport> = catalog
        .pieces()
        .par_iter()
        .map(|piece| run_fold(catalog, &queries, &aux, table, config, &piece.piece_id))
        .collect::<Result<_, _>>()?;

    let (singleton_folds, per_fold): (Vec<_>, Vec<_>) = folds.into_iter().partition(|f| f.candidate_count == 1);
    let all: Vec<QueryOutcome> = per_fold.iter().flat_map(|f| f.outcomes.iter().cloned()).collect();
    Ok(EvalReport {
        config: config.clone(),
        aggregate: Metrics::from_outcomes(&all)?,
        per_fold,
        singleton_folds,
        query_set_hash,
    })
}

fn run_fold(
    catalog: &Catalog,
    queries: &[DescriptionPair],
    aux: &[DescriptionPair],
    table: &WordEmbeddingTable,
    config: &EvalConfig,
    piece_id: &str,
) -> Result<FoldReport, EvalError> {
    let (held_out, mut training): (Vec<DescriptionPair>, Vec<DescriptionPair>) = queries
        .iter()
        .cloned()
        .partition(|q| q.piece_id.as_deref() == Some(piece_id));
    training.extend(aux.iter().cloned());
    let model = train_model(table, &training, &config.projection).map_err(|source| EvalError::Training {
        piece: piece_id.to_string(),
        source,
    })?;
    let index = build_index(catalog, &model).map_err(|source| EvalError::Retrieval {
        piece: piece_id.to_string(),
        source,
    })?;
    let candidate_count = index.piece(piece_id).map_or(0, <[_]>::len);
    let mut unencodable = 0;
    let mut outcomes = Vec::with_capacity(held_out.len());
    for q in &held_out {
        let truth = q.performance_id.clone().expect("core pairs carry a performance id");
        let rank = match rank_performances(&index, &model, table, piece_id, &q.text) {
            Ok(out) => {
                out.results
                    .iter()
                    .find(|r| r.performance_id == truth)
                    .expect("true performance belongs to its piece")
                    .rank
            }
            Err(RetrievalError::Encode(_)) => {
                unencodable += 1;
                candidate_count
            }
            Err(source) => {
                return Err(EvalError::Retrieval {
                    piece: piece_id.to_string(),
                    source,
                })
            }
        };
        outcomes.push(QueryOutcome {
            piece_id: piece_id.to_string(),
            performance_id: truth,
            rank_of_truth: rank,
            candidate_count,
        });
    }
    Ok(FoldReport {
        piece_id: piece_id.to_string(),
        candidate_count,
        training_pairs: model.trained_on.values().sum(),
        pca_components: model.pca.as_ref().map(|p| p.output_dim()),
        ridge_lambda: model.map.ridge_lambda,
        unencodable_queries: unencodable,
        metrics: Metrics::from_outcomes(&outcomes)?,
        outcomes,
    })
}

/// Monte-Carlo estimate of the metrics under uniformly random ranking.
///
/// `candidate_counts` holds the K of each query's piece.
pub fn random_baseline_for(candidate_counts: &[usize], trials: usize, seed: u64) -> Result<Metrics, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    if candidate_counts.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut top1, mut top2, mut rr) = (0u64, 0u64, 0.0f64);
    for _ in 0..trials {
        for &k in candidate_counts {
            let rank = rng.random_range(1..=k.max(1));
            top1 += u64::from(rank == 1);
            top2 += u64::from(rank <= 2);
            rr += 1.0 / rank as f64;
        }
    }
    let n = (trials * candidate_counts.len()) as f64;
    Ok(Metrics {
        top1: top1 as f64 / n,
        top2: top2 as f64 / n,
        mrr: rr / n,
        query_count: candidate_counts.len(),
    })
}

/// Random baseline with one query per catalog performance.
pub fn random_baseline(catalog: &Catalog, trials: usize, seed: u64) -> Result<Metrics, EvalError> {
    let counts: Vec<usize> = catalog
        .pieces()
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.performance_ids.len(), p.performance_ids.len()))
        .collect();
    random_baseline_for(&counts, trials, seed)
}

/// Runs cross-validation for every configuration.
pub fn run_ablation_grid(
    catalog: &Catalog,
    pairs: &[DescriptionPair],
    table: &WordEmbeddingTable,
    grid: &[EvalConfig],
) -> Result<Vec<EvalReport>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    grid.iter().map(|c| run_piecewise_cv(catalog, pairs, table, c)).collect()
}

/// The eight augmentation × PCA configurations, in the customary table order:
/// no augmentation, Pitchfork, MusicCaps, both; each without then with PCA.
///
/// `pca` is the setting used for the PCA rows (variance fraction by default).
pub fn table2_grid(base: &EvalConfig, pca: PcaSetting) -> Vec<EvalConfig> {
    let pca = if pca.is_enabled() { pca } else { PcaSetting::default() };
    let mut grid = Vec::with_capacity(8);
    for (pitchfork, musiccaps) in [(false, false), (true, false), (false, true), (true, true)] {
        for setting in [PcaSetting::Off, pca] {
            let mut c = base.clone();
            c.augment_pitchfork = pitchfork;
            c.augment_musiccaps = musiccaps;
            c.projection.pca = setting;
            grid.push(c);
        }
    }
    grid
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

/// Fixed-width table with augmentation and PCA columns followed by the metrics.
pub fn render_table2(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    writeln!(out, "{:^9} {:^9} | {:^5} | {:>5} {:>5} {:>5}", "Pitchfork", "MusicCaps", "PCA", "Top-1", "Top-2", "MRR").unwrap();
    writeln!(out, "{}", "-".repeat(47)).unwrap();
    for r in reports {
        let c = &r.config;
        writeln!(
            out,
            "{:^9} {:^9} | {:^5} | {:>5.2} {:>5.2} {:>5.2}",
            mark(c.augment_pitchfork),
            mark(c.augment_musiccaps),
            mark(c.projection.pca.is_enabled()),
            r.aggregate.top1,
            r.aggregate.top2,
            r.aggregate.mrr
        )
        .unwrap();
    }
    out
}

pub const CSV_HEADER: &str = "augment_pitchfork,augment_musiccaps,pca,standardize,ridge_lambda,top1,top2,mrr,n_queries";

/// One CSV row per report; `ridge_lambda` is `auto` when chosen per fold.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let c = &r.config;
        let ridge = c.projection.ridge_lambda.map_or("auto".to_string(), |l| format!("{l}"));
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            c.augment_pitchfork,
            c.augment_musiccaps,
            c.projection.pca,
            c.projection.standardize,
            ridge,
            r.aggregate.top1,
            r.aggregate.top2,
            r.aggregate.mrr,
            r.aggregate.query_count
        )
        .unwrap();
    }
    out
}
