//! Seeded synthetic corpora with a known linear text-to-feature relationship.
//!
//! Every word carries a latent mid-level vector `m_w`; its embedding is
//! `A·m_w` (plus optional Gaussian noise) for a random `A`. A performance's
//! profile is the mean latent of the words that describe it, and those words
//! are the ones nearest the profile by cosine.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{catalog_to_string, pairs_to_string, Catalog, DescriptionPair, PairSource, Performance, Piece};
use crate::features::{MidLevelVector, MID_LEVEL_DIM};
use crate::text_encoder::WordEmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub vocabulary: usize,
    pub embedding_dim: usize,
    pub pieces: usize,
    pub performances_per_piece: usize,
    pub words_per_description: usize,
    /// Auxiliary pairs generated for each of the Pitchfork and MusicCaps sources.
    pub auxiliary_pairs: usize,
    /// Noise standard deviation as a multiple of the RMS embedding entry.
    pub noise_ratio: f64,
    /// Upper bound on the cosine between two profiles of the same piece.
    pub max_within_piece_cosine: f64,
    /// Orthonormalize the columns of the embedding map.
    pub orthonormal_mixing: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocabulary: 40,
            embedding_dim: 50,
            pieces: 6,
            performances_per_piece: 5,
            words_per_description: 5,
            auxiliary_pairs: 20,
            noise_ratio: 0.0,
            max_within_piece_cosine: 0.3,
            orthonormal_mixing: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub catalog: Catalog,
    pub pairs: Vec<DescriptionPair>,
    pub table: WordEmbeddingTable,
    pub words: Vec<String>,
    /// Latent mid-level vector of each word, aligned with `words`.
    pub latents: Vec<[f64; MID_LEVEL_DIM]>,
    /// Embedding map, `embedding_dim × 8`.
    pub mixing: DMatrix<f64>,
}

/// Keeps every stored feature, onset density included, non-negative.
const FEATURE_OFFSET: f64 = 10.0;

const SYLLABLES: [&str; 12] = ["ba", "ke", "lo", "mi", "nu", "ra", "so", "ti", "vu", "de", "ga", "pe"];

fn word_name(i: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}{}", SYLLABLES[i % n], SYLLABLES[(i / n) % n], SYLLABLES[(i / (n * n)) % n])
}

fn cosine(a: &[f64; MID_LEVEL_DIM], b: &[f64; MID_LEVEL_DIM]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn nearest_words(latents: &[[f64; MID_LEVEL_DIM]], target: &[f64; MID_LEVEL_DIM], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.sort_by(|&a, &b| {
        cosine(&latents[b], target)
            .partial_cmp(&cosine(&latents[a], target))
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order.sort_unstable();
    order
}

fn mean_latent(latents: &[[f64; MID_LEVEL_DIM]], words: &[usize]) -> [f64; MID_LEVEL_DIM] {
    let mut m = [0.0; MID_LEVEL_DIM];
    for &w in words {
        for (acc, v) in m.iter_mut().zip(&latents[w]) {
            *acc += v;
        }
    }
    m.map(|v| v / words.len() as f64)
}

fn gaussian8(rng: &mut ChaCha8Rng) -> [f64; MID_LEVEL_DIM] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn to_features(profile: &[f64; MID_LEVEL_DIM]) -> MidLevelVector {
    MidLevelVector::new(profile.map(|v| (v + FEATURE_OFFSET).max(0.0))).expect("finite synthetic features")
}

/// Draws a word set whose mean latent has the same set as its nearest words.
fn consistent_description(
    rng: &mut ChaCha8Rng,
    latents: &[[f64; MID_LEVEL_DIM]],
    count: usize,
) -> (Vec<usize>, [f64; MID_LEVEL_DIM]) {
    loop {
        let mut words = nearest_words(latents, &gaussian8(rng), count);
        for _ in 0..50 {
            let profile = mean_latent(latents, &words);
            let next = nearest_words(latents, &profile, count);
            if next == words {
                return (words, profile);
            }
            words = next;
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> SyntheticWorld {
    assert!(config.vocabulary >= config.words_per_description && config.words_per_description > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words: Vec<String> = (0..config.vocabulary).map(word_name).collect();
    let latents: Vec<[f64; MID_LEVEL_DIM]> = (0..config.vocabulary).map(|_| gaussian8(&mut rng)).collect();
    let mut mixing = DMatrix::from_fn(config.embedding_dim, MID_LEVEL_DIM, |_, _| StandardNormal.sample(&mut rng));
    if config.orthonormal_mixing {
        mixing = mixing.qr().q();
    }

    let clean: Vec<DVector<f64>> = latents.iter().map(|m| &mixing * DVector::from_row_slice(m)).collect();
    let rms = (clean.iter().map(|e| e.norm_squared()).sum::<f64>() / (clean.len() * config.embedding_dim) as f64).sqrt();
    let sigma = config.noise_ratio * rms;
    let rows = clean.iter().zip(&words).map(|(e, w)| {
        let v: Vec<f32> = e
            .iter()
            .map(|x| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (x + sigma * n) as f32
            })
            .collect();
        (w.clone(), v)
    });
    let table = WordEmbeddingTable::from_entries(config.embedding_dim, rows).expect("valid synthetic table");

    let mut pieces = Vec::new();
    let mut performances = Vec::new();
    let mut pairs = Vec::new();
    for p in 0..config.pieces {
        let piece_id = format!("piece{:02}", p + 1);
        let mut used: Vec<Vec<usize>> = Vec::new();
        let mut profiles: Vec<[f64; MID_LEVEL_DIM]> = Vec::new();
        let mut ids = Vec::new();
        let mut attempts = 0usize;
        while used.len() < config.performances_per_piece {
            attempts += 1;
            assert!(attempts < 100_000, "cannot place {} separated performances in one piece", config.performances_per_piece);
            let (chosen, profile) = consistent_description(&mut rng, &latents, config.words_per_description);
            if used.contains(&chosen) || profiles.iter().any(|q| cosine(q, &profile) > config.max_within_piece_cosine) {
                continue;
            }
            profiles.push(profile);
            let performance_id = format!("{piece_id}-perf{}", used.len() + 1);
            let mut order = chosen.clone();
            order.shuffle(&mut rng);
            let text = order.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");
            let features = to_features(&profile);
            performances.push(Performance {
                performance_id: performance_id.clone(),
                piece_id: piece_id.clone(),
                artist_label: format!("Performer {}", used.len() + 1),
                features,
                audio_path: None,
            });
            pairs.push(DescriptionPair {
                text,
                target_features: features,
                source: PairSource::Core,
                piece_id: Some(piece_id.clone()),
                performance_id: Some(performance_id.clone()),
            });
            ids.push(performance_id);
            used.push(chosen);
        }
        pieces.push(Piece {
            title: format!("Synthetic Piece {}", p + 1),
            piece_id,
            performance_ids: ids,
        });
    }

    for source in [PairSource::Pitchfork, PairSource::Musiccaps] {
        for _ in 0..config.auxiliary_pairs {
            let n = rng.random_range(2..=config.words_per_description.max(2)).min(config.vocabulary);
            let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, config.vocabulary, n).into_vec();
            let text = chosen.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");
            pairs.push(DescriptionPair {
                text,
                target_features: to_features(&mean_latent(&latents, &chosen)),
                source,
                piece_id: None,
                performance_id: None,
            });
        }
    }

    SyntheticWorld {
        catalog: Catalog::new(pieces, performances).expect("consistent synthetic catalog"),
        pairs,
        table,
        words,
        latents,
        mixing,
    }
}

pub const CATALOG_FILE: &str = "catalog.json";
pub const PAIRS_FILE: &str = "pairs.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

/// Writes the catalog, pairs and embedding table into `dir`.
pub fn write_world(world: &SyntheticWorld, dir: impl AsRef<Path>) -> io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CATALOG_FILE), catalog_to_string(&world.catalog))?;
    fs::write(dir.join(PAIRS_FILE), pairs_to_string(&world.pairs))?;
    fs::write(dir.join(EMBEDDINGS_FILE), world.table.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_encoder::encode_text;

    #[test]
    fn shape_and_determinism() {
        let a = generate(&SyntheticConfig::default());
        let b = generate(&SyntheticConfig::default());
        assert_eq!(a.catalog.pieces().len(), 6);
        assert_eq!(a.catalog.performances().len(), 30);
        assert_eq!(a.table.len(), 40);
        assert_eq!(a.table.dimension(), 50);
        assert_eq!(a.pairs.len(), 30 + 40);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.table.to_text(), b.table.to_text());
    }

    #[test]
    fn descriptions_are_the_nearest_words() {
        let w = generate(&SyntheticConfig::default());
        for pair in w.pairs.iter().filter(|p| p.source == PairSource::Core) {
            let profile = pair.target_features.values().map(|v| v - FEATURE_OFFSET);
            let mut expected: Vec<&str> = nearest_words(&w.latents, &profile, 5).iter().map(|&i| w.words[i].as_str()).collect();
            let mut got: Vec<&str> = pair.text.split(' ').collect();
            expected.sort_unstable();
            got.sort_unstable();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn noiseless_embedding_is_linear_in_profile() {
        let w = generate(&SyntheticConfig::default());
        let pair = &w.pairs[0];
        let e = encode_text(&w.table, &pair.text).unwrap();
        let profile = DVector::from_iterator(8, pair.target_features.values().iter().map(|v| 5.0 * (v - FEATURE_OFFSET)));
        let expected = &w.mixing * profile;
        for (g, x) in e.vector.iter().zip(expected.iter()) {
            assert!((g - x).abs() < 1e-4 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn noise_changes_embeddings_only() {
        let clean = generate(&SyntheticConfig::default());
        let noisy = generate(&SyntheticConfig {
            noise_ratio: 0.5,
            ..SyntheticConfig::default()
        });
        assert_ne!(clean.table.to_text(), noisy.table.to_text());
        assert_eq!(clean.latents, noisy.latents);
    }

    #[test]
    fn writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate(&SyntheticConfig::default());
        write_world(&w, dir.path()).unwrap();
        let cat = crate::corpus::load_catalog(dir.path().join(CATALOG_FILE)).unwrap();
        assert_eq!(cat.performances().len(), 30);
        let table = crate::text_encoder::load_embedding_table(dir.path().join(EMBEDDINGS_FILE), Some(50)).unwrap();
        assert_eq!(table.len(), 40);
    }
}
