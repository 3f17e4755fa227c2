//! Word-vector tables and bag-of-words text encoding.
//!
//! Tables are read from the common plain-text format used by GloVe and
//! word2vec (`token v1 v2 ... vd`, optionally preceded by an `N d` header).
//! A description is encoded as the element-wise sum of the vectors of its
//! in-vocabulary tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file is empty")]
    Empty,
    #[error("line {line}: expected {expected} values, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse {token:?} as a number")]
    Number { line: usize, token: String },
    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("no token of the query is in the vocabulary (out of vocabulary: {})", oov_tokens.join(", "))]
    AllOutOfVocabulary { oov_tokens: Vec<String> },
}

/// How token vectors are combined into a text vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Aggregate::Sum),
            "mean" => Ok(Aggregate::Mean),
            other => Err(format!("unknown aggregate {other:?} (expected sum or mean)")),
        }
    }
}

/// Immutable vocabulary of lowercase tokens with fixed-dimension vectors.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    dimension: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    data: Vec<f32>,
    duplicates: usize,
}

impl WordEmbeddingTable {
    /// Builds a table from `(token, vector)` entries; the first occurrence of a token wins.
    pub fn from_entries<I, S>(dimension: usize, entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        let mut table = Self::empty(dimension);
        for (i, (token, vector)) in entries.into_iter().enumerate() {
            if vector.len() != dimension {
                return Err(EmbeddingError::Dimension {
                    line: i + 1,
                    expected: dimension,
                    found: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line: i + 1 });
            }
            table.insert(token.as_ref(), &vector);
        }
        if table.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        Ok(table)
    }

    fn empty(dimension: usize) -> Self {
        Self {
            dimension,
            index: HashMap::new(),
            tokens: Vec::new(),
            data: Vec::new(),
            duplicates: 0,
        }
    }

    fn insert(&mut self, token: &str, vector: &[f32]) {
        let token = token.to_lowercase();
        if self.index.contains_key(&token) {
            self.duplicates += 1;
            return;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.data.extend_from_slice(vector);
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of entries dropped because their token was already present.
    pub fn duplicate_count(&self) -> usize {
        self.duplicates
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.row(i))
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Tokens in insertion order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Renders the table in the text format `parse` reads back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, token) in self.tokens.iter().enumerate() {
            out.push_str(token);
            for v in self.row(i) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn is_header(fields: &[&str]) -> bool {
    fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok())
}

/// Reads a word-vector table.
///
/// The dimension is taken from the first data line unless `expected_dimension`
/// is given. A leading `N d` line of two integers is treated as a header.
pub fn read_embedding_table<R: BufRead>(
    reader: R,
    expected_dimension: Option<usize>,
) -> Result<WordEmbeddingTable, EmbeddingError> {
    let mut table: Option<WordEmbeddingTable> = None;
    let mut header_dim = None;
    let mut seen_content = false;
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| EmbeddingError::Io {
            path: "<reader>".into(),
            source,
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if is_header(&fields) {
                header_dim = Some(fields[1].parse::<usize>().unwrap());
                continue;
            }
        }
        values.clear();
        for tok in &fields[1..] {
            let v: f32 = tok.parse().map_err(|_| EmbeddingError::Number {
                line: line_no,
                token: (*tok).to_string(),
            })?;
            if !v.is_finite() {
                return Err(EmbeddingError::NonFinite { line: line_no });
            }
            values.push(v);
        }
        let table = table.get_or_insert_with(|| {
            WordEmbeddingTable::empty(expected_dimension.or(header_dim).unwrap_or(values.len()))
        });
        if values.len() != table.dimension || values.is_empty() {
            return Err(EmbeddingError::Dimension {
                line: line_no,
                expected: table.dimension,
                found: values.len(),
            });
        }
        table.insert(fields[0], &values);
    }
    let table = table.ok_or(EmbeddingError::Empty)?;
    if table.duplicates > 0 {
        log::warn!(
            "{} duplicate token(s) in embedding table; first occurrence kept",
            table.duplicates
        );
    }
    Ok(table)
}

pub fn load_embedding_table(
    path: impl AsRef<Path>,
    expected_dimension: Option<usize>,
) -> Result<WordEmbeddingTable, EmbeddingError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_embedding_table(BufReader::new(file), expected_dimension)
}

pub fn write_embedding_table(
    table: &WordEmbeddingTable,
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    fs::write(path, table.to_text()).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercases and splits text into word tokens.
///
/// Letters form words; an apostrophe is kept only between two letters
/// (`don't`), every other character separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphabetic()
            || (is_apostrophe(c)
                && !current.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphabetic()));
        if keep {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// A text encoded as a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// In-vocabulary token occurrences that contributed.
    pub token_count: usize,
    /// Out-of-vocabulary tokens in order of first appearance.
    pub oov_tokens: Vec<String>,
}

pub fn encode_text(table: &WordEmbeddingTable, text: &str) -> Result<TextEmbedding, EncodeError> {
    encode_text_with(table, text, Aggregate::Sum)
}

pub fn encode_text_with(
    table: &WordEmbeddingTable,
    text: &str,
    aggregate: Aggregate,
) -> Result<TextEmbedding, EncodeError> {
    let mut vector = vec![0.0f64; table.dimension()];
    let mut token_count = 0;
    let mut oov_tokens: Vec<String> = Vec::new();
    for token in tokenize(text) {
        match table.get(&token) {
            Some(row) => {
                token_count += 1;
                for (acc, &v) in vector.iter_mut().zip(row) {
                    *acc += f64::from(v);
                }
            }
            None => {
                if !oov_tokens.contains(&token) {
                    oov_tokens.push(token);
                }
            }
        }
    }
    if token_count == 0 {
        return Err(EncodeError::AllOutOfVocabulary { oov_tokens });
    }
    if aggregate == Aggregate::Mean {
        let n = token_count as f64;
        vector.iter_mut().for_each(|v| *v /= n);
    }
    Ok(TextEmbedding {
        vector,
        token_count,
        oov_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<WordEmbeddingTable, EmbeddingError> {
        read_embedding_table(text.as_bytes(), None)
    }

    fn ab_table() -> WordEmbeddingTable {
        WordEmbeddingTable::from_entries(2, [("a", vec![1.0, 0.0]), ("b", vec![0.0, 2.0])]).unwrap()
    }

    #[test]
    fn parses_simple_table() {
        let t = parse("calm 0.1 -0.2 0.3\nwild 1.0 0.0 0.0").unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("calm").unwrap(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        match parse("calm 0.1 -0.2 0.3\nwild 1.0 0.0 0.0 4.0").unwrap_err() {
            EmbeddingError::Dimension { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 3, 4));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn expected_dimension_is_enforced() {
        assert!(matches!(
            read_embedding_table("calm 0.1 0.2".as_bytes(), Some(3)).unwrap_err(),
            EmbeddingError::Dimension { line: 1, .. }
        ));
    }

    #[test]
    fn duplicates_keep_first() {
        let t = parse("calm 1 0\nwild 0 1\nx 1 1\ny 2 2\ncalm 9 9\n").unwrap();
        assert_eq!(t.get("calm").unwrap(), &[1.0, 0.0]);
        assert_eq!(t.duplicate_count(), 1);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn header_and_scientific_notation() {
        let t = parse("2 3\ncalm 1e-1 -2E-1 3.0\nwild\t1 0 0\n").unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.get("calm").unwrap(), &[0.1, -0.2, 3.0]);
        assert_eq!(t.get("wild").unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(parse("").unwrap_err(), EmbeddingError::Empty));
        assert!(matches!(parse("\n\n").unwrap_err(), EmbeddingError::Empty));
        assert!(matches!(
            parse("calm 0.1 abc").unwrap_err(),
            EmbeddingError::Number { line: 1, .. }
        ));
        assert!(matches!(parse("calm").unwrap_err(), EmbeddingError::Dimension { .. }));
        assert!(matches!(parse("calm nan 1").unwrap_err(), EmbeddingError::NonFinite { .. }));
    }

    #[test]
    fn tokenizer_cases() {
        assert_eq!(tokenize("Shy, magical; DEEP"), ["shy", "magical", "deep"]);
        assert_eq!(tokenize("controlled with speed"), ["controlled", "with", "speed"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("don't 'tis rock'n'roll"), ["don't", "tis", "rock'n'roll"]);
        assert_eq!(tokenize("fast-paced, 3 times"), ["fast", "paced", "times"]);
        assert_eq!(tokenize("calm calm"), ["calm", "calm"]);
        assert_eq!(tokenize("Hélène’s"), ["hélène’s"]);
    }

    #[test]
    fn encode_sums_embeddings() {
        let t = ab_table();
        let e = encode_text(&t, "a b").unwrap();
        assert_eq!(e.vector, vec![1.0, 2.0]);
        assert_eq!(e.token_count, 2);
        assert_eq!(encode_text(&t, "b a").unwrap().vector, vec![1.0, 2.0]);
        let e = encode_text(&t, "a a b").unwrap();
        assert_eq!((e.vector, e.token_count), (vec![2.0, 2.0], 3));
    }

    #[test]
    fn encode_reports_oov() {
        let t = ab_table();
        assert_eq!(
            encode_text(&t, "zzz").unwrap_err(),
            EncodeError::AllOutOfVocabulary {
                oov_tokens: vec!["zzz".into()]
            }
        );
        let e = encode_text(&t, "the a the of b").unwrap();
        assert_eq!(e.oov_tokens, ["the", "of"]);
        assert_eq!(e.token_count, 2);
    }

    #[test]
    fn mean_aggregate() {
        let e = encode_text_with(&ab_table(), "a a b", Aggregate::Mean).unwrap();
        assert_eq!(e.vector, vec![2.0 / 3.0, 2.0 / 3.0]);
    }

    fn vocab() -> WordEmbeddingTable {
        WordEmbeddingTable::from_entries(
            3,
            [
                ("calm", vec![0.25, -1.5, 3.0]),
                ("wild", vec![1.0, 0.5, -0.125]),
                ("shy", vec![-2.0, 0.75, 1.0]),
                ("bold", vec![0.5, 0.5, 0.5]),
            ],
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn permutation_invariance(words in proptest::collection::vec(0usize..4, 1..12), seed in any::<u64>()) {
            let names = ["calm", "wild", "shy", "bold"];
            let text: Vec<&str> = words.iter().map(|&i| names[i]).collect();
            let mut shuffled = text.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let t = vocab();
            let a = encode_text(&t, &text.join(" ")).unwrap();
            let b = encode_text(&t, &shuffled.join(" ")).unwrap();
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert_eq!(a.token_count, b.token_count);
        }

        #[test]
        fn additivity(x in 0usize..4, y in 0usize..4) {
            let names = ["calm", "wild", "shy", "bold"];
            let t = vocab();
            let both = encode_text(&t, &format!("{} {}", names[x], names[y])).unwrap();
            let ex = encode_text(&t, names[x]).unwrap();
            let ey = encode_text(&t, names[y]).unwrap();
            for i in 0..3 {
                prop_assert_eq!(both.vector[i], ex.vector[i] + ey.vector[i]);
            }
        }

        #[test]
        fn writer_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e6f32..1e6, 4), 1..20)) {
            let entries: Vec<(String, Vec<f32>)> =
                rows.into_iter().enumerate().map(|(i, v)| (format!("w{i}x"), v)).collect();
            let t = WordEmbeddingTable::from_entries(4, entries.clone()).unwrap();
            let back = parse(&t.to_text()).unwrap();
            for (tok, v) in &entries {
                let got = back.get(tok).unwrap();
                prop_assert!(got.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}
