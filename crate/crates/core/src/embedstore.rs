//! Word embeddings: a static lookup table with deterministic OOV vectors, or
//! per-utterance contextual matrices precomputed by an external encoder.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::featalign::{read_matrix, FeatureMatrix};
use crate::textfront::Token;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    s.bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        if table.is_empty() || dim == 0 {
            return Err(Error::EmptyTable);
        }
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch(0));
        }
        let n = table.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in table.values() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut std = vec![0.0; dim];
        for v in table.values() {
            for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
                *s += (x - m).powi(2) / n;
            }
        }
        // A constant dimension still needs some spread to tell OOV words apart.
        let std = std
            .into_iter()
            .map(|s| if s > 0.0 { s.sqrt() } else { 1.0 })
            .collect();
        Ok(EmbeddingTable {
            dim,
            table,
            mean,
            std,
        })
    }

    /// Parses `word v1 ... v_dim` lines; the first line fixes the dimension.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::DimensionMismatch(lineno + 1))?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 {
                return Err(Error::DimensionMismatch(lineno + 1));
            }
            table.entry(word.to_lowercase()).or_insert(values);
        }
        match dim {
            Some(dim) => EmbeddingTable::new(dim, table),
            None => Err(Error::EmptyTable),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading embeddings {}", path.display()), e))?;
        EmbeddingTable::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }

    pub fn per_dim_std(&self) -> &[f64] {
        &self.std
    }

    /// Pseudo-random vector for a word absent from the table, matched to the
    /// table's per-dimension mean and spread and seeded by [`fnv1a64`].
    pub fn oov_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word));
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + s * z
            })
            .collect()
    }

    pub fn vector(&self, word: &str) -> Vec<f64> {
        match self.get(word) {
            Some(v) => v.to_vec(),
            None => {
                log::debug!("embedding OOV: {word}");
                self.oov_vector(word)
            }
        }
    }
}

/// One row per WORD token; PUNCT tokens are skipped.
pub fn lookup_utterance(tokens: &[Token], table: &EmbeddingTable) -> Array2<f64> {
    let words: Vec<&Token> = tokens.iter().filter(|t| t.is_word()).collect();
    let mut out = Array2::zeros((words.len(), table.dim()));
    for (i, tok) in words.iter().enumerate() {
        let v = table.vector(&tok.text);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    out
}

/// Precomputed per-token vectors for one utterance (an `<utt_id>.emb` file).
#[derive(Debug, Clone)]
pub struct ContextualEmbeddings {
    pub utt_id: String,
    pub vectors: Array2<f64>,
}

impl ContextualEmbeddings {
    pub fn load(path: &Path, utt_id: &str) -> Result<Self> {
        let m = read_matrix(path)?;
        Ok(ContextualEmbeddings {
            utt_id: utt_id.to_string(),
            vectors: m.to_f64(),
        })
    }

    pub fn to_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::from_f64(&self.vectors)
            .with_meta("utt_id", self.utt_id.clone())
            .with_meta("kind", "emb")
    }

    /// Checks the row count against the utterance's WORD tokens.
    pub fn for_tokens(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        let words = tokens.iter().filter(|t| t.is_word()).count();
        if self.vectors.nrows() != words {
            return Err(Error::AlignmentError {
                expected: words,
                got: self.vectors.nrows(),
            });
        }
        Ok(self.vectors.clone())
    }
}
