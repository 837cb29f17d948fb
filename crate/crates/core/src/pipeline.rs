//! Project directories, featurization and dataset loading.
//!
//! A data directory holds `wavs/<id>.wav`, `transcripts.tsv`, `lexicon.txt`,
//! and optionally `trees.tsv`, `embeddings.txt` and per-utterance `<id>.emb`
//! files. A work directory receives `fmat/`, `checkpoints/` and `reports/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::{read_wav, trim_silence, AudioClip, MelExtractor};
use crate::embedstore::{lookup_utterance, ContextualEmbeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::featalign::{
    atomic_write, matrix_to_phones, phones_to_matrix, read_matrix, upsample, write_matrix,
    FeatureMatrix,
};
use crate::model::{EncoderInput, Example, Variant};
use crate::parsefeat::{align_to_tokens, extract_features, read_ptb, PARSE_FEATURE_DIM};
use crate::textfront::{read_manifest, to_phones, tokenize, Lexicon, OovPolicy, Token, EOS};

/// Leading and trailing audio below this level is dropped before mel extraction.
pub const TRIM_DB: f64 = -60.0;

// Bump when feature computation changes so stale outputs are rebuilt.
const FEATURE_VERSION: &str = "mftts-features-1";

#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn transcripts(&self) -> PathBuf {
        self.root.join("transcripts.tsv")
    }

    pub fn trees(&self) -> PathBuf {
        self.root.join("trees.tsv")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }

    pub fn lexicon(&self) -> PathBuf {
        self.root.join("lexicon.txt")
    }

    pub fn wav(&self, utt_id: &str) -> PathBuf {
        self.root.join("wavs").join(format!("{utt_id}.wav"))
    }

    pub fn emb(&self, utt_id: &str) -> PathBuf {
        self.root.join(format!("{utt_id}.emb"))
    }
}

#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkDir { root: root.into() }
    }

    pub fn fmat_dir(&self) -> PathBuf {
        self.root.join("fmat")
    }

    pub fn feature(&self, utt_id: &str, kind: FeatureKind) -> PathBuf {
        self.fmat_dir().join(format!("{utt_id}.{}.fmat", kind.as_str()))
    }

    pub fn index(&self) -> PathBuf {
        self.fmat_dir().join("index.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Phones,
    Word,
    Parser,
    Mel,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Phones => "phones",
            FeatureKind::Word => "word",
            FeatureKind::Parser => "parser",
            FeatureKind::Mel => "mel",
        }
    }
}

/// What featurize has produced so far, kept next to the feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub phones: Vec<String>,
    pub utterances: Vec<String>,
    pub word_dim: Option<usize>,
    pub oov: OovPolicy,
    /// Data directory featurize read from, for later lexicon and table lookups.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

impl FeatureIndex {
    pub fn load(work: &WorkDir) -> Result<Self> {
        let path = work.index();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingInput {
            path: path.clone(),
            reason: format!("{e}; run featurize first"),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
    }

    pub fn eos_id(&self) -> Result<usize> {
        self.phones
            .iter()
            .position(|p| p == EOS)
            .ok_or_else(|| Error::CorruptFile("feature index has no EOS phone".into()))
    }
}

fn require(path: &Path, why: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            path: path.to_path_buf(),
            reason: why.to_string(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(FEATURE_VERSION.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Word vectors for one utterance: the `<id>.emb` file when present, else the static table.
pub fn word_vectors(
    tokens: &[Token],
    emb: Option<&ContextualEmbeddings>,
    table: Option<&EmbeddingTable>,
    table_path: &Path,
) -> Result<Array2<f64>> {
    match (emb, table) {
        (Some(e), _) => e.for_tokens(tokens),
        (None, Some(t)) => Ok(lookup_utterance(tokens, t)),
        (None, None) => Err(Error::MissingInput {
            path: table_path.to_path_buf(),
            reason: "word variants need an embedding table or per-utterance .emb files".into(),
        }),
    }
}

/// Parse features per WORD token, `[W × PARSE_FEATURE_DIM]`.
pub fn parse_matrix(tokens: &[Token], tree_text: &str) -> Result<Array2<f64>> {
    let tree = read_ptb(tree_text)?;
    let feats = align_to_tokens(&extract_features(&tree), &tree.words(), tokens)?;
    let mut m = Array2::zeros((feats.len(), PARSE_FEATURE_DIM));
    for (i, f) in feats.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::Array1::from(f.to_vec()));
    }
    Ok(m)
}

/// Builds the encoder input for `text`. Word vectors and a tree are used only
/// when the variant consumes them.
pub fn encoder_input(
    text: &str,
    lexicon: &Lexicon,
    oov: OovPolicy,
    variant: Variant,
    words: Option<&Array2<f64>>,
    tree: Option<&str>,
) -> Result<EncoderInput> {
    let tokens = tokenize(text)?;
    let seq = to_phones(&tokens, lexicon, oov)?;
    let word_feats = if variant.uses_word() {
        let w = words.ok_or_else(|| Error::ConfigError(format!("{} needs word vectors", variant.as_str())))?;
        Some(upsample(w, &seq)?)
    } else {
        None
    };
    let parser_feats = if variant.uses_parser() {
        let t = tree.ok_or_else(|| Error::ConfigError(format!("{} needs a parse tree", variant.as_str())))?;
        Some(upsample(&parse_matrix(&tokens, t)?, &seq)?)
    } else {
        None
    };
    Ok(EncoderInput {
        phone_ids: seq.phones,
        word_feats,
        parser_feats,
    })
}

/// Outcome of one featurize run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeaturizeReport {
    pub utterances: usize,
    pub written: usize,
    pub skipped: usize,
}

struct Sources {
    lexicon: Lexicon,
    lexicon_hash: String,
    table: Option<EmbeddingTable>,
    table_hash: String,
    trees: BTreeMap<String, String>,
}

/// Writes `m` unless the file already carries the same source hash.
fn store(path: &Path, hash: &str, build: impl FnOnce() -> Result<FeatureMatrix>) -> Result<bool> {
    if let Ok(existing) = read_matrix(path) {
        if existing.meta.get("source").map(String::as_str) == Some(hash) {
            return Ok(false);
        }
    }
    let m = build()?.with_meta("source", hash);
    write_matrix(&m, path)?;
    Ok(true)
}

fn featurize_one(
    data: &DataDir,
    work: &WorkDir,
    variant: Variant,
    oov: OovPolicy,
    src: &Sources,
    mel: &MelExtractor,
    utt_id: &str,
    text: &str,
) -> Result<(usize, usize)> {
    let tokens = tokenize(text)?;
    let seq = to_phones(&tokens, &src.lexicon, oov)?;
    let oov_tag = format!("{oov:?}");
    let text_hash = digest(&[text.as_bytes(), src.lexicon_hash.as_bytes(), oov_tag.as_bytes()]);
    let mut written = 0;
    let mut skipped = 0;
    let mut tally = |changed: bool| {
        if changed {
            written += 1
        } else {
            skipped += 1
        }
    };

    tally(store(&work.feature(utt_id, FeatureKind::Phones), &text_hash, || {
        Ok(phones_to_matrix(&seq).with_meta("utt_id", utt_id))
    })?);

    let wav_path = data.wav(utt_id);
    require(&wav_path, "every transcript line needs a matching wav file")?;
    let wav_hash = digest(&[&read_file(&wav_path)?]);
    tally(store(&work.feature(utt_id, FeatureKind::Mel), &wav_hash, || {
        let clip = read_wav(&wav_path)?;
        let trimmed = AudioClip::new(trim_silence(&clip.samples, TRIM_DB).to_vec())?;
        let m = mel.wav_to_mel(&trimmed)?;
        Ok(FeatureMatrix::from_f64(&m.frames)
            .with_meta("utt_id", utt_id)
            .with_meta("kind", "mel"))
    })?);

    if variant.uses_word() {
        let emb_path = data.emb(utt_id);
        let (emb, emb_hash) = if emb_path.is_file() {
            let bytes = read_file(&emb_path)?;
            (Some(ContextualEmbeddings::load(&emb_path, utt_id)?), digest(&[&bytes]))
        } else {
            (None, src.table_hash.clone())
        };
        let hash = digest(&[text_hash.as_bytes(), emb_hash.as_bytes()]);
        tally(store(&work.feature(utt_id, FeatureKind::Word), &hash, || {
            let w = word_vectors(&tokens, emb.as_ref(), src.table.as_ref(), &data.embeddings())?;
            Ok(FeatureMatrix::from_f64(&upsample(&w, &seq)?)
                .with_meta("utt_id", utt_id)
                .with_meta("kind", "word"))
        })?);
    }

    if variant.uses_parser() {
        let tree = src.trees.get(utt_id).ok_or_else(|| Error::MissingInput {
            path: data.trees(),
            reason: format!("no parse tree for utterance {utt_id}"),
        })?;
        let hash = digest(&[text_hash.as_bytes(), tree.as_bytes()]);
        tally(store(&work.feature(utt_id, FeatureKind::Parser), &hash, || {
            let p = parse_matrix(&tokens, tree)?;
            Ok(FeatureMatrix::from_f64(&upsample(&p, &seq)?)
                .with_meta("utt_id", utt_id)
                .with_meta("kind", "parser"))
        })?);
    }
    Ok((written, skipped))
}

/// Converts every transcript line into the feature files `variant` needs.
/// Outputs whose inputs are unchanged are left untouched.
pub fn featurize(data: &DataDir, work: &WorkDir, variant: Variant, oov: OovPolicy) -> Result<FeaturizeReport> {
    require(&data.transcripts(), "featurize needs a transcript manifest")?;
    require(&data.lexicon(), "featurize needs a pronunciation lexicon")?;
    let transcripts = read_manifest(&data.transcripts())?;
    if transcripts.is_empty() {
        return Err(Error::ConfigError(format!("{} lists no utterances", data.transcripts().display())));
    }
    let lexicon_bytes = read_file(&data.lexicon())?;
    let lexicon = Lexicon::parse(&String::from_utf8_lossy(&lexicon_bytes))?;

    let mut table = None;
    let mut table_hash = String::new();
    if variant.uses_word() {
        if data.embeddings().is_file() {
            let bytes = read_file(&data.embeddings())?;
            table_hash = digest(&[&bytes]);
            table = Some(EmbeddingTable::parse(&String::from_utf8_lossy(&bytes))?);
        } else if let Some((id, _)) = transcripts.iter().find(|(id, _)| !data.emb(id).is_file()) {
            return Err(Error::MissingInput {
                path: data.embeddings(),
                reason: format!("{} needs embeddings.txt or {id}.emb", variant.as_str()),
            });
        }
    }
    let mut trees = BTreeMap::new();
    if variant.uses_parser() {
        require(&data.trees(), &format!("{} needs parse trees", variant.as_str()))?;
        trees = read_manifest(&data.trees())?.into_iter().collect();
    }
    let src = Sources {
        lexicon_hash: digest(&[&lexicon_bytes]),
        lexicon,
        table,
        table_hash,
        trees,
    };

    std::fs::create_dir_all(work.fmat_dir())
        .map_err(|e| Error::io(format!("creating {}", work.fmat_dir().display()), e))?;
    let mel = MelExtractor::new()?;
    let counts: Vec<(usize, usize)> = transcripts
        .par_iter()
        .map(|(id, text)| featurize_one(data, work, variant, oov, &src, &mel, id, text))
        .collect::<Result<_>>()?;

    let word_dim = if variant.uses_word() {
        let first = &transcripts[0].0;
        Some(read_matrix(&work.feature(first, FeatureKind::Word))?.cols() - 1)
    } else {
        FeatureIndex::load(work).ok().and_then(|i| i.word_dim)
    };
    let index = FeatureIndex {
        phones: src.lexicon.inventory().to_vec(),
        utterances: transcripts.iter().map(|(id, _)| id.clone()).collect(),
        word_dim,
        oov,
        data_dir: Some(std::path::absolute(&data.root).unwrap_or_else(|_| data.root.clone())),
    };
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    let mut report = FeaturizeReport {
        utterances: transcripts.len(),
        ..Default::default()
    };
    if std::fs::read(work.index()).ok().as_deref() != Some(&json[..]) {
        atomic_write(&work.index(), &json)?;
        report.written += 1;
    }
    for (w, s) in counts {
        report.written += w;
        report.skipped += s;
    }
    Ok(report)
}

/// Featurized training data for one variant.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: FeatureIndex,
    pub examples: Vec<Example>,
}

fn load_feature(work: &WorkDir, utt_id: &str, kind: FeatureKind, variant: Variant) -> Result<FeatureMatrix> {
    let path = work.feature(utt_id, kind);
    if !path.is_file() {
        return Err(Error::MissingInput {
            path,
            reason: format!("run featurize with --variant {}", variant.as_str()),
        });
    }
    read_matrix(&path)
}

pub fn load_dataset(work: &WorkDir, variant: Variant) -> Result<Dataset> {
    let index = FeatureIndex::load(work)?;
    if variant.uses_word() && index.word_dim.is_none() {
        return Err(Error::ConfigError(format!(
            "no word features in {}; run featurize with --variant {}",
            work.fmat_dir().display(),
            variant.as_str()
        )));
    }
    let mut examples = Vec::with_capacity(index.utterances.len());
    for id in &index.utterances {
        let seq = matrix_to_phones(&load_feature(work, id, FeatureKind::Phones, variant)?)?;
        let mel = load_feature(work, id, FeatureKind::Mel, variant)?.to_f64();
        let word_feats = if variant.uses_word() {
            Some(load_feature(work, id, FeatureKind::Word, variant)?.to_f64())
        } else {
            None
        };
        let parser_feats = if variant.uses_parser() {
            Some(load_feature(work, id, FeatureKind::Parser, variant)?.to_f64())
        } else {
            None
        };
        examples.push(Example {
            utt_id: id.clone(),
            input: EncoderInput {
                phone_ids: seq.phones,
                word_feats,
                parser_feats,
            },
            mel,
        });
    }
    Ok(Dataset { index, examples })
}
