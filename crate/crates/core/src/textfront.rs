//! Text front end: tokenization and lexicon lookup producing a phone sequence
//! that remembers which word every phone came from.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIL: &str = "SIL";
pub const EOS: &str = "EOS";

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '"', '(', ')', '-'];
const PAUSE_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn word(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            kind: TokenKind::Word,
        }
    }

    pub fn punct(ch: char) -> Self {
        Token {
            text: ch.to_string(),
            kind: TokenKind::Punct,
        }
    }

    pub fn is_word(&self) -> bool {
        self.kind == TokenKind::Word
    }

    /// True for punctuation that is rendered as a pause.
    pub fn is_pause(&self) -> bool {
        self.kind == TokenKind::Punct && self.text.chars().all(|c| PAUSE_PUNCTUATION.contains(&c))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TokenKind::Word => write!(f, "WORD {}", self.text),
            TokenKind::Punct => write!(f, "PUNCT {}", self.text),
        }
    }
}

/// Splits normalized text into lowercase words (`[a-z']+`) and single punctuation marks.
///
/// Positions in [`Error::InvalidCharacter`] are character offsets into `text`.
pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for (pos, ch) in text.chars().enumerate() {
        let lower = ch.to_ascii_lowercase();
        if lower.is_ascii_lowercase() || lower == '\'' {
            word.push(lower);
            continue;
        }
        if !word.is_empty() {
            tokens.push(Token::word(std::mem::take(&mut word)));
        }
        if ch.is_whitespace() {
            continue;
        }
        if PUNCTUATION.contains(&ch) {
            tokens.push(Token::punct(ch));
        } else {
            return Err(Error::InvalidCharacter { ch, pos });
        }
    }
    if !word.is_empty() {
        tokens.push(Token::word(word));
    }
    Ok(tokens)
}

/// What to do with words missing from the lexicon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    #[default]
    Fail,
    /// Spell the word out letter by letter.
    Spell,
}

/// Letter-name pronunciations used by [`OovPolicy::Spell`].
const LETTER_NAMES: [&[&str]; 26] = [
    &["EY"],
    &["B", "IY"],
    &["S", "IY"],
    &["D", "IY"],
    &["IY"],
    &["EH", "F"],
    &["JH", "IY"],
    &["EY", "CH"],
    &["AY"],
    &["JH", "EY"],
    &["K", "EY"],
    &["EH", "L"],
    &["EH", "M"],
    &["EH", "N"],
    &["OW"],
    &["P", "IY"],
    &["K", "Y", "UW"],
    &["AA", "R"],
    &["EH", "S"],
    &["T", "IY"],
    &["Y", "UW"],
    &["V", "IY"],
    &["D", "AH", "B", "AH", "L", "Y", "UW"],
    &["EH", "K", "S"],
    &["W", "AY"],
    &["Z", "IY"],
];

/// Pronunciation lexicon plus the phone inventory that indexes the model's embedding table.
///
/// The inventory is `SIL`, `EOS`, then every other phone in sorted order, so it is a pure
/// function of the lexicon contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
    inventory: Vec<String>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(entries: HashMap<String, Vec<String>>) -> Result<Self> {
        let mut others = BTreeSet::new();
        for (word, phones) in &entries {
            if phones.is_empty() {
                return Err(Error::BadLexicon {
                    line: 0,
                    msg: format!("entry {word:?} has no phones"),
                });
            }
            others.extend(phones.iter().cloned());
        }
        for letter in LETTER_NAMES {
            others.extend(letter.iter().map(|p| p.to_string()));
        }
        others.remove(SIL);
        others.remove(EOS);
        let inventory: Vec<String> = [SIL.to_string(), EOS.to_string()]
            .into_iter()
            .chain(others)
            .collect();
        let index = inventory
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Lexicon {
            entries,
            inventory,
            index,
        })
    }

    /// Parses CMU-dictionary style text: `WORD  PH1 PH2 ...`, `;;;` comments.
    ///
    /// Stress digits are stripped, words are lowercased and alternate pronunciations
    /// (`WORD(1)`) are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            if word.ends_with(')') {
                continue;
            }
            let phones: Vec<String> = parts
                .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()).to_string())
                .collect();
            if phones.is_empty() || phones.iter().any(|p| p.is_empty()) {
                return Err(Error::BadLexicon {
                    line: lineno + 1,
                    msg: format!("no usable phones for {word:?}"),
                });
            }
            entries
                .entry(word.to_lowercase())
                .or_insert(phones);
        }
        Lexicon::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading lexicon {}", path.display()), e))?;
        Lexicon::parse(&text)
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn phone_id(&self, phone: &str) -> Option<usize> {
        self.index.get(phone).copied()
    }

    pub fn sil_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    fn pronounce(&self, word: &str, policy: OovPolicy) -> Result<Vec<usize>> {
        if let Some(phones) = self.entries.get(word) {
            return Ok(phones.iter().map(|p| self.index[p]).collect());
        }
        match policy {
            OovPolicy::Fail => Err(Error::OovWord(word.to_string())),
            OovPolicy::Spell => {
                let ids: Vec<usize> = word
                    .bytes()
                    .filter(u8::is_ascii_lowercase)
                    .flat_map(|b| LETTER_NAMES[(b - b'a') as usize].iter())
                    .map(|p| self.index[*p])
                    .collect();
                if ids.is_empty() {
                    Err(Error::OovWord(word.to_string()))
                } else {
                    Ok(ids)
                }
            }
        }
    }
}

/// Phones of one utterance, each tagged with the WORD token it came from
/// (`None` for `SIL` and `EOS`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSequence {
    pub phones: Vec<usize>,
    pub word_index: Vec<Option<usize>>,
}

impl PhoneSequence {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    /// Number of distinct words referenced by the alignment.
    pub fn word_count(&self) -> usize {
        self.word_index
            .iter()
            .flatten()
            .max()
            .map_or(0, |&w| w + 1)
    }

    /// Phones per word, in word order.
    pub fn phones_per_word(&self) -> Vec<usize> {
        let mut counts = vec![0; self.word_count()];
        for w in self.word_index.iter().flatten() {
            counts[*w] += 1;
        }
        counts
    }
}

/// Converts tokens to phone ids: lexicon entries per word, one `SIL` per pause mark,
/// and a final `EOS`.
pub fn to_phones(tokens: &[Token], lexicon: &Lexicon, policy: OovPolicy) -> Result<PhoneSequence> {
    let mut phones = Vec::new();
    let mut word_index = Vec::new();
    let mut word = 0;
    for token in tokens {
        match token.kind {
            TokenKind::Word => {
                let ids = lexicon.pronounce(&token.text, policy)?;
                word_index.extend(std::iter::repeat_n(Some(word), ids.len()));
                phones.extend(ids);
                word += 1;
            }
            TokenKind::Punct if token.is_pause() => {
                phones.push(lexicon.sil_id());
                word_index.push(None);
            }
            TokenKind::Punct => {}
        }
    }
    phones.push(lexicon.eos_id());
    word_index.push(None);
    Ok(PhoneSequence { phones, word_index })
}

/// Reads a `<utt_id>\t<payload>` manifest, skipping blank lines.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, payload) = line.split_once('\t').ok_or_else(|| {
            Error::ConfigError(format!("manifest line {} has no tab separator", lineno + 1))
        })?;
        rows.push((id.trim().to_string(), payload.trim().to_string()));
    }
    Ok(rows)
}
