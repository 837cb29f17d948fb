//! Bracketed constituency trees and the per-word parse features derived from them:
//! the type of the enclosing phrase, whether the word opens or closes it, and its
//! relative position inside it.

use std::fmt;

use crate::error::{Error, Result};
use crate::textfront::Token;

/// Phrase labels with their own one-hot slot; everything else maps to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhraseType {
    Np,
    Vp,
    Pp,
    Adjp,
    Advp,
    S,
    Sbar,
    Other,
}

impl PhraseType {
    pub const ALL: [PhraseType; 8] = [
        PhraseType::Np,
        PhraseType::Vp,
        PhraseType::Pp,
        PhraseType::Adjp,
        PhraseType::Advp,
        PhraseType::S,
        PhraseType::Sbar,
        PhraseType::Other,
    ];

    /// Maps a (function-tag-stripped) label to a phrase type; `None` if the label
    /// does not open a phrase of interest.
    pub fn from_label(label: &str) -> Option<Self> {
        Some(match label {
            "NP" => PhraseType::Np,
            "VP" => PhraseType::Vp,
            "PP" => PhraseType::Pp,
            "ADJP" => PhraseType::Adjp,
            "ADVP" => PhraseType::Advp,
            "S" => PhraseType::S,
            "SBAR" => PhraseType::Sbar,
            _ => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Width of the one-hot phrase type block.
pub const PHRASE_TYPES: usize = 8;
/// Width of [`WordParseFeatures::to_vec`].
pub const PARSE_FEATURE_DIM: usize = PHRASE_TYPES + 3;

#[derive(Debug, Clone, PartialEq)]
pub struct WordParseFeatures {
    pub phrase_type: PhraseType,
    pub begin: bool,
    pub end: bool,
    pub rel_pos: f64,
}

impl WordParseFeatures {
    /// `[one-hot(8), begin, end, rel_pos]`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; PARSE_FEATURE_DIM];
        v[self.phrase_type.index()] = 1.0;
        v[PHRASE_TYPES] = f64::from(u8::from(self.begin));
        v[PHRASE_TYPES + 1] = f64::from(u8::from(self.end));
        v[PHRASE_TYPES + 2] = self.rel_pos;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub label: String,
    pub children: Vec<ParseTree>,
    /// Word for preterminal leaves, empty for internal nodes.
    pub leaf_text: String,
}

impl ParseTree {
    pub fn leaf(label: impl Into<String>, text: impl Into<String>) -> Self {
        ParseTree {
            label: label.into(),
            children: Vec::new(),
            leaf_text: text.into(),
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree {
            label: label.into(),
            children,
            leaf_text: String::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn leaves(&self) -> Vec<&ParseTree> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a ParseTree>) {
        if self.is_leaf() {
            out.push(self);
        } else {
            for child in &self.children {
                child.collect_leaves(out);
            }
        }
    }

    pub fn words(&self) -> Vec<String> {
        self.leaves().iter().map(|l| l.leaf_text.clone()).collect()
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(ParseTree::leaf_count).sum()
        }
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_leaf() {
            write!(f, "({} {})", self.label, self.leaf_text)
        } else {
            write!(f, "({}", self.label)?;
            for child in &self.children {
                write!(f, " {child}")?;
            }
            write!(f, ")")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(text: &str) -> Vec<(usize, Lexeme<'_>)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let delim = ch == '(' || ch == ')' || ch.is_whitespace();
        if delim {
            if let Some(s) = start.take() {
                out.push((s, Lexeme::Atom(&text[s..i])));
            }
            match ch {
                '(' => out.push((i, Lexeme::Open)),
                ')' => out.push((i, Lexeme::Close)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Lexeme::Atom(&text[s..])));
    }
    out
}

/// `NP-SBJ-1` → `NP`, `S=2` → `S`; labels starting with `-` (`-NONE-`, `-LRB-`) are kept.
fn strip_function_tags(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    label.split(['-', '=']).next().unwrap_or(label)
}

struct TreeReader<'a> {
    lexemes: Vec<(usize, Lexeme<'a>)>,
    pos: usize,
    end: usize,
}

impl<'a> TreeReader<'a> {
    fn malformed(&self, offset: usize, msg: &str) -> Error {
        Error::MalformedTree {
            offset,
            msg: msg.to_string(),
        }
    }

    fn offset(&self) -> usize {
        self.lexemes.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    /// Parses one bracketed node. Returns `None` for deleted (trace) nodes.
    fn node(&mut self) -> Result<Option<ParseTree>> {
        let open_at = self.offset();
        match self.lexemes.get(self.pos) {
            Some((_, Lexeme::Open)) => self.pos += 1,
            _ => return Err(self.malformed(open_at, "expected '('")),
        }
        let label = match self.lexemes.get(self.pos) {
            Some((_, Lexeme::Atom(a))) => {
                self.pos += 1;
                *a
            }
            _ => "",
        };
        let mut children = Vec::new();
        let mut leaf_text: Option<&str> = None;
        let mut had_children = false;
        loop {
            let at = self.offset();
            match self.lexemes.get(self.pos).cloned() {
                None => return Err(self.malformed(at, "unbalanced parentheses")),
                Some((_, Lexeme::Close)) => {
                    self.pos += 1;
                    break;
                }
                Some((_, Lexeme::Open)) => {
                    if leaf_text.is_some() {
                        return Err(self.malformed(at, "word mixed with subtrees"));
                    }
                    had_children = true;
                    if let Some(child) = self.node()? {
                        children.push(child);
                    }
                }
                Some((_, Lexeme::Atom(a))) => {
                    if had_children || leaf_text.is_some() {
                        return Err(self.malformed(at, "unexpected bare word"));
                    }
                    leaf_text = Some(a);
                    self.pos += 1;
                }
            }
        }
        if label == "-NONE-" {
            return Ok(None);
        }
        if let Some(word) = leaf_text {
            return Ok(Some(ParseTree::leaf(label, word)));
        }
        if !had_children {
            return Err(self.malformed(open_at, "empty node"));
        }
        if children.is_empty() {
            // every child was a trace
            return Ok(None);
        }
        Ok(Some(ParseTree::node(strip_function_tags(label), children)))
    }
}

/// Reads a Penn-Treebank style bracketed tree, removing a `ROOT` (or unlabeled) wrapper,
/// function tags and `-NONE-` trace nodes.
pub fn read_ptb(text: &str) -> Result<ParseTree> {
    let mut reader = TreeReader {
        lexemes: lex(text),
        pos: 0,
        end: text.len(),
    };
    let tree = reader.node()?;
    if reader.pos != reader.lexemes.len() {
        let at = reader.offset();
        return Err(reader.malformed(at, "trailing input after tree"));
    }
    let mut tree = tree.ok_or_else(|| reader.malformed(0, "tree has no words"))?;
    while (tree.label == "ROOT" || tree.label.is_empty()) && tree.children.len() == 1 {
        tree = tree.children.pop().expect("one child");
    }
    Ok(tree)
}

struct Phrase {
    kind: PhraseType,
    first_leaf: usize,
    len: usize,
}

fn walk(node: &ParseTree, enclosing: &Phrase, next_leaf: &mut usize, out: &mut Vec<WordParseFeatures>) {
    if node.is_leaf() {
        let i = *next_leaf - enclosing.first_leaf;
        let l = enclosing.len;
        out.push(WordParseFeatures {
            phrase_type: enclosing.kind,
            begin: i == 0,
            end: i + 1 == l,
            rel_pos: (i as f64 + 0.5) / l as f64,
        });
        *next_leaf += 1;
        return;
    }
    let own;
    let enclosing = match PhraseType::from_label(&node.label) {
        Some(kind) => {
            own = Phrase {
                kind,
                first_leaf: *next_leaf,
                len: node.leaf_count(),
            };
            &own
        }
        None => enclosing,
    };
    for child in &node.children {
        walk(child, enclosing, next_leaf, out);
    }
}

/// One feature row per leaf, using the lowest phrase-inventory ancestor as the
/// enclosing phrase (or the whole tree, typed `Other`, when there is none).
pub fn extract_features(tree: &ParseTree) -> Vec<WordParseFeatures> {
    let root = Phrase {
        kind: PhraseType::Other,
        first_leaf: 0,
        len: tree.leaf_count(),
    };
    let mut out = Vec::with_capacity(root.len);
    let mut next = 0;
    walk(tree, &root, &mut next, &mut out);
    out
}

fn is_punct_leaf(text: &str) -> bool {
    matches!(text, "-LRB-" | "-RRB-" | "-LCB-" | "-RCB-" | "-LSB-" | "-RSB-")
        || !text.chars().any(|c| c.is_alphanumeric())
}

/// Re-indexes per-leaf features to the front end's WORD tokens.
///
/// Punctuation leaves and PUNCT tokens are ignored. Parser clitic splits
/// (`do` + `n't` for `don't`) are merged back; the merged word keeps the
/// features of its first piece.
pub fn align_to_tokens(
    features: &[WordParseFeatures],
    tree_leaves: &[String],
    tokens: &[Token],
) -> Result<Vec<WordParseFeatures>> {
    let leaves: Vec<(usize, String)> = tree_leaves
        .iter()
        .enumerate()
        .filter(|(_, t)| !is_punct_leaf(t))
        .map(|(i, t)| (i, t.to_lowercase()))
        .collect();
    let words: Vec<&str> = tokens
        .iter()
        .filter(|t| t.is_word())
        .map(|t| t.text.as_str())
        .collect();
    let mismatch = |index: usize, leaf: &str, token: &str| Error::TokenizationMismatch {
        index,
        leaf: leaf.to_string(),
        token: token.to_string(),
    };

    let mut out = Vec::with_capacity(words.len());
    let mut li = 0;
    for (wi, word) in words.iter().enumerate() {
        let Some((first_idx, first)) = leaves.get(li) else {
            return Err(mismatch(wi, "<end>", word));
        };
        let mut joined = first.clone();
        li += 1;
        while joined != *word && word.starts_with(joined.as_str()) && li < leaves.len() {
            let candidate = format!("{joined}{}", leaves[li].1);
            if !word.starts_with(candidate.as_str()) {
                break;
            }
            joined = candidate;
            li += 1;
        }
        if joined != *word {
            return Err(mismatch(wi, first, word));
        }
        let row = features
            .get(*first_idx)
            .ok_or_else(|| Error::ShapeError(format!("no features for leaf {first_idx}")))?;
        out.push(row.clone());
    }
    if let Some((_, extra)) = leaves.get(li) {
        return Err(mismatch(words.len(), extra, "<end>"));
    }
    Ok(out)
}
