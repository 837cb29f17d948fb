//! Synthetic single-speaker corpus: template-grammar sentences with parse
//! trees, rendered as "sine-word" audio where every phone is a steady tone.
//! Small enough to overfit on one CPU, structured enough that attention must
//! learn a monotonic alignment.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audiofeat::{write_wav, AudioClip, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::featalign::atomic_write;
use crate::textfront::{to_phones, tokenize, Lexicon, OovPolicy};

/// Embedding width of the generated static table.
pub const DEMO_EMBEDDING_DIM: usize = 16;

const DET: &[(&str, &str)] = &[
    ("the", "DH AH0"),
    ("a", "AH0"),
    ("this", "DH IH1 S"),
    ("every", "EH1 V R IY0"),
];
const ADJ: &[(&str, &str)] = &[
    ("red", "R EH1 D"),
    ("small", "S M AO1 L"),
    ("quiet", "K W AY1 AH0 T"),
    ("green", "G R IY1 N"),
    ("old", "OW1 L D"),
];
const NOUN: &[(&str, &str)] = &[
    ("cat", "K AE1 T"),
    ("dog", "D AO1 G"),
    ("bird", "B ER1 D"),
    ("tree", "T R IY1"),
    ("house", "HH AW1 S"),
    ("river", "R IH1 V ER0"),
    ("child", "CH AY1 L D"),
];
const VERB: &[(&str, &str)] = &[
    ("sees", "S IY1 Z"),
    ("likes", "L AY1 K S"),
    ("finds", "F AY1 N D Z"),
    ("hears", "HH IY1 R Z"),
    ("follows", "F AA1 L OW0 Z"),
];
const ADV: &[(&str, &str)] = &[
    ("slowly", "S L OW1 L IY0"),
    ("today", "T AH0 D EY1"),
    ("again", "AH0 G EH1 N"),
];
const PREP: &[(&str, &str)] = &[
    ("near", "N IH1 R"),
    ("under", "AH1 N D ER0"),
    ("behind", "B IH0 HH AY1 N D"),
];

/// CMU-style lexicon text covering the demo vocabulary.
pub fn lexicon_text() -> String {
    let mut out = String::from(";;; demo lexicon\n");
    for (word, pron) in [DET, ADJ, NOUN, VERB, ADV, PREP].concat() {
        let _ = writeln!(out, "{}  {pron}", word.to_uppercase());
    }
    out
}

pub fn lexicon() -> Lexicon {
    Lexicon::parse(&lexicon_text()).expect("built-in lexicon is well formed")
}

/// Every demo word.
pub fn vocabulary() -> Vec<&'static str> {
    [DET, ADJ, NOUN, VERB, ADV, PREP]
        .concat()
        .into_iter()
        .map(|(w, _)| w)
        .collect()
}

/// A sentence and its bracketed parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tree: String,
}

fn pick<'a>(rng: &mut impl Rng, list: &'a [(&'a str, &'a str)]) -> &'a str {
    list.choose(rng).expect("non-empty list").0
}

fn noun_phrase(rng: &mut impl Rng, words: &mut Vec<String>, adj_prob: f64) -> String {
    let det = pick(rng, DET);
    let noun = pick(rng, NOUN);
    words.push(det.into());
    if rng.random_bool(adj_prob) {
        let adj = pick(rng, ADJ);
        words.push(adj.into());
        words.push(noun.into());
        format!("(NP (DT {det}) (JJ {adj}) (NN {noun}))")
    } else {
        words.push(noun.into());
        format!("(NP (DT {det}) (NN {noun}))")
    }
}

/// Draws a sentence. `complexity` in `[0, 1]` scales the chance of optional
/// constituents (adjectives, fronted adverb, prepositional phrase).
pub fn sentence(rng: &mut impl Rng, complexity: f64) -> Sentence {
    let c = complexity.clamp(0.0, 1.0);
    let mut words: Vec<String> = Vec::new();
    let mut parts: Vec<String> = Vec::new();
    if rng.random_bool(0.3 * c) {
        let adv = pick(rng, ADV);
        words.push(adv.into());
        words.push(",".into());
        parts.push(format!("(ADVP (RB {adv})) (, ,)"));
    }
    parts.push(noun_phrase(rng, &mut words, 0.5 * c));
    let verb = pick(rng, VERB);
    words.push(verb.into());
    let mut vp = format!("(VP (VBZ {verb}) ");
    if rng.random_bool(0.8) {
        vp.push_str(&noun_phrase(rng, &mut words, 0.5 * c));
    } else {
        let adv = pick(rng, ADV);
        words.push(adv.into());
        let _ = write!(vp, "(ADVP (RB {adv}))");
    }
    if rng.random_bool(0.4 * c) {
        let prep = pick(rng, PREP);
        words.push(prep.into());
        let mut pp_words = Vec::new();
        let np = noun_phrase(rng, &mut pp_words, 0.5 * c);
        words.extend(pp_words);
        let _ = write!(vp, " (PP (IN {prep}) {np})");
    }
    vp.push(')');
    parts.push(vp);
    parts.push("(. .)".into());
    words.push(".".into());

    let mut text = String::new();
    for w in &words {
        if !text.is_empty() && w != "," && w != "." {
            text.push(' ');
        }
        text.push_str(w);
    }
    Sentence {
        text,
        tree: format!("(S {})", parts.join(" ")),
    }
}

/// Tone frequency and duration (in frames) of a phone. Frequencies are
/// log-spaced over the inventory; durations cycle through 4–6 frames.
pub fn phone_tone(lexicon: &Lexicon, phone: usize) -> (f64, usize) {
    let n = lexicon.inventory().len().max(2);
    let frac = phone as f64 / (n - 1) as f64;
    let freq = 150.0 * (4000.0f64 / 150.0).powf(frac);
    (freq, 4 + phone % 3)
}

const SIL_FRAMES: usize = 6;
const TONE_AMPLITUDE: f64 = 0.3;
const NOISE_AMPLITUDE: f64 = 0.003;

/// Renders `text` as audio: one tone per phone, faint noise for pauses.
pub fn render(text: &str, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let tokens = tokenize(text)?;
    let seq = to_phones(&tokens, lexicon, OovPolicy::Fail)?;
    let fade = (0.005 * SAMPLE_RATE as f64) as usize;
    let mut out = Vec::new();
    for &p in &seq.phones {
        if p == lexicon.eos_id() {
            continue;
        }
        if p == lexicon.sil_id() {
            for _ in 0..SIL_FRAMES * HOP {
                let z: f64 = StandardNormal.sample(rng);
                out.push(NOISE_AMPLITUDE * z.clamp(-3.0, 3.0) / 3.0);
            }
            continue;
        }
        let (freq, frames) = phone_tone(lexicon, p);
        let n = frames * HOP;
        let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        for i in 0..n {
            let edge = i.min(n - 1 - i);
            let env = if edge < fade {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            let t = i as f64 / SAMPLE_RATE as f64;
            out.push(TONE_AMPLITUDE * env * (std::f64::consts::TAU * freq * t + phase).sin());
        }
    }
    Ok(out)
}

/// Seeded static embedding table over the demo vocabulary, `word v1 .. v16` lines.
pub fn embeddings_text(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3b0);
    let mut out = String::new();
    for w in vocabulary() {
        out.push_str(w);
        for _ in 0..DEMO_EMBEDDING_DIM {
            let z: f64 = StandardNormal.sample(&mut rng);
            let _ = write!(out, " {:.5}", 0.5 * z);
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Writes a corpus directory: `wavs/`, `transcripts.tsv`, `trees.tsv`,
/// `embeddings.txt` and `lexicon.txt`. With `audio = false` only the text
/// side is written (held-out screening sets).
pub fn write_corpus(dir: &Path, count: usize, seed: u64, complexity: f64, audio: bool) -> Result<Vec<Sentence>> {
    if count == 0 {
        return Err(Error::ConfigError("corpus needs at least one utterance".into()));
    }
    let lex = lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(count);
    let mut transcripts = String::new();
    let mut trees = String::new();
    for i in 0..count {
        // resample duplicates so every utterance is distinct
        let mut s = sentence(&mut rng, complexity);
        for _ in 0..20 {
            if !sentences.contains(&s) {
                break;
            }
            s = sentence(&mut rng, complexity);
        }
        let id = format!("utt{i:03}");
        let _ = writeln!(transcripts, "{id}\t{}", s.text);
        let _ = writeln!(trees, "{id}\t{}", s.tree);
        if audio {
            let samples = render(&s.text, &lex, &mut rng)?;
            write_wav(&dir.join("wavs").join(format!("{id}.wav")), &AudioClip::new(samples)?)?;
        }
        sentences.push(s);
    }
    write_text(&dir.join("transcripts.tsv"), &transcripts)?;
    write_text(&dir.join("trees.tsv"), &trees)?;
    write_text(&dir.join("embeddings.txt"), &embeddings_text(seed))?;
    write_text(&dir.join("lexicon.txt"), &lexicon_text())?;
    Ok(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsefeat::{align_to_tokens, extract_features, read_ptb};

    #[test]
    fn sentences_parse_and_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lex = lexicon();
        for _ in 0..200 {
            let s = sentence(&mut rng, 1.0);
            let tokens = tokenize(&s.text).unwrap();
            to_phones(&tokens, &lex, OovPolicy::Fail).unwrap();
            let tree = read_ptb(&s.tree).unwrap();
            let feats = extract_features(&tree);
            let leaves = tree.words();
            let aligned = align_to_tokens(&feats, &leaves, &tokens).unwrap();
            assert_eq!(aligned.len(), tokens.iter().filter(|t| t.is_word()).count());
        }
    }

    #[test]
    fn render_length_matches_phones() {
        let lex = lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text = "the cat, sees a dog.";
        let samples = render(text, &lex, &mut rng).unwrap();
        let seq = to_phones(&tokenize(text).unwrap(), &lex, OovPolicy::Fail).unwrap();
        let frames: usize = seq
            .phones
            .iter()
            .map(|&p| {
                if p == lex.eos_id() {
                    0
                } else if p == lex.sil_id() {
                    SIL_FRAMES
                } else {
                    phone_tone(&lex, p).1
                }
            })
            .sum();
        assert_eq!(samples.len(), frames * HOP);
        assert!(samples.iter().all(|s| s.abs() <= TONE_AMPLITUDE));
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(a.path(), 3, 9, 0.5, true).unwrap();
        write_corpus(b.path(), 3, 9, 0.5, true).unwrap();
        for f in ["transcripts.tsv", "trees.tsv", "embeddings.txt", "wavs/utt002.wav"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
