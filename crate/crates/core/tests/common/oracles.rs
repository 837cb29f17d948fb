//! Reference implementations written independently of the library, plus the
//! random generators that feed them. Shared by the property tests and the
//! acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use mftts::parsefeat::ParseTree;
use mftts::textfront::{Lexicon, PhoneSequence};
use ndarray::Array2;
use rand::Rng;

// ---- front end ----------------------------------------------------------

const PHONE_POOL: &[&str] = &["AA", "AE", "B", "D", "EH", "IY", "K", "L", "M", "N", "R", "S", "T", "Z"];
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '"', '(', ')', '-'];
pub const PAUSE: &[char] = &['.', ',', ';', ':', '!', '?'];

pub fn random_word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(1..=7);
    let mut w = String::new();
    for i in 0..len {
        if i > 0 && rng.random_bool(0.1) {
            w.push('\'');
        } else {
            w.push(rng.random_range(b'a'..=b'z') as char);
        }
    }
    w
}

/// Random lexicon and the raw entries it was built from.
pub fn random_lexicon(rng: &mut impl Rng) -> (Lexicon, HashMap<String, Vec<String>>) {
    let mut entries = HashMap::new();
    for _ in 0..rng.random_range(1..30) {
        let n = rng.random_range(1..=5);
        let pron: Vec<String> = (0..n)
            .map(|_| PHONE_POOL[rng.random_range(0..PHONE_POOL.len())].to_string())
            .collect();
        entries.insert(random_word(rng), pron);
    }
    (Lexicon::new(entries.clone()).unwrap(), entries)
}

/// Text over the lexicon's words and punctuation, in random letter case.
pub fn random_text(rng: &mut impl Rng, words: &[&String]) -> String {
    let mut out = String::new();
    for _ in 0..rng.random_range(0..15) {
        if rng.random_bool(0.7) && !words.is_empty() {
            if !out.is_empty() {
                out.push(' ');
            }
            let w = words[rng.random_range(0..words.len())];
            for c in w.chars() {
                out.push(if rng.random_bool(0.3) { c.to_ascii_uppercase() } else { c });
            }
        } else {
            if rng.random_bool(0.3) {
                out.push(' ');
            }
            out.push(PUNCT[rng.random_range(0..PUNCT.len())]);
        }
    }
    out
}

// ---- parse trees --------------------------------------------------------

const PHRASE_LABELS: &[&str] = &["NP", "VP", "PP", "ADJP", "ADVP", "S", "SBAR"];
const OTHER_LABELS: &[&str] = &["X", "FRAG", "UCP", "QP", "WHNP"];
const POS: &[&str] = &["DT", "NN", "VB", "JJ", "IN", "RB", "PRP"];

fn gen_tree(rng: &mut impl Rng, leaves: usize, depth: usize) -> ParseTree {
    if leaves == 1 && (depth > 5 || rng.random_bool(0.6)) {
        let pos = POS[rng.random_range(0..POS.len())];
        return ParseTree::leaf(pos, random_word(rng));
    }
    let label = if rng.random_bool(0.75) {
        PHRASE_LABELS[rng.random_range(0..PHRASE_LABELS.len())]
    } else {
        OTHER_LABELS[rng.random_range(0..OTHER_LABELS.len())]
    };
    let k = if leaves == 1 { 1 } else { rng.random_range(2..=leaves.min(3)) };
    // split `leaves` into k positive parts
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < k - 1 {
        let c = rng.random_range(1..leaves);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(leaves)) {
        sizes.push(c - prev);
        prev = c;
    }
    ParseTree::node(label, sizes.into_iter().map(|n| gen_tree(rng, n, depth + 1)).collect())
}

/// Random tree with between 1 and `max_leaves` leaves.
pub fn random_tree(rng: &mut impl Rng, max_leaves: usize) -> ParseTree {
    let n = rng.random_range(1..=max_leaves);
    gen_tree(rng, n, 0)
}

/// Bracketed form; `tag` appends a function tag to every phrase label.
pub fn to_ptb(tree: &ParseTree, tag: bool) -> String {
    if tree.children.is_empty() {
        return format!("({} {})", tree.label, tree.leaf_text);
    }
    let label = if tag { format!("{}-TMP", tree.label) } else { tree.label.clone() };
    let kids: Vec<String> = tree.children.iter().map(|c| to_ptb(c, tag)).collect();
    format!("({label} {})", kids.join(" "))
}

fn paths<'a>(node: &'a ParseTree, stack: &mut Vec<&'a ParseTree>, out: &mut Vec<Vec<&'a ParseTree>>) {
    stack.push(node);
    if node.children.is_empty() {
        out.push(stack.clone());
    }
    for c in &node.children {
        paths(c, stack, out);
    }
    stack.pop();
}

fn leaves_under(node: &ParseTree) -> Vec<*const ParseTree> {
    let mut all = Vec::new();
    paths(node, &mut Vec::new(), &mut all);
    all.iter().map(|p| *p.last().unwrap() as *const ParseTree).collect()
}

/// Per leaf: `(enclosing node address, slot, index within it, its leaf count)`,
/// found by enumerating every (leaf, ancestor) pair and keeping the deepest
/// ancestor with a phrase label.
pub fn enclosing_phrases(tree: &ParseTree) -> Vec<(usize, usize, usize, usize)> {
    let mut all = Vec::new();
    paths(tree, &mut Vec::new(), &mut all);
    let mut out = Vec::new();
    for path in &all {
        let leaf = *path.last().unwrap() as *const ParseTree;
        let mut best: Option<(usize, usize)> = None; // (depth, slot)
        for (depth, anc) in path[..path.len() - 1].iter().enumerate() {
            if let Some(slot) = PHRASE_LABELS.iter().position(|l| *l == anc.label) {
                if best.is_none_or(|(d, _)| depth > d) {
                    best = Some((depth, slot));
                }
            }
        }
        let (node, slot) = match best {
            Some((d, s)) => (path[d], s),
            None => (path[0], 7),
        };
        let under = leaves_under(node);
        let i = under.iter().position(|p| *p == leaf).unwrap();
        out.push((node as *const ParseTree as usize, slot, i, under.len()));
    }
    out
}

/// Per-leaf `[one-hot(8), begin, end, rel_pos]` from [`enclosing_phrases`].
pub fn brute_force_features(tree: &ParseTree) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (_, slot, i, l) in enclosing_phrases(tree) {
        let mut v = vec![0.0; 11];
        v[slot] = 1.0;
        v[8] = if i == 0 { 1.0 } else { 0.0 };
        v[9] = if i == l - 1 { 1.0 } else { 0.0 };
        v[10] = (i as f64 + 0.5) / l as f64;
        out.push(v);
    }
    out
}

// ---- upsampling -----------------------------------------------------------

/// Word feature matrix plus a matching alignment with pauses sprinkled in and a final EOS.
pub fn random_alignment(rng: &mut impl Rng) -> (Array2<f64>, PhoneSequence) {
    let w = rng.random_range(0..7);
    let d = rng.random_range(1..6);
    let feats = Array2::from_shape_fn((w, d), |_| rng.random_range(-3.0..3.0));
    let mut phones = Vec::new();
    let mut word_index = Vec::new();
    for word in 0..w {
        if rng.random_bool(0.3) {
            phones.push(0);
            word_index.push(None);
        }
        for _ in 0..rng.random_range(1..=4) {
            phones.push(rng.random_range(2..20));
            word_index.push(Some(word));
        }
    }
    phones.push(1);
    word_index.push(None);
    (feats, PhoneSequence { phones, word_index })
}

/// Loop oracle: every row checked against its source by index arithmetic.
pub fn upsample_oracle(feats: &Array2<f64>, seq: &PhoneSequence) -> Array2<f64> {
    let d = feats.ncols();
    let mut out = Array2::from_elem((seq.phones.len(), d + 1), f64::NAN);
    for t in 0..seq.phones.len() {
        for c in 0..=d {
            out[[t, c]] = match seq.word_index[t] {
                Some(w) if c < d => feats[[w, c]],
                Some(_) => 1.0,
                None => 0.0,
            };
        }
    }
    out
}

// ---- attention diagnostics ------------------------------------------------

/// `(diagonality, max_gap, repeat_span, frames_per_phone)` straight from the definitions.
pub fn diagnostics_oracle(w: &Array2<f64>) -> (f64, usize, usize, f64) {
    let (f, t) = w.dim();
    let p: Vec<usize> = (0..f)
        .map(|r| {
            let mut best = 0;
            for c in 1..t {
                if w[[r, c]] > w[[r, best]] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let y: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    // isotonic regression by the max-min formula
    let fit = |i: usize| {
        (0..=i)
            .map(|j| {
                (i..f)
                    .map(|k| y[j..=k].iter().sum::<f64>() / (k - j + 1) as f64)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let near = (0..f).filter(|&i| (y[i] - fit(i)).abs() <= 3.0 + 1e-9).count();
    let diag = if f == 0 { 0.0 } else { near as f64 / f as f64 };
    let (mut gap, mut run) = (0, 0);
    for s in 0..t {
        let covered = p.iter().any(|&q| s.abs_diff(q) <= 2);
        run = if covered { 0 } else { run + 1 };
        gap = gap.max(run);
    }
    let mut longest = 0;
    for start in 0..f {
        let mut end = start;
        while end + 1 < f && p[end + 1] == p[start] {
            end += 1;
        }
        longest = longest.max(end - start + 1);
    }
    let span = if longest >= 8 { longest.min(t) } else { 0 };
    (diag, gap, span, f as f64 / t as f64)
}

/// Mix of random, uniform and noisy-diagonal attention matrices (rows sum to one).
pub fn random_attention(rng: &mut impl Rng) -> Array2<f64> {
    let f = rng.random_range(1..60);
    let t = rng.random_range(1..25);
    let kind = rng.random_range(0..3);
    let mut w = Array2::from_shape_fn((f, t), |(r, c)| match kind {
        0 => rng.random::<f64>(),
        1 => 1.0,
        _ => {
            let centre = r as f64 * t as f64 / f as f64 + rng.random_range(-4.0..4.0);
            (-(c as f64 - centre).powi(2)).exp() + 1e-3 * rng.random::<f64>()
        }
    });
    for mut row in w.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    w
}
