//! Attention-based robustness screening: per-case diagnostics, pass verdicts
//! and per-variant pass rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audiofeat::argmax;
use crate::embedstore::{fnv1a64, ContextualEmbeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::featalign::atomic_write;
use crate::model::{AttentionRecord, Checkpoint, Variant};
use crate::pipeline::{encoder_input, word_vectors};
use crate::textfront::{tokenize, Lexicon, OovPolicy};

pub const MIN_DIAGONALITY: f64 = 0.9;
pub const MAX_REPEAT_SPAN: usize = 16;
pub const FRAMES_PER_PHONE: (f64, f64) = (2.0, 30.0);
/// Frames with identical focus needed before a run counts as stuck.
pub const STUCK_FRAMES: usize = 8;
/// Decoding budget per phone during screening; hitting it marks a runaway.
pub const SCREEN_FRAMES_PER_PHONE: usize = 32;

const FIT_TOLERANCE: f64 = 3.0;
const COVER_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseDiagnostic {
    pub utt_id: String,
    pub diagonality: f64,
    pub max_gap: usize,
    pub repeat_span: usize,
    pub runaway: bool,
    pub frames_per_phone: f64,
}

impl CaseDiagnostic {
    pub fn passes(&self) -> bool {
        self.diagonality >= MIN_DIAGONALITY
            && self.max_gap == 0
            && self.repeat_span < MAX_REPEAT_SPAN
            && !self.runaway
            && (FRAMES_PER_PHONE.0..=FRAMES_PER_PHONE.1).contains(&self.frames_per_phone)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemReport {
    pub variant: Variant,
    pub case_pass_rate: f64,
    pub cases: Vec<CaseDiagnostic>,
}

impl SystemReport {
    pub fn new(variant: Variant, cases: Vec<CaseDiagnostic>) -> Self {
        let passed = cases.iter().filter(|c| c.passes()).count();
        let case_pass_rate = if cases.is_empty() {
            0.0
        } else {
            passed as f64 / cases.len() as f64
        };
        SystemReport {
            variant,
            case_pass_rate,
            cases,
        }
    }
}

/// Least-squares non-decreasing fit (pool adjacent violators).
pub fn isotonic_fit(y: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, w2) = blocks[blocks.len() - 1];
            let (m1, w1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((m1 * w1 as f64 + m2 * w2 as f64) / w as f64, w);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, w)| std::iter::repeat_n(m, w))
        .collect()
}

/// Scores one attention matrix (`frames × t`). `runaway` is whether decoding
/// hit its frame limit.
pub fn attention_diagnostics(utt_id: &str, attn: &AttentionRecord, t: usize, runaway: bool) -> CaseDiagnostic {
    let frames = attn.frames();
    let focus: Vec<usize> = attn.weights.rows().into_iter().map(|r: ArrayView1<f64>| argmax(r)).collect();

    let y: Vec<f64> = focus.iter().map(|&p| p as f64).collect();
    let fit = isotonic_fit(&y);
    let near = y
        .iter()
        .zip(&fit)
        .filter(|(p, f)| (*p - *f).abs() <= FIT_TOLERANCE + 1e-9)
        .count();
    let diagonality = if frames == 0 { 0.0 } else { near as f64 / frames as f64 };

    let mut covered = vec![false; t];
    for &p in &focus {
        let lo = p.saturating_sub(COVER_RADIUS);
        let hi = (p + COVER_RADIUS).min(t.saturating_sub(1));
        for c in covered.iter_mut().take(hi + 1).skip(lo) {
            *c = true;
        }
    }
    let max_gap = longest_run(covered.iter().map(|c| !c));

    let mut longest = 0;
    let mut run = 0;
    for (i, p) in focus.iter().enumerate() {
        run = if i > 0 && focus[i - 1] == *p { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    let repeat_span = if longest >= STUCK_FRAMES { longest.min(t) } else { 0 };

    CaseDiagnostic {
        utt_id: utt_id.to_string(),
        diagonality,
        max_gap,
        repeat_span,
        runaway,
        frames_per_phone: if t == 0 { 0.0 } else { frames as f64 / t as f64 },
    }
}

fn longest_run(flags: impl Iterator<Item = bool>) -> usize {
    let mut best = 0;
    let mut run = 0;
    for f in flags {
        run = if f { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// Front-end material shared by every screened variant.
#[derive(Debug, Clone)]
pub struct ScreenInputs {
    pub lexicon: Lexicon,
    pub oov: OovPolicy,
    pub table: Option<EmbeddingTable>,
    pub table_path: PathBuf,
    /// `utt_id → bracketed tree`
    pub trees: BTreeMap<String, String>,
    pub trees_path: PathBuf,
    /// Directory searched for `<utt_id>.emb`.
    pub emb_dir: Option<PathBuf>,
}

/// Synthesizes every manifest line with each checkpoint and scores the attention.
pub fn screen_corpus(
    checkpoints: &[PathBuf],
    manifest: &[(String, String)],
    inputs: &ScreenInputs,
    seed: u64,
) -> Result<Vec<SystemReport>> {
    let mut models = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        if !path.is_file() {
            return Err(Error::ConfigError(format!("checkpoint {} does not exist", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        if ck.phones != inputs.lexicon.inventory() {
            return Err(Error::ConfigError(format!(
                "checkpoint {} was trained on a different phone inventory",
                path.display()
            )));
        }
        models.push(ck.model);
    }
    let mut reports = Vec::with_capacity(models.len());
    for model in &models {
        let variant = model.variant();
        let mut cases = Vec::with_capacity(manifest.len());
        for (utt_id, text) in manifest {
            let words = if variant.uses_word() {
                let tokens = tokenize(text)?;
                let emb = match &inputs.emb_dir {
                    Some(dir) if dir.join(format!("{utt_id}.emb")).is_file() => {
                        Some(ContextualEmbeddings::load(&dir.join(format!("{utt_id}.emb")), utt_id)?)
                    }
                    _ => None,
                };
                Some(word_vectors(&tokens, emb.as_ref(), inputs.table.as_ref(), &inputs.table_path)?)
            } else {
                None
            };
            let tree = if variant.uses_parser() {
                Some(inputs.trees.get(utt_id).ok_or_else(|| Error::MissingInput {
                    path: inputs.trees_path.clone(),
                    reason: format!("no parse tree for utterance {utt_id}"),
                })?)
            } else {
                None
            };
            let input = encoder_input(
                text,
                &inputs.lexicon,
                inputs.oov,
                variant,
                words.as_ref(),
                tree.map(String::as_str),
            )?;
            let t = input.len();
            let enc = model.encode(&input)?;
            let budget = (SCREEN_FRAMES_PER_PHONE * t).min(model.config.max_decoder_frames);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(utt_id));
            let out = model.infer(&enc, budget, Some(&mut rng))?;
            cases.push(attention_diagnostics(utt_id, &out.attention, t, !out.stopped));
        }
        reports.push(SystemReport::new(variant, cases));
    }
    Ok(reports)
}

pub const REPORT_HEADER: &str =
    "utt_id\tvariant\tdiagonality\tmax_gap\trepeat_span\trunaway\tframes_per_phone\tpass";

pub fn report_tsv(reports: &[SystemReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.cases {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{}\t{}\t{}\t{:.3}\t{}",
                c.utt_id,
                r.variant.as_str(),
                c.diagonality,
                c.max_gap,
                c.repeat_span,
                c.runaway,
                c.frames_per_phone,
                c.passes()
            );
        }
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    pass_rates: BTreeMap<&'a str, f64>,
    cases: BTreeMap<&'a str, usize>,
    ordering: Vec<&'a str>,
}

/// Variants from lowest to highest pass rate (stable on ties).
pub fn ordering(reports: &[SystemReport]) -> Vec<&SystemReport> {
    let mut sorted: Vec<&SystemReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.case_pass_rate.total_cmp(&b.case_pass_rate));
    sorted
}

/// One line such as `PHONE 0.750 < PHONE_WORD_PARSER 1.000`.
pub fn ordering_line(reports: &[SystemReport]) -> String {
    let sorted = ordering(reports);
    let mut out = String::new();
    for (i, r) in sorted.iter().enumerate() {
        if i > 0 {
            let prev = sorted[i - 1].case_pass_rate;
            out.push_str(if r.case_pass_rate > prev { " < " } else { " = " });
        }
        let _ = write!(out, "{} {:.3}", r.variant.as_str(), r.case_pass_rate);
    }
    out
}

pub fn summary_json(reports: &[SystemReport]) -> String {
    let summary = Summary {
        pass_rates: reports.iter().map(|r| (r.variant.as_str(), r.case_pass_rate)).collect(),
        cases: reports.iter().map(|r| (r.variant.as_str(), r.cases.len())).collect(),
        ordering: ordering(reports).iter().map(|r| r.variant.as_str()).collect(),
    };
    serde_json::to_string_pretty(&summary).expect("summary serializes")
}

/// Writes `report.tsv` and `summary.json` into `dir`.
pub fn write_reports(dir: &Path, reports: &[SystemReport]) -> Result<(PathBuf, PathBuf)> {
    let tsv = dir.join("report.tsv");
    let json = dir.join("summary.json");
    atomic_write(&tsv, report_tsv(reports).as_bytes())?;
    atomic_write(&json, summary_json(reports).as_bytes())?;
    Ok((tsv, json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn one_hot(focus: &[usize], t: usize) -> AttentionRecord {
        let mut w = Array2::zeros((focus.len(), t));
        for (f, &p) in focus.iter().enumerate() {
            w[[f, p]] = 1.0;
        }
        AttentionRecord { weights: w }
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(isotonic_fit(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_fit(&[]), Vec::<f64>::new());
    }

    #[test]
    fn diagonal_attention_passes() {
        let (f, t) = (50, 20);
        let focus: Vec<usize> = (0..f)
            .map(|i| (((i * t) as f64 / f as f64).round() as usize).min(t - 1))
            .collect();
        let d = attention_diagnostics("u", &one_hot(&focus, t), t, false);
        assert_eq!(d.diagonality, 1.0);
        assert_eq!(d.max_gap, 0);
        assert!(d.repeat_span < STUCK_FRAMES);
        assert!(d.passes());
    }

    #[test]
    fn stuck_attention_fails() {
        let d = attention_diagnostics("u", &one_hot(&[0; 50], 20), 20, false);
        assert_eq!(d.repeat_span, 20);
        assert!(d.max_gap >= 17);
        assert!(!d.passes());
    }

    #[test]
    fn pass_rate_counts_cases() {
        let good = attention_diagnostics("a", &one_hot(&[0, 0, 1, 1, 2, 2, 3, 3], 4), 4, false);
        let mut bad = good.clone();
        bad.runaway = true;
        let r = SystemReport::new(Variant::Phone, vec![good.clone(), good.clone(), good, bad]);
        assert_eq!(r.case_pass_rate, 0.75);
    }
}
