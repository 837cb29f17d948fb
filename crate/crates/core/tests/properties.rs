mod common;

use common::oracles::*;
use mftts::audiofeat::{wav_to_mel, AudioClip, LOG_FLOOR};
use mftts::embedstore::{lookup_utterance, EmbeddingTable};
use mftts::evalharness::{attention_diagnostics, isotonic_fit};
use mftts::featalign::{upsample, FeatureMatrix};
use mftts::model::AttentionRecord;
use mftts::parsefeat::{extract_features, read_ptb};
use mftts::textfront::{to_phones, tokenize, OovPolicy};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn phones_follow_lexicon(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (lex, entries) = random_lexicon(&mut r);
        let words: Vec<&String> = entries.keys().collect();
        let text = random_text(&mut r, &words);
        let tokens = tokenize(&text).unwrap();

        let stripped: String = text.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
        prop_assert_eq!(joined, stripped);

        let seq = to_phones(&tokens, &lex, OovPolicy::Fail).unwrap();
        let word_tokens: Vec<&str> = tokens.iter().filter(|t| t.is_word()).map(|t| t.text.as_str()).collect();
        let pauses = tokens.iter().filter(|t| !t.is_word() && t.text.chars().all(|c| PAUSE.contains(&c))).count();
        let expected: usize = word_tokens.iter().map(|w| entries[*w].len()).sum::<usize>() + pauses + 1;
        prop_assert_eq!(seq.len(), expected);

        for (i, w) in word_tokens.iter().enumerate() {
            let slice: Vec<usize> = seq.phones.iter().zip(&seq.word_index)
                .filter(|(_, wi)| **wi == Some(i)).map(|(p, _)| *p).collect();
            let want: Vec<usize> = entries[*w].iter().map(|p| lex.phone_id(p).unwrap()).collect();
            prop_assert_eq!(slice, want);
        }
        prop_assert_eq!(*seq.phones.last().unwrap(), lex.eos_id());
        prop_assert_eq!(to_phones(&tokens, &lex, OovPolicy::Fail).unwrap(), seq);
    }

    #[test]
    fn parse_features_match_enumeration(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 12);
        let feats = extract_features(&tree);
        let oracle = brute_force_features(&tree);
        prop_assert_eq!(feats.len(), oracle.len());
        for (f, o) in feats.iter().zip(&oracle) {
            prop_assert_eq!(&f.to_vec(), o);
            prop_assert_eq!(f.to_vec().len(), 11);
        }
        // reading the bracketed form (with function tags) gives the same tree back
        prop_assert_eq!(read_ptb(&to_ptb(&tree, false)).unwrap(), tree.clone());
        prop_assert_eq!(read_ptb(&to_ptb(&tree, true)).unwrap(), tree);
    }

    #[test]
    fn phrase_positions_are_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 12);
        let feats = extract_features(&tree);
        let enc = enclosing_phrases(&tree);
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (leaf, (node, _, _, _)) in enc.iter().enumerate() {
            groups.entry(*node).or_default().push(leaf);
        }
        for members in groups.values() {
            let (_, _, _, l) = enc[members[0]];
            let mut prev = 0.0;
            for &m in members {
                let (_, _, i, _) = enc[m];
                let rp = feats[m].rel_pos;
                prop_assert!(rp > prev && rp < 1.0);
                prev = rp;
                let mirror = (l - 1 - i) as f64 + 0.5;
                prop_assert!((rp + mirror / l as f64 - 1.0).abs() < 1e-12);
            }
            // a nested phrase can own the first or last leaf, so the phrase's
            // own words then carry no border mark
            let begins = members.iter().filter(|&&m| feats[m].begin).count();
            let ends = members.iter().filter(|&&m| feats[m].end).count();
            let owns_first = members.iter().any(|&m| enc[m].2 == 0);
            let owns_last = members.iter().any(|&m| enc[m].2 == l - 1);
            prop_assert_eq!(begins, usize::from(owns_first));
            prop_assert_eq!(ends, usize::from(owns_last));
        }
    }

    #[test]
    fn upsample_matches_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (feats, seq) = random_alignment(&mut r);
        let up = upsample(&feats, &seq).unwrap();
        prop_assert_eq!(up.nrows(), seq.len());
        prop_assert_eq!(&up, &upsample_oracle(&feats, &seq));
        let d = feats.ncols();
        let flags: f64 = up.column(d).sum();
        prop_assert_eq!(flags as usize, seq.word_index.iter().filter(|w| w.is_some()).count());
        let mut dedup: Vec<Vec<f64>> = Vec::new();
        for row in up.rows() {
            if row[d] == 1.0 {
                let v = row.to_vec()[..d].to_vec();
                if dedup.last() != Some(&v) {
                    dedup.push(v);
                }
            }
        }
        let words: Vec<Vec<f64>> = feats.rows().into_iter().map(|r| r.to_vec()).collect();
        // consecutive duplicate words would collapse; random floats make that impossible here
        prop_assert_eq!(dedup, words);
    }

    #[test]
    fn fmat_round_trips_bitwise(rows in 0usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let data = Array2::from_shape_fn((rows, cols), |_| rand::Rng::random::<f32>(&mut r) * 200.0 - 100.0);
        let m = FeatureMatrix::new(data).with_meta("kind", "test").with_meta("utt_id", format!("u{seed}"));
        let back = FeatureMatrix::from_bytes(&m.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.data.shape(), m.data.shape());
        for (a, b) in back.data.iter().zip(m.data.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.meta, m.meta);
    }

    #[test]
    fn diagnostics_match_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random_attention(&mut r);
        let t = w.ncols();
        let d = attention_diagnostics("x", &AttentionRecord { weights: w.clone() }, t, false);
        let (diag, gap, span, fpp) = diagnostics_oracle(&w);
        prop_assert_eq!(d.diagonality, diag);
        prop_assert_eq!(d.max_gap, gap);
        prop_assert_eq!(d.repeat_span, span);
        prop_assert_eq!(d.frames_per_phone, fpp);
        prop_assert!((0.0..=1.0).contains(&d.diagonality));
        // the verdict depends on nothing but the diagnostic itself
        let again = d.clone();
        prop_assert_eq!(d.passes(), again.passes());
    }

    #[test]
    fn isotonic_fit_is_monotone_and_mean_preserving(ys in proptest::collection::vec(-50.0f64..50.0, 0..40)) {
        let fit = isotonic_fit(&ys);
        prop_assert_eq!(fit.len(), ys.len());
        prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-9));
        let (a, b): (f64, f64) = (ys.iter().sum(), fit.iter().sum());
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn embedding_rows_follow_words(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (_, entries) = random_lexicon(&mut r);
        let words: Vec<&String> = entries.keys().collect();
        let table = EmbeddingTable::parse("the 1.0 -2.0 0.5\ncat 0.0 3.0 1.0\n").unwrap();
        let text = random_text(&mut r, &words);
        let tokens = tokenize(&text).unwrap();
        let m = lookup_utterance(&tokens, &table);
        prop_assert_eq!(m.nrows(), tokens.iter().filter(|t| t.is_word()).count());
        prop_assert_eq!(m, lookup_utterance(&tokens, &table));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn log_mel_scales_and_floors(seed in any::<u64>(), c in 0.05f64..=1.0) {
        let mut r = rng(seed);
        let samples: Vec<f64> = (0..4096).map(|_| rand::Rng::random_range(&mut r, -0.9..0.9)).collect();
        let base = wav_to_mel(&AudioClip::new(samples.clone()).unwrap()).unwrap();
        let scaled = wav_to_mel(&AudioClip::new(samples.iter().map(|s| s * c).collect()).unwrap()).unwrap();
        let shift = c.log10();
        for (a, b) in base.frames.iter().zip(scaled.frames.iter()) {
            prop_assert!(a.is_finite() && *a >= LOG_FLOOR && *b >= LOG_FLOOR);
            if *b > LOG_FLOOR + 1e-9 {
                prop_assert!((b - a - shift).abs() < 1e-6, "{} vs {}", b - a, shift);
            }
        }
    }
}
