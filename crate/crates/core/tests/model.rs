use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mftts::model::{masked_loss, Batch, EncoderInput, Example, ModelConfig, Tacotron, Variant};
use mftts::Error;

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        n_phones: 9,
        word_dim: 4,
        phone_emb_dim: 8,
        enc_conv_channels: 8,
        enc_blstm_units: 6,
        word_stream_conv_channels: 8,
        word_stream_blstm_units: 4,
        word_dense_units: 8,
        parser_dense_units: 8,
        attention_dim: 8,
        attention_location_filters: 4,
        attention_location_kernel: 5,
        prenet_units: 8,
        prenet_dropout: 0.5,
        decoder_units: 12,
        postnet_channels: 8,
        mel_dim: 10,
        ..ModelConfig::default()
    }
}

fn random_input(cfg: &ModelConfig, t: usize, rng: &mut impl Rng) -> EncoderInput {
    let d = cfg.dims();
    let mut mat = |cols: usize| Array2::from_shape_fn((t, cols), |_| rng.random_range(-1.0..1.0));
    let word_feats = cfg.variant.uses_word().then(|| mat(d.word_in));
    let parser_feats = cfg.variant.uses_parser().then(|| mat(d.parser_in));
    EncoderInput {
        phone_ids: (0..t).map(|i| (i * 5 + 2) % cfg.n_phones).collect(),
        word_feats,
        parser_feats,
    }
}

fn random_example(cfg: &ModelConfig, t: usize, f: usize, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(cfg, t, &mut rng);
    let mel = Array2::from_shape_fn((f, cfg.mel_dim), |_| rng.random_range(-4.0..0.0));
    Example {
        utt_id: format!("u{seed}"),
        input,
        mel,
    }
}

#[test]
fn embedding_init_statistics() {
    let cfg = ModelConfig {
        n_phones: 40,
        ..ModelConfig::default()
    };
    let model = Tacotron::new(cfg, 11).unwrap();
    let ids: Vec<usize> = (0..40).collect();
    let table = model.embed_phones(&ids).unwrap();
    assert_eq!(table.dim(), (40, 256));
    let n = table.len() as f64;
    let mean = table.sum() / n;
    let std = (table.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
    assert!(mean.abs() < 0.1, "mean {mean}");
    assert!((0.9..=1.1).contains(&std), "std {std}");
}

#[test]
fn embedding_rows_and_range() {
    let cfg = ModelConfig {
        n_phones: 40,
        ..ModelConfig::default()
    };
    let model = Tacotron::new(cfg, 1).unwrap();
    let rows = model.embed_phones(&[5, 9, 5]).unwrap();
    assert_eq!(rows.row(0), rows.row(2));
    assert_ne!(rows.row(0), rows.row(1));
    assert!(matches!(
        model.embed_phones(&[40]),
        Err(Error::IndexError { index: 40, size: 40 })
    ));
}

#[test]
fn encoder_shapes_follow_dim_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in Variant::ALL {
        let mut cfg = ModelConfig::with_variant(variant);
        cfg.n_phones = 40;
        cfg.word_dim = 16;
        let want = if variant == Variant::PhoneWord { 384 } else { 256 };
        let model = Tacotron::new(cfg.clone(), 5).unwrap();
        for t in [1, 7, 100] {
            let input = random_input(&cfg, t, &mut rng);
            let enc = model.encode(&input).unwrap();
            assert_eq!(enc.dim(), (t, want), "{variant} T={t}");
            assert!(enc.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn stream_variant_mismatch_is_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny_config(Variant::PhoneWordParser);
    let model = Tacotron::new(cfg.clone(), 5).unwrap();
    let mut input = random_input(&cfg, 4, &mut rng);
    input.parser_feats = None;
    assert!(matches!(model.encode(&input), Err(Error::ConfigError(_))));

    let phone = Tacotron::new(tiny_config(Variant::Phone), 5).unwrap();
    let extra = random_input(&cfg, 4, &mut rng);
    assert!(matches!(phone.encode(&extra), Err(Error::ConfigError(_))));
}

#[test]
fn zero_parser_weights_reduce_to_phone_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pcfg = tiny_config(Variant::PhoneParser);
    let mut parser = Tacotron::new(pcfg.clone(), 21).unwrap();
    let mut phone = Tacotron::new(tiny_config(Variant::Phone), 99).unwrap();

    for name in parser.params.names().to_vec() {
        if name.starts_with("encoder.parser_dense") {
            let id = parser.params.id(&name).unwrap();
            parser.params.value_mut(id).fill(0.0);
        }
    }
    let d = pcfg.dims();
    let (emb, wide) = (d.phone_emb, d.phone_emb + d.parser_dense);
    for name in phone.params.names().to_vec() {
        let Some(src) = parser.params.id(&name) else {
            continue;
        };
        let src = parser.params.value(src).clone();
        let dst = phone.params.value_mut(phone.params.id(&name).unwrap());
        if name == "encoder.conv.0.weight" {
            // keep only the rows that read phone-embedding channels
            for k in 0..pcfg.enc_conv_kernel {
                dst.slice_mut(s![k * emb..(k + 1) * emb, ..])
                    .assign(&src.slice(s![k * wide..k * wide + emb, ..]));
            }
        } else {
            assert_eq!(dst.dim(), src.dim(), "{name}");
            dst.assign(&src);
        }
    }

    for t in [1, 6] {
        let input = random_input(&pcfg, t, &mut rng);
        let a = parser.encode(&input).unwrap();
        let b = phone
            .encode(&EncoderInput {
                parser_feats: None,
                ..input.clone()
            })
            .unwrap();
        let diff = (&a - &b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-12, "T={t} diff {diff}");
    }
}

#[test]
fn teacher_forced_shapes_and_attention() {
    let mut cfg = ModelConfig::with_variant(Variant::Phone);
    cfg.n_phones = 12;
    cfg.width_multiplier = 0.25;
    let model = Tacotron::new(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Array2::from_shape_fn((7, 64), |_| rng.random_range(-1.0..1.0));
    let target = Array2::from_shape_fn((13, 80), |_| rng.random_range(-4.0..0.0));
    // the decoder expects the encoder width of its own config
    assert!(model.decode_teacher_forced(&enc, &target).is_ok());
    let full = Tacotron::new(
        ModelConfig {
            n_phones: 12,
            ..ModelConfig::default()
        },
        2,
    )
    .unwrap();
    let enc = Array2::from_shape_fn((7, 256), |_| rng.random_range(-1.0..1.0));
    let out = full.decode_teacher_forced(&enc, &target).unwrap();
    assert_eq!(out.mel_before.dim(), (13, 80));
    assert_eq!(out.mel_after.dim(), (13, 80));
    assert_eq!(out.stop_logits.len(), 13);
    assert_eq!(out.attention.weights.dim(), (13, 7));
    assert!(out.attention.is_valid(1e-5));

    let wrong = Array2::zeros((7, 100));
    assert!(matches!(
        full.decode_teacher_forced(&wrong, &target),
        Err(Error::ShapeError(_))
    ));
    assert!(matches!(
        full.decode_teacher_forced(&enc, &Array2::zeros((0, 80))),
        Err(Error::ShapeError(_))
    ));
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check_gradients(variant: Variant, seed: u64) {
    let cfg = tiny_config(variant);
    let mut model = Tacotron::new(cfg.clone(), seed).unwrap();
    // zero biases put ReLUs exactly on their kink for the all-zero go frame;
    // check at a generic point instead
    let mut jitter = ChaCha8Rng::seed_from_u64(seed + 100);
    for v in model.params.values_mut() {
        v.mapv_inplace(|x| x + jitter.random_range(-0.05..0.05));
    }
    let examples = [random_example(&cfg, 5, 6, seed), random_example(&cfg, 3, 4, seed + 1)];
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&refs, 1).unwrap();
    let (_, grads) = model.loss_and_grads(&batch, None).unwrap();

    let groups = [
        "encoder.phone_embedding",
        "encoder.conv",
        "encoder.blstm",
        "encoder.word_conv",
        "encoder.word_blstm",
        "encoder.word_dense",
        "encoder.parser_dense",
        "attention",
        "decoder.prenet",
        "decoder.attention_rnn",
        "decoder.decoder_rnn",
        "decoder.mel_proj",
        "decoder.stop_proj",
        "postnet",
    ];
    let names = model.params.names().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let h = 1e-4;
    for group in groups {
        let members: Vec<usize> = (0..names.len())
            .filter(|&i| names[i].starts_with(group))
            .collect();
        if members.is_empty() {
            continue;
        }
        for _ in 0..20 {
            let p = members[rng.random_range(0..members.len())];
            let (rows, cols) = model.params.values()[p].dim();
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = model.params.values()[p][[r, c]];
            model.params.values_mut()[p][[r, c]] = orig + h;
            let up = model.batch_loss(&batch, None).unwrap().total;
            model.params.values_mut()[p][[r, c]] = orig - h;
            let down = model.batch_loss(&batch, None).unwrap().total;
            model.params.values_mut()[p][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[p][[r, c]];
            let err = relative_error(analytic, numeric);
            assert!(
                err < 1e-3,
                "{variant} {}[{r},{c}]: analytic {analytic} numeric {numeric} rel {err}",
                names[p]
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_word_parser() {
    check_gradients(Variant::PhoneWordParser, 31);
}

#[test]
fn gradients_match_finite_differences_word_stream() {
    check_gradients(Variant::PhoneWord, 47);
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    (a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v))
}

#[test]
fn batch_invariance() {
    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let model = Tacotron::new(cfg.clone(), 13).unwrap();
        let examples = [
            random_example(&cfg, 4, 5, 1),
            random_example(&cfg, 9, 11, 2),
            random_example(&cfg, 6, 3, 3),
        ];
        let refs: Vec<&Example> = examples.iter().collect();
        let together = model
            .teacher_forced_batch(&Batch::from_examples(&refs, 1).unwrap())
            .unwrap();
        for (ex, joint) in examples.iter().zip(&together) {
            let alone = model
                .teacher_forced_batch(&Batch::from_examples(&[ex], 1).unwrap())
                .unwrap()
                .remove(0);
            assert!(max_abs_diff(&alone.mel_before, &joint.mel_before) < 1e-4, "{variant}");
            assert!(max_abs_diff(&alone.mel_after, &joint.mel_after) < 1e-4, "{variant}");
            assert!(max_abs_diff(&alone.attention.weights, &joint.attention.weights) < 1e-4);

            let enc = model.encode(&ex.input).unwrap();
            let direct = model.decode_teacher_forced(&enc, &ex.mel).unwrap();
            assert!(max_abs_diff(&direct.mel_after, &alone.mel_after) < 1e-9);
        }
    }
}

#[test]
fn batch_loss_ignores_padding() {
    let cfg = tiny_config(Variant::PhoneParser);
    let model = Tacotron::new(cfg.clone(), 5).unwrap();
    let short = random_example(&cfg, 3, 4, 10);
    let long = random_example(&cfg, 8, 9, 11);
    let alone = model
        .batch_loss(&Batch::from_examples(&[&short], 1).unwrap(), None)
        .unwrap();
    let mut batch = Batch::from_examples(&[&short, &long], 1).unwrap();
    let before = model.batch_loss(&batch, None).unwrap();
    // junk in the padded region of the short item must not matter
    for f in 4..batch.frames {
        batch.mel.row_mut(f).fill(123.0);
    }
    let after = model.batch_loss(&batch, None).unwrap();
    assert!((before.total - after.total).abs() < 1e-9);
    assert!(alone.total > 0.0);
}

#[test]
fn loss_of_perfect_prediction_is_tiny() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = Array2::from_shape_fn((6, 80), |_| rng.random_range(-5.0..0.0));
    let stop = Array1::from_iter((0..6).map(|f| if f == 5 { 1.0 } else { 0.0 }));
    let logits = stop.mapv(|y| if y > 0.5 { 20.0 } else { -20.0 });
    let l = mftts::model::loss(&target, &target, &logits, &target, &stop).unwrap();
    assert!((0.0..1e-6).contains(&l), "{l}");
}

#[test]
fn loss_shape_mismatch() {
    let a = Array2::zeros((4, 80));
    let b = Array2::zeros((5, 80));
    let z = Array1::zeros(4);
    assert!(matches!(
        mftts::model::loss(&a, &a, &z, &b, &z),
        Err(Error::ShapeError(_))
    ));
}

#[test]
fn loss_masking_ignores_junk_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = Array2::from_shape_fn((5, 8), |_| rng.random_range(-5.0..0.0));
    let before = Array2::from_shape_fn((5, 8), |_| rng.random_range(-5.0..0.0));
    let after = Array2::from_shape_fn((5, 8), |_| rng.random_range(-5.0..0.0));
    let logits = Array1::from_shape_fn(5, |_| rng.random_range(-3.0..3.0));
    let stop = Array1::from_iter((0..5).map(|f| if f == 4 { 1.0 } else { 0.0 }));
    let plain = mftts::model::loss(&before, &after, &logits, &target, &stop).unwrap();

    let pad = |m: &Array2<f64>, v: f64| {
        let mut out = Array2::from_elem((9, 8), v);
        out.slice_mut(s![..5, ..]).assign(m);
        out
    };
    let mut logits_p = Array1::from_elem(9, 7.0);
    logits_p.slice_mut(s![..5]).assign(&logits);
    let mut stop_p = Array1::from_elem(9, 1.0);
    stop_p.slice_mut(s![..5]).assign(&stop);
    let padded = masked_loss(
        &pad(&before, 99.0),
        &pad(&after, -42.0),
        &logits_p,
        &pad(&target, 3.0),
        &stop_p,
        5,
    )
    .unwrap();
    assert!((plain - padded).abs() < 1e-6, "{plain} vs {padded}");
}

#[test]
fn inference_respects_frame_limit_and_stop() {
    let cfg = tiny_config(Variant::Phone);
    let mut model = Tacotron::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_input(&cfg, 5, &mut rng);
    let enc = model.encode(&input).unwrap();

    model.stop_bias_mut().fill(f64::NEG_INFINITY);
    let run = model.infer(&enc, 3, None).unwrap();
    assert_eq!(run.mel_after.nrows(), 3);
    assert!(!run.stopped);
    assert!(run.attention.is_valid(1e-5));

    model.stop_bias_mut().fill(f64::INFINITY);
    let run = model.infer(&enc, 50, None).unwrap();
    assert_eq!(run.mel_after.nrows(), 1);
    assert_eq!(run.mel_before.nrows(), 1);
    assert!(run.stopped);
}

#[test]
fn inference_dropout_is_seeded() {
    let cfg = tiny_config(Variant::Phone);
    let mut model = Tacotron::new(cfg.clone(), 3).unwrap();
    model.stop_bias_mut().fill(-1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let enc = model.encode(&random_input(&cfg, 5, &mut rng)).unwrap();
    let run = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        model.infer(&enc, 6, Some(&mut r)).unwrap().mel_after
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let a = model.infer(&enc, 6, None).unwrap().mel_after;
    assert_eq!(a, model.infer(&enc, 6, None).unwrap().mel_after);
}
