use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use mftts::audiofeat::{wav_to_mel, AudioClip, Stft, SAMPLE_RATE};
use mftts::featalign::{upsample, FeatureMatrix};
use mftts::model::{Batch, EncoderInput, Example, ModelConfig, Tacotron, Variant};
use mftts::parsefeat::{extract_features, read_ptb};
use mftts::textfront::{to_phones, tokenize, OovPolicy};
use mftts::trainer::{TrainConfig, Trainer};
use mftts::vocoder::{griffin_lim, GriffinLimConfig};

const TEXT: &str = "The old bird finds a small house near the river, and the child sees this green tree again.";
const TREE: &str = "(S (NP (DT the) (JJ old) (NN bird)) (VP (VBZ finds) (NP (DT a) (JJ small) (NN house)) \
                    (PP (IN near) (NP (DT the) (NN river)))))";

fn sine(secs: f64) -> Vec<f64> {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    (0..n)
        .map(|i| 0.5 * (std::f64::consts::TAU * 220.0 * i as f64 / SAMPLE_RATE as f64).sin())
        .collect()
}

fn front_end(c: &mut Criterion) {
    let lexicon = mftts::demo::lexicon();
    c.bench_function("tokenize+to_phones", |b| {
        b.iter(|| to_phones(&tokenize(black_box(TEXT)).unwrap(), &lexicon, OovPolicy::Spell).unwrap())
    });
    c.bench_function("read_ptb+extract_features", |b| {
        b.iter(|| extract_features(&read_ptb(black_box(TREE)).unwrap()))
    });
    let seq = to_phones(&tokenize(TEXT).unwrap(), &lexicon, OovPolicy::Spell).unwrap();
    let words = Array2::from_shape_fn((seq.word_count(), 16), |(i, j)| (i * 16 + j) as f64 * 0.01);
    c.bench_function("upsample", |b| b.iter(|| upsample(black_box(&words), &seq).unwrap()));
    let m = FeatureMatrix::from_f64(&Array2::from_shape_fn((200, 80), |(i, j)| (i + j) as f64));
    c.bench_function("fmat encode+decode 200x80", |b| {
        b.iter(|| FeatureMatrix::from_bytes(&black_box(&m).to_bytes().unwrap()).unwrap())
    });
}

fn audio(c: &mut Criterion) {
    let clip = AudioClip::new(sine(1.0)).unwrap();
    c.bench_function("wav_to_mel 1s", |b| b.iter(|| wav_to_mel(black_box(&clip)).unwrap()));
    let stft = Stft::default();
    let mag = stft.forward(&sine(0.5)).mapv(|z| z.norm());
    let mut group = c.benchmark_group("vocoder");
    group.sample_size(10);
    group.bench_function("griffin_lim 0.5s x60", |b| {
        b.iter(|| griffin_lim(black_box(&mag), &GriffinLimConfig::default(), &stft, 1).unwrap())
    });
    group.finish();
}

fn example(cfg: &ModelConfig, t: usize, f: usize) -> Example {
    let d = cfg.dims();
    Example {
        utt_id: "bench".into(),
        input: EncoderInput {
            phone_ids: (0..t).map(|i| i % cfg.n_phones).collect(),
            word_feats: cfg.variant.uses_word().then(|| Array2::from_elem((t, d.word_in), 0.1)),
            parser_feats: cfg.variant.uses_parser().then(|| Array2::from_elem((t, d.parser_in), 0.5)),
        },
        mel: Array2::from_shape_fn((f, cfg.mel_dim), |(i, j)| -4.0 + ((i + j) % 7) as f64 * 0.5),
    }
}

fn model(c: &mut Criterion) {
    let mut cfg = ModelConfig::with_variant(Variant::PhoneWordParser);
    cfg.n_phones = 40;
    cfg.word_dim = 16;
    cfg.width_multiplier = 0.25;
    let net = Tacotron::new(cfg.clone(), 0).unwrap();
    let ex = example(&cfg, 20, 90);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("encode PWP x0.25 T=20", |b| b.iter(|| net.encode(black_box(&ex.input)).unwrap()));
    let enc = net.encode(&ex.input).unwrap();
    group.bench_function("infer PWP x0.25 100 frames", |b| b.iter(|| net.infer(black_box(&enc), 100, None).unwrap()));

    let batch_items: Vec<Example> = (0..4).map(|i| example(&cfg, 16 + i, 80 + 5 * i)).collect();
    let refs: Vec<&Example> = batch_items.iter().collect();
    let batch = Batch::from_examples(&refs, 0).unwrap();
    let mut trainer = Trainer::new(net, TrainConfig::default(), vec![], 0).unwrap();
    group.bench_function("train_step PWP x0.25 B=4", |b| b.iter(|| trainer.train_step(black_box(&batch)).unwrap()));
    group.finish();
}

criterion_group!(benches, front_end, audio, model);
criterion_main!(benches);
