//! Sequence-to-sequence acoustic model: phone embedding, one of four encoder
//! fusion topologies, location-sensitive attention, a two-layer recurrent
//! decoder with stop token, and a convolutional post-net.
//!
//! Encoder topologies:
//!
//! * `PHONE`: embedding → conv stack → BLSTM.
//! * `PHONE_WORD`: the phone stream and a separate word stream (own conv stack
//!   and BLSTM) run independently; their BLSTM outputs are concatenated.
//! * `PHONE_PARSER`: parse features → dense stack, concatenated with the phone
//!   embedding, then the shared conv stack and BLSTM.
//! * `PHONE_WORD_PARSER`: word and parse features each go through their own
//!   dense stack, both are concatenated with the phone embedding, then the
//!   shared conv stack and BLSTM.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;
pub mod tape;

use std::rc::Rc;

use ndarray::{s, Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use batch::{Batch, EncoderInput, Example, SeqMask};
pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{Dims, ModelConfig, Variant};
use layers::{BiLstm, Conv1d, Graph, Init, Linear, Lstm};
pub use params::{ParamId, ParamStore};
use tape::Var;

/// Positive-class weight of the stop-token loss.
pub const STOP_POS_WEIGHT: f64 = 6.0;

/// Decoder-frame × encoder-step attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub weights: Array2<f64>,
}

impl AttentionRecord {
    pub fn frames(&self) -> usize {
        self.weights.nrows()
    }

    pub fn steps(&self) -> usize {
        self.weights.ncols()
    }

    /// Every row non-negative and summing to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.weights
            .rows()
            .into_iter()
            .all(|r| r.iter().all(|&w| w >= 0.0) && (r.sum() - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub mel_before: Array2<f64>,
    pub mel_after: Array2<f64>,
    pub stop_logits: Array1<f64>,
    pub attention: AttentionRecord,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub mel_before: Array2<f64>,
    pub mel_after: Array2<f64>,
    pub attention: AttentionRecord,
    /// `false` when decoding hit the frame limit without a stop decision.
    pub stopped: bool,
}

/// Loss components for a batch; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mel_before: f64,
    pub mel_after: f64,
    pub stop: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
struct Attention {
    query: Linear,
    memory: Linear,
    location_conv: Conv1d,
    location_dense: Linear,
    bias: ParamId,
    score: ParamId,
}

#[derive(Debug, Clone)]
struct Net {
    embedding: ParamId,
    phone_convs: Vec<Conv1d>,
    phone_blstm: BiLstm,
    word_convs: Vec<Conv1d>,
    word_blstm: Option<BiLstm>,
    word_dense: Vec<Linear>,
    parser_dense: Vec<Linear>,
    attention: Attention,
    prenet: Vec<Linear>,
    attention_rnn: Lstm,
    decoder_rnn: Lstm,
    mel_proj: Linear,
    stop_proj: Linear,
    postnet: Vec<Conv1d>,
}

/// Graph handles for a decoder state.
#[derive(Clone, Copy)]
struct DecoderState {
    h1: Var,
    c1: Var,
    h2: Var,
    c2: Var,
    context: Var,
    alignment: Var,
    cumulative: Var,
}

struct Memory {
    values: Var,
    processed: Var,
    mask: Array2<f64>,
    time: usize,
}

struct DecoderVars {
    mel_before: Var,
    mel_after: Var,
    stop: Var,
    alignments: Vec<Var>,
}

/// The acoustic model: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Tacotron {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

fn conv_stack(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    input: usize,
    channels: usize,
    layers: usize,
    kernel: usize,
) -> Vec<Conv1d> {
    (0..layers)
        .map(|i| {
            let fan_in = if i == 0 { input } else { channels };
            Conv1d::new(store, rng, &format!("{name}.{i}"), fan_in, channels, kernel, true, Init::He)
        })
        .collect()
}

fn dense_stack(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    input: usize,
    units: usize,
    layers: usize,
) -> Vec<Linear> {
    (0..layers)
        .map(|i| {
            let fan_in = if i == 0 { input } else { units };
            Linear::new(store, rng, &format!("{name}.{i}"), fan_in, units, true, Init::He)
        })
        .collect()
}

impl Tacotron {
    /// Builds a freshly initialized model. Phone embeddings are drawn from N(0, 1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add(
            "encoder.phone_embedding",
            params::standard_normal(&mut rng, config.n_phones, d.phone_emb),
        );
        let v = config.variant;
        let word_dense = if v == Variant::PhoneWordParser {
            dense_stack(&mut store, &mut rng, "encoder.word_dense", d.word_in, d.word_dense, config.side_dense_layers)
        } else {
            Vec::new()
        };
        let parser_dense = if v.uses_parser() {
            dense_stack(&mut store, &mut rng, "encoder.parser_dense", d.parser_in, d.parser_dense, config.side_dense_layers)
        } else {
            Vec::new()
        };
        let conv_in = d.phone_emb
            + if v == Variant::PhoneWordParser { d.word_dense } else { 0 }
            + if v.uses_parser() { d.parser_dense } else { 0 };
        let phone_convs = conv_stack(
            &mut store,
            &mut rng,
            "encoder.conv",
            conv_in,
            d.enc_conv,
            config.enc_conv_layers,
            config.enc_conv_kernel,
        );
        let phone_blstm = BiLstm::new(&mut store, &mut rng, "encoder.blstm", d.enc_conv, d.enc_blstm);
        let (word_convs, word_blstm) = if v == Variant::PhoneWord {
            let convs = conv_stack(
                &mut store,
                &mut rng,
                "encoder.word_conv",
                d.word_in,
                d.word_conv,
                config.enc_conv_layers,
                config.enc_conv_kernel,
            );
            let blstm = BiLstm::new(&mut store, &mut rng, "encoder.word_blstm", d.word_conv, d.word_blstm);
            (convs, Some(blstm))
        } else {
            (Vec::new(), None)
        };

        let enc = d.encoder_out;
        let attention = Attention {
            query: Linear::new(&mut store, &mut rng, "attention.query", d.decoder, d.attention, false, Init::Xavier),
            memory: Linear::new(&mut store, &mut rng, "attention.memory", enc, d.attention, false, Init::Xavier),
            location_conv: Conv1d::new(
                &mut store,
                &mut rng,
                "attention.location_conv",
                2,
                d.location_filters,
                config.attention_location_kernel,
                false,
                Init::Xavier,
            ),
            location_dense: Linear::new(
                &mut store,
                &mut rng,
                "attention.location_dense",
                d.location_filters,
                d.attention,
                false,
                Init::Xavier,
            ),
            bias: store.add("attention.bias", Array2::zeros((1, d.attention))),
            score: store.add("attention.score", params::xavier(&mut rng, d.attention, 1)),
        };
        let prenet = (0..config.prenet_layers)
            .map(|i| {
                let fan_in = if i == 0 { config.mel_dim } else { d.prenet };
                Linear::new(&mut store, &mut rng, &format!("decoder.prenet.{i}"), fan_in, d.prenet, true, Init::Xavier)
            })
            .collect();
        let attention_rnn = Lstm::new(&mut store, &mut rng, "decoder.attention_rnn", d.prenet + enc, d.decoder);
        let decoder_rnn = Lstm::new(&mut store, &mut rng, "decoder.decoder_rnn", d.decoder + enc, d.decoder);
        let mel_proj = Linear::new(&mut store, &mut rng, "decoder.mel_proj", d.decoder + enc, config.mel_dim, true, Init::Xavier);
        let stop_proj = Linear::new(&mut store, &mut rng, "decoder.stop_proj", d.decoder + enc, 1, true, Init::Xavier);
        let postnet = (0..config.postnet_layers)
            .map(|i| {
                let fan_in = if i == 0 { config.mel_dim } else { d.postnet };
                let fan_out = if i + 1 == config.postnet_layers { config.mel_dim } else { d.postnet };
                Conv1d::new(
                    &mut store,
                    &mut rng,
                    &format!("postnet.{i}"),
                    fan_in,
                    fan_out,
                    config.postnet_kernel,
                    true,
                    Init::Xavier,
                )
            })
            .collect();

        Ok(Tacotron {
            config,
            params: store,
            net: Net {
                embedding,
                phone_convs,
                phone_blstm,
                word_convs,
                word_blstm,
                word_dense,
                parser_dense,
                attention,
                prenet,
                attention_rnn,
                decoder_rnn,
                mel_proj,
                stop_proj,
                postnet,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.names() != self.params.names() {
            return Err(Error::ConfigError("parameter names do not match the model".into()));
        }
        for (dst, src) in self.params.values_mut().iter_mut().zip(other.values()) {
            if dst.dim() != src.dim() {
                return Err(Error::ConfigError("parameter shapes do not match the model".into()));
            }
            dst.assign(src);
        }
        Ok(())
    }

    /// Rows of the phone embedding table.
    pub fn embed_phones(&self, phone_ids: &[usize]) -> Result<Array2<f64>> {
        let table = self.params.value(self.net.embedding);
        if let Some(&bad) = phone_ids.iter().find(|&&id| id >= table.nrows()) {
            return Err(Error::IndexError {
                index: bad,
                size: table.nrows(),
            });
        }
        Ok(table.select(ndarray::Axis(0), phone_ids))
    }

    fn check_streams(&self, has_word: bool, has_parser: bool) -> Result<()> {
        let v = self.config.variant;
        if has_word != v.uses_word() || has_parser != v.uses_parser() {
            return Err(Error::ConfigError(format!(
                "{v} expects word stream: {}, parser stream: {}; got word: {has_word}, parser: {has_parser}",
                v.uses_word(),
                v.uses_parser()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_streams(batch.word_feats.is_some(), batch.parser_feats.is_some())?;
        let d = self.config.dims();
        if let Some(w) = &batch.word_feats {
            if w.ncols() != d.word_in {
                return Err(Error::ConfigError(format!(
                    "word stream has {} columns, model expects {}",
                    w.ncols(),
                    d.word_in
                )));
            }
        }
        if let Some(p) = &batch.parser_feats {
            if p.ncols() != d.parser_in {
                return Err(Error::ConfigError(format!(
                    "parser stream has {} columns, model expects {}",
                    p.ncols(),
                    d.parser_in
                )));
            }
        }
        if let Some(&bad) = batch.phone_ids.iter().find(|&&id| id >= self.config.n_phones) {
            return Err(Error::IndexError {
                index: bad,
                size: self.config.n_phones,
            });
        }
        Ok(())
    }

    fn dense_forward(g: &mut Graph, layers: &[Linear], x: Var, mask: &Rc<Array1<f64>>) -> Var {
        let mut y = x;
        for layer in layers {
            y = layer.forward(g, y);
            y = g.relu(y);
            y = g.row_mask(y, mask.clone());
        }
        y
    }

    fn conv_forward(g: &mut Graph, convs: &[Conv1d], x: Var, mask: &SeqMask) -> Var {
        let mut y = x;
        for conv in convs {
            y = conv.forward(g, y, mask.time);
            y = g.relu(y);
            y = g.row_mask(y, mask.rows.clone());
        }
        y
    }

    /// Inverted dropout; a no-op without an rng.
    fn drop(g: &mut Graph, y: Var, p: f64, dropout: &mut Option<&mut dyn RngCore>) -> Var {
        let Some(rng) = dropout.as_deref_mut() else { return y };
        if p <= 0.0 {
            return y;
        }
        let keep = 1.0 / (1.0 - p);
        let dim = g.value(y).dim();
        let m = Array2::from_shape_fn(dim, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        g.mul_const(y, m)
    }

    fn encode_graph(&self, g: &mut Graph, batch: &Batch, mask: &SeqMask) -> Var {
        let net = &self.net;
        let table = g.p(net.embedding);
        let emb = g.gather(table, batch.phone_ids.clone());
        let emb = g.row_mask(emb, mask.rows.clone());
        let word = batch.word_feats.as_ref().map(|w| g.constant(w.clone()));
        let parser = batch.parser_feats.as_ref().map(|p| g.constant(p.clone()));
        match self.config.variant {
            Variant::Phone => {
                let x = Self::conv_forward(g, &net.phone_convs, emb, mask);
                net.phone_blstm.run(g, x, mask.time, &mask.steps, &mask.rows)
            }
            Variant::PhoneWord => {
                let x = Self::conv_forward(g, &net.phone_convs, emb, mask);
                let phone = net.phone_blstm.run(g, x, mask.time, &mask.steps, &mask.rows);
                let w = Self::conv_forward(g, &net.word_convs, word.expect("checked"), mask);
                let blstm = net.word_blstm.as_ref().expect("word stream");
                let w = blstm.run(g, w, mask.time, &mask.steps, &mask.rows);
                g.concat(&[phone, w])
            }
            Variant::PhoneParser => {
                let p = Self::dense_forward(g, &net.parser_dense, parser.expect("checked"), &mask.rows);
                let x = g.concat(&[emb, p]);
                let x = Self::conv_forward(g, &net.phone_convs, x, mask);
                net.phone_blstm.run(g, x, mask.time, &mask.steps, &mask.rows)
            }
            Variant::PhoneWordParser => {
                let w = Self::dense_forward(g, &net.word_dense, word.expect("checked"), &mask.rows);
                let p = Self::dense_forward(g, &net.parser_dense, parser.expect("checked"), &mask.rows);
                let x = g.concat(&[emb, w, p]);
                let x = Self::conv_forward(g, &net.phone_convs, x, mask);
                net.phone_blstm.run(g, x, mask.time, &mask.steps, &mask.rows)
            }
        }
    }

    fn prenet(&self, g: &mut Graph, x: Var, dropout: &mut Option<&mut dyn RngCore>) -> Var {
        let p = self.config.prenet_dropout;
        let mut y = x;
        for layer in &self.net.prenet {
            y = layer.forward(g, y);
            y = g.relu(y);
            y = Self::drop(g, y, p, dropout);
        }
        y
    }

    fn memory(&self, g: &mut Graph, values: Var, mask: &SeqMask) -> Memory {
        let processed = self.net.attention.memory.forward(g, values);
        Memory {
            values,
            processed,
            mask: mask.matrix.clone(),
            time: mask.time,
        }
    }

    fn initial_state(&self, g: &mut Graph, batch: usize, time: usize) -> DecoderState {
        let d = self.config.dims();
        let h = g.constant(Array2::zeros((batch, d.decoder)));
        let ctx = g.constant(Array2::zeros((batch, d.encoder_out)));
        let align = g.constant(Array2::zeros((batch, time)));
        DecoderState {
            h1: h,
            c1: h,
            h2: h,
            c2: h,
            context: ctx,
            alignment: align,
            cumulative: align,
        }
    }

    /// One decoder step; returns the new state, the mel frame and stop logit.
    fn decoder_step(&self, g: &mut Graph, st: DecoderState, prenet_out: Var, mem: &Memory) -> (DecoderState, Var, Var) {
        let net = &self.net;
        let att = &net.attention;
        let batch = g.value(prenet_out).nrows();
        let time = mem.time;

        let x1 = g.concat(&[prenet_out, st.context]);
        let x1 = net.attention_rnn.project_input(g, x1);
        let (h1, c1) = net.attention_rnn.step(g, x1, st.h1, st.c1);

        let query = att.query.forward(g, h1);
        let query = g.repeat_rows(query, time);
        let prev = g.reshape(st.alignment, batch * time, 1);
        let cum = g.reshape(st.cumulative, batch * time, 1);
        let loc = g.concat(&[prev, cum]);
        let loc = att.location_conv.forward(g, loc, time);
        let loc = att.location_dense.forward(g, loc);
        let e = g.add(query, mem.processed);
        let e = g.add(e, loc);
        let bias = g.p(att.bias);
        let e = g.add_row(e, bias);
        let e = g.tanh(e);
        let score = g.p(att.score);
        let e = g.matmul(e, score);
        let e = g.reshape(e, batch, time);
        let alignment = g.masked_softmax(e, &mem.mask);
        let context = g.attend(alignment, mem.values);
        let cumulative = g.add(st.cumulative, alignment);

        let x2 = g.concat(&[h1, context]);
        let x2 = net.decoder_rnn.project_input(g, x2);
        let (h2, c2) = net.decoder_rnn.step(g, x2, st.h2, st.c2);

        let out = g.concat(&[h2, context]);
        let mel = net.mel_proj.forward(g, out);
        let stop = net.stop_proj.forward(g, out);
        let st = DecoderState {
            h1,
            c1,
            h2,
            c2,
            context,
            alignment,
            cumulative,
        };
        (st, mel, stop)
    }

    fn postnet(&self, g: &mut Graph, mel_before: Var, frames: usize, rows: &Rc<Array1<f64>>) -> Var {
        let n = self.net.postnet.len();
        let mut y = g.row_mask(mel_before, rows.clone());
        for (i, conv) in self.net.postnet.iter().enumerate() {
            y = conv.forward(g, y, frames);
            if i + 1 < n {
                y = g.tanh(y);
            }
            y = g.row_mask(y, rows.clone());
        }
        g.add(mel_before, y)
    }

    fn decode_graph(
        &self,
        g: &mut Graph,
        mem: &Memory,
        mel_target: &Array2<f64>,
        frame_mask: &SeqMask,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> DecoderVars {
        let frames = frame_mask.time;
        let batch = frame_mask.lengths.len();
        let mel_dim = self.config.mel_dim;
        // teacher forcing: step f sees target frame f-1 (zeros at f = 0)
        let mut shifted = Array2::zeros((batch * frames, mel_dim));
        for b in 0..batch {
            shifted
                .slice_mut(s![b * frames + 1..(b + 1) * frames, ..])
                .assign(&mel_target.slice(s![b * frames..(b + 1) * frames - 1, ..]));
        }
        let inputs = g.constant(shifted);
        let pre = self.prenet(g, inputs, &mut dropout);

        let mut st = self.initial_state(g, batch, mem.time);
        let mut mels = Vec::with_capacity(frames);
        let mut stops = Vec::with_capacity(frames);
        let mut alignments = Vec::with_capacity(frames);
        for f in 0..frames {
            let p = g.time_step(pre, frames, f);
            let (next, mel, stop) = self.decoder_step(g, st, p, mem);
            st = next;
            mels.push(mel);
            stops.push(stop);
            alignments.push(st.alignment);
        }
        let mel_before = g.stack_time(&mels);
        let stop = g.stack_time(&stops);
        let mel_after = self.postnet(g, mel_before, frames, &frame_mask.rows);
        DecoderVars {
            mel_before,
            mel_after,
            stop,
            alignments,
        }
    }

    fn loss_graph(g: &mut Graph, out: &DecoderVars, batch: &Batch, frame_mask: &SeqMask) -> (Var, Var, Var, Var) {
        let mel_dim = batch.mel.ncols();
        let valid = frame_mask.valid() as f64;
        let target = Rc::new(batch.mel.clone());
        let before = g.masked_mse(out.mel_before, target.clone(), frame_mask.rows.clone(), valid * mel_dim as f64);
        let after = g.masked_mse(out.mel_after, target, frame_mask.rows.clone(), valid * mel_dim as f64);
        let weights: Array1<f64> = frame_mask
            .rows
            .iter()
            .zip(batch.stop_target.iter())
            .map(|(&m, &y)| m * if y > 0.5 { STOP_POS_WEIGHT } else { 1.0 })
            .collect();
        let stop = g.weighted_bce(out.stop, Rc::new(batch.stop_target.clone()), Rc::new(weights), valid);
        let total = g.sum(&[before, after, stop]);
        (before, after, stop, total)
    }

    /// Teacher-forced forward pass and loss over a padded batch, with gradients
    /// for every parameter. Prenet dropout uses `dropout` when given.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(LossParts, Vec<Array2<f64>>)> {
        self.check_batch(batch)?;
        let enc_mask = SeqMask::new(&batch.phone_lengths, batch.time);
        let frame_mask = SeqMask::new(&batch.frame_lengths, batch.frames);
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, batch, &enc_mask);
        let mem = self.memory(&mut g, enc, &enc_mask);
        let out = self.decode_graph(&mut g, &mem, &batch.mel, &frame_mask, dropout);
        let (before, after, stop, total) = Self::loss_graph(&mut g, &out, batch, &frame_mask);
        let parts = LossParts {
            mel_before: g.scalar(before),
            mel_after: g.scalar(after),
            stop: g.scalar(stop),
            total: g.scalar(total),
        };
        if !parts.total.is_finite() {
            return Err(Error::NumericalError(format!("non-finite loss {}", parts.total)));
        }
        let grads = g.backward(total);
        Ok((parts, grads))
    }

    /// Loss only (no backward pass).
    pub fn batch_loss(&self, batch: &Batch, dropout: Option<&mut dyn RngCore>) -> Result<LossParts> {
        self.check_batch(batch)?;
        let enc_mask = SeqMask::new(&batch.phone_lengths, batch.time);
        let frame_mask = SeqMask::new(&batch.frame_lengths, batch.frames);
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, batch, &enc_mask);
        let mem = self.memory(&mut g, enc, &enc_mask);
        let out = self.decode_graph(&mut g, &mem, &batch.mel, &frame_mask, dropout);
        let (before, after, stop, total) = Self::loss_graph(&mut g, &out, batch, &frame_mask);
        Ok(LossParts {
            mel_before: g.scalar(before),
            mel_after: g.scalar(after),
            stop: g.scalar(stop),
            total: g.scalar(total),
        })
    }

    /// Teacher-forced outputs for every item of a padded batch, each trimmed to
    /// its true frame and phone lengths. Dropout is disabled.
    pub fn teacher_forced_batch(&self, batch: &Batch) -> Result<Vec<TeacherForced>> {
        self.check_batch(batch)?;
        let enc_mask = SeqMask::new(&batch.phone_lengths, batch.time);
        let frame_mask = SeqMask::new(&batch.frame_lengths, batch.frames);
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, batch, &enc_mask);
        let mem = self.memory(&mut g, enc, &enc_mask);
        let out = self.decode_graph(&mut g, &mem, &batch.mel, &frame_mask, None);
        Ok(Self::split_outputs(&g, &out, batch))
    }

    fn split_outputs(g: &Graph, out: &DecoderVars, batch: &Batch) -> Vec<TeacherForced> {
        let frames = batch.frames;
        (0..batch.size())
            .map(|b| {
                let (nf, nt) = (batch.frame_lengths[b], batch.phone_lengths[b]);
                let rows = s![b * frames..b * frames + nf, ..];
                let mut weights = Array2::zeros((nf, nt));
                for (f, a) in out.alignments.iter().take(nf).enumerate() {
                    weights.row_mut(f).assign(&g.value(*a).slice(s![b, ..nt]));
                }
                TeacherForced {
                    mel_before: g.value(out.mel_before).slice(rows).to_owned(),
                    mel_after: g.value(out.mel_after).slice(rows).to_owned(),
                    stop_logits: g.value(out.stop).slice(s![b * frames..b * frames + nf, 0]).to_owned(),
                    attention: AttentionRecord { weights },
                }
            })
            .collect()
    }

    /// Encodes a batch of one utterance; output `[T × D_enc]`.
    pub fn encode(&self, input: &EncoderInput) -> Result<Array2<f64>> {
        self.check_streams(input.word_feats.is_some(), input.parser_feats.is_some())?;
        let batch = Batch::from_inputs(&[input], 0)?;
        self.check_batch(&batch)?;
        let mask = SeqMask::new(&batch.phone_lengths, batch.time);
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, &batch, &mask);
        Ok(g.value(enc).clone())
    }

    fn check_encoding(&self, enc: &Array2<f64>) -> Result<()> {
        let d = self.config.dims();
        if enc.ncols() != d.encoder_out || enc.nrows() == 0 {
            return Err(Error::ShapeError(format!(
                "encoder output {:?}, expected [T × {}] with T ≥ 1",
                enc.dim(),
                d.encoder_out
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoding of one utterance from a fixed encoding, without
    /// dropout.
    pub fn decode_teacher_forced(&self, enc: &Array2<f64>, mel_target: &Array2<f64>) -> Result<TeacherForced> {
        self.check_encoding(enc)?;
        if mel_target.nrows() == 0 || mel_target.ncols() != self.config.mel_dim {
            return Err(Error::ShapeError(format!(
                "mel target {:?}, expected [F × {}] with F ≥ 1",
                mel_target.dim(),
                self.config.mel_dim
            )));
        }
        let (time, frames) = (enc.nrows(), mel_target.nrows());
        let enc_mask = SeqMask::new(&[time], time);
        let frame_mask = SeqMask::new(&[frames], frames);
        let mut g = Graph::new(&self.params);
        let values = g.constant(enc.clone());
        let mem = self.memory(&mut g, values, &enc_mask);
        let out = self.decode_graph(&mut g, &mem, mel_target, &frame_mask, None);
        let check = |v: &Array2<f64>| v.iter().all(|x| x.is_finite());
        if !check(g.value(out.mel_after)) || !check(g.value(out.stop)) {
            return Err(Error::NumericalError("non-finite decoder activations".into()));
        }
        let pseudo = Batch {
            utt_ids: Vec::new(),
            phone_ids: Vec::new(),
            word_feats: None,
            parser_feats: None,
            phone_lengths: vec![time],
            time,
            mel: mel_target.clone(),
            stop_target: Array2::zeros((frames, 1)),
            frame_lengths: vec![frames],
            frames,
        };
        Ok(Self::split_outputs(&g, &out, &pseudo).remove(0))
    }

    /// Free-running decoding that feeds back each predicted frame. Stops once
    /// `sigmoid(stop) > 0.5` or after `max_frames` frames. Prenet dropout is
    /// applied when `dropout` is given.
    pub fn infer(
        &self,
        enc: &Array2<f64>,
        max_frames: usize,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Inference> {
        self.check_encoding(enc)?;
        let time = enc.nrows();
        let max_frames = max_frames.max(1);
        let enc_mask = SeqMask::new(&[time], time);
        let mut g = Graph::new(&self.params);
        let values = g.constant(enc.clone());
        let mem = self.memory(&mut g, values, &enc_mask);
        let mut st = self.initial_state(&mut g, 1, time);
        let mut prev = Array2::zeros((1, self.config.mel_dim));
        let mut mels = Vec::new();
        let mut weights = Vec::new();
        let mut stopped = false;
        for _ in 0..max_frames {
            let x = g.constant(prev);
            let p = self.prenet(&mut g, x, &mut dropout);
            let (next, mel, stop) = self.decoder_step(&mut g, st, p, &mem);
            st = next;
            mels.push(mel);
            weights.push(g.value(st.alignment).row(0).to_owned());
            prev = g.value(mel).clone();
            if prev.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalError("non-finite mel frame during inference".into()));
            }
            let logit = g.value(stop)[[0, 0]];
            if logit > 0.0 {
                stopped = true;
                break;
            }
        }
        let frames = mels.len();
        let mel_before = g.stack_time(&mels);
        let rows = Rc::new(Array1::ones(frames));
        let mel_after = self.postnet(&mut g, mel_before, frames, &rows);
        let mut attn = Array2::zeros((frames, time));
        for (f, w) in weights.iter().enumerate() {
            attn.row_mut(f).assign(w);
        }
        Ok(Inference {
            mel_before: g.value(mel_before).clone(),
            mel_after: g.value(mel_after).clone(),
            attention: AttentionRecord { weights: attn },
            stopped,
        })
    }

    /// Stop-projection bias, exposed for tests that force stop decisions.
    pub fn stop_bias_mut(&mut self) -> &mut Array2<f64> {
        let id = self.net.stop_proj.bias.expect("stop projection has a bias");
        self.params.value_mut(id)
    }
}

/// Tacotron-style objective on unbatched arrays: MSE of both mel outputs plus
/// stop-token binary cross-entropy with the positive class weighted ×6.
pub fn loss(
    mel_before: &Array2<f64>,
    mel_after: &Array2<f64>,
    stop_logits: &Array1<f64>,
    mel_target: &Array2<f64>,
    stop_target: &Array1<f64>,
) -> Result<f64> {
    let frames = mel_target.nrows();
    if mel_before.dim() != mel_target.dim()
        || mel_after.dim() != mel_target.dim()
        || stop_logits.len() != frames
        || stop_target.len() != frames
    {
        return Err(Error::ShapeError(format!(
            "loss inputs disagree: before {:?}, after {:?}, stop {}, target {:?}, stop target {}",
            mel_before.dim(),
            mel_after.dim(),
            stop_logits.len(),
            mel_target.dim(),
            stop_target.len()
        )));
    }
    masked_loss(mel_before, mel_after, stop_logits, mel_target, stop_target, frames)
}

/// As [`loss`], counting only the first `length` frames.
pub fn masked_loss(
    mel_before: &Array2<f64>,
    mel_after: &Array2<f64>,
    stop_logits: &Array1<f64>,
    mel_target: &Array2<f64>,
    stop_target: &Array1<f64>,
    length: usize,
) -> Result<f64> {
    let frames = mel_target.nrows();
    if length == 0 || length > frames {
        return Err(Error::ShapeError(format!("length {length} outside 1..={frames}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mask = Rc::new(Array1::from_shape_fn(frames, |f| if f < length { 1.0 } else { 0.0 }));
    let denom = (length * mel_target.ncols()) as f64;
    let target = Rc::new(mel_target.clone());
    let b = g.constant(mel_before.clone());
    let a = g.constant(mel_after.clone());
    let z = g.constant(stop_logits.clone().insert_axis(ndarray::Axis(1)));
    let lb = g.masked_mse(b, target.clone(), mask.clone(), denom);
    let la = g.masked_mse(a, target, mask.clone(), denom);
    let weights: Array1<f64> = mask
        .iter()
        .zip(stop_target)
        .map(|(&m, &y)| m * if y > 0.5 { STOP_POS_WEIGHT } else { 1.0 })
        .collect();
    let y = Rc::new(stop_target.clone().insert_axis(ndarray::Axis(1)));
    let ls = g.weighted_bce(z, y, Rc::new(weights), length as f64);
    let total = g.sum(&[lb, la, ls]);
    Ok(g.scalar(total))
}
