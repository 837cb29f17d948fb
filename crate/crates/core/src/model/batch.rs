use std::rc::Rc;

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};

/// Encoder streams for one utterance, all of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub phone_ids: Vec<usize>,
    /// `[T × (word_dim + 1)]`, upsampled embeddings plus is-word flag.
    pub word_feats: Option<Array2<f64>>,
    /// `[T × 12]`, upsampled parse features plus is-word flag.
    pub parser_feats: Option<Array2<f64>>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.phone_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_ids.is_empty()
    }
}

/// A featurized training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub input: EncoderInput,
    /// `[F × mel_dim]` log-mel target.
    pub mel: Array2<f64>,
}

/// Padded mini-batch. Sequences are batch-major: row `b * time + t`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    pub phone_ids: Vec<usize>,
    pub word_feats: Option<Array2<f64>>,
    pub parser_feats: Option<Array2<f64>>,
    pub phone_lengths: Vec<usize>,
    pub time: usize,
    pub mel: Array2<f64>,
    pub stop_target: Array2<f64>,
    pub frame_lengths: Vec<usize>,
    pub frames: usize,
}

fn pad_stream(
    streams: &[Option<&Array2<f64>>],
    time: usize,
    name: &str,
) -> Result<Option<Array2<f64>>> {
    let present = streams.iter().filter(|s| s.is_some()).count();
    if present == 0 {
        return Ok(None);
    }
    if present != streams.len() {
        return Err(Error::ConfigError(format!(
            "{name} stream present for some utterances only"
        )));
    }
    let cols = streams[0].map_or(0, |s| s.ncols());
    let mut out = Array2::zeros((streams.len() * time, cols));
    for (b, s) in streams.iter().enumerate() {
        let s = s.expect("checked present");
        if s.ncols() != cols {
            return Err(Error::ShapeError(format!("{name} widths differ within a batch")));
        }
        out.slice_mut(s![b * time..b * time + s.nrows(), ..]).assign(s);
    }
    Ok(Some(out))
}

impl Batch {
    /// Pads ids with `pad_id` and float streams with zeros.
    pub fn from_examples(examples: &[&Example], pad_id: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::ConfigError("empty batch".into()));
        }
        let inputs: Vec<&EncoderInput> = examples.iter().map(|e| &e.input).collect();
        let mels: Vec<&Array2<f64>> = examples.iter().map(|e| &e.mel).collect();
        let mut batch = Batch::from_inputs(&inputs, pad_id)?;
        let frames = mels.iter().map(|m| m.nrows()).max().unwrap_or(0);
        if frames == 0 {
            return Err(Error::ShapeError("mel target needs at least one frame".into()));
        }
        let mel_dim = mels[0].ncols();
        let mut mel = Array2::zeros((examples.len() * frames, mel_dim));
        let mut stop_target = Array2::zeros((examples.len() * frames, 1));
        for (b, m) in mels.iter().enumerate() {
            if m.ncols() != mel_dim {
                return Err(Error::ShapeError("mel widths differ within a batch".into()));
            }
            mel.slice_mut(s![b * frames..b * frames + m.nrows(), ..]).assign(m);
            if m.nrows() > 0 {
                stop_target[[b * frames + m.nrows() - 1, 0]] = 1.0;
            }
        }
        batch.utt_ids = examples.iter().map(|e| e.utt_id.clone()).collect();
        batch.mel = mel;
        batch.stop_target = stop_target;
        batch.frame_lengths = mels.iter().map(|m| m.nrows()).collect();
        batch.frames = frames;
        Ok(batch)
    }

    /// Encoder-only batch (no targets).
    pub fn from_inputs(inputs: &[&EncoderInput], pad_id: usize) -> Result<Self> {
        let time = inputs.iter().map(|i| i.len()).max().unwrap_or(0);
        if time == 0 {
            return Err(Error::ShapeError("phone sequence is empty".into()));
        }
        let mut phone_ids = vec![pad_id; inputs.len() * time];
        for (b, inp) in inputs.iter().enumerate() {
            for stream in [&inp.word_feats, &inp.parser_feats].into_iter().flatten() {
                if stream.nrows() != inp.len() {
                    return Err(Error::ShapeError(format!(
                        "stream has {} rows for {} phones",
                        stream.nrows(),
                        inp.len()
                    )));
                }
            }
            phone_ids[b * time..b * time + inp.len()].copy_from_slice(&inp.phone_ids);
        }
        let words: Vec<_> = inputs.iter().map(|i| i.word_feats.as_ref()).collect();
        let parses: Vec<_> = inputs.iter().map(|i| i.parser_feats.as_ref()).collect();
        Ok(Batch {
            utt_ids: Vec::new(),
            phone_ids,
            word_feats: pad_stream(&words, time, "word")?,
            parser_feats: pad_stream(&parses, time, "parser")?,
            phone_lengths: inputs.iter().map(|i| i.len()).collect(),
            time,
            mel: Array2::zeros((0, 0)),
            stop_target: Array2::zeros((0, 1)),
            frame_lengths: Vec::new(),
            frames: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.phone_lengths.len()
    }

    /// Fraction of phone and frame cells that are padding.
    pub fn padding_fraction(&self) -> f64 {
        let cells = (self.size() * self.time) as f64;
        let real: usize = self.phone_lengths.iter().sum();
        1.0 - real as f64 / cells
    }
}

/// Validity masks for padded batch-major sequences.
#[derive(Debug, Clone)]
pub struct SeqMask {
    pub time: usize,
    pub lengths: Vec<usize>,
    /// `[B × time]`, 1 on real steps.
    pub matrix: Array2<f64>,
    /// Length `B*time`, batch-major.
    pub rows: Rc<Array1<f64>>,
    /// `steps[t][b]` is 1 when item `b` has step `t`.
    pub steps: Vec<Rc<Array1<f64>>>,
}

impl SeqMask {
    pub fn new(lengths: &[usize], time: usize) -> Self {
        let batch = lengths.len();
        let matrix = Array2::from_shape_fn((batch, time), |(b, t)| {
            if t < lengths[b] {
                1.0
            } else {
                0.0
            }
        });
        let rows = Rc::new(Array1::from_iter(matrix.iter().copied()));
        let steps = (0..time)
            .map(|t| Rc::new(matrix.column(t).to_owned()))
            .collect();
        SeqMask {
            time,
            lengths: lengths.to_vec(),
            matrix,
            rows,
            steps,
        }
    }

    pub fn valid(&self) -> usize {
        self.lengths.iter().sum()
    }
}
