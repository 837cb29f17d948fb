//! Mini-batch training: length-bucketed batching, Adam with an exponentially
//! decaying learning rate, global-norm clipping and atomic checkpoints.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerState};
use crate::model::{Batch, Example, LossParts, Tacotron};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub decay_steps: u64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub max_steps: u64,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: u64,
    /// Batches prepared ahead of the training step.
    pub prefetch: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            decay_steps: 50_000,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-6,
            seed: 0,
            max_steps: 1000,
            checkpoint_every: 500,
            prefetch: 4,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::ConfigError(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return err("learning rates must be positive".into());
        }
        if self.decay_steps == 0 {
            return err("decay_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return err("adam_epsilon must be positive".into());
        }
        if self.prefetch == 0 {
            return err("prefetch must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate for the update that follows `step` completed steps.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let frac = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }
}

/// Global 2-norm over all tensors.
pub fn global_norm(tensors: &[Array2<f64>]) -> f64 {
    tensors
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Array2<f64>], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let k = clip / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
    norm
}

/// Plain gradient descent.
pub fn sgd_step(params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.scaled_add(-lr, g);
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            });
    }
}

/// Groups item indices into batches. With `bucketed`, items are sorted by
/// length (ties broken by a shuffle) and neighbours batched together; batch
/// order is then shuffled. Otherwise items are shuffled and chunked.
pub fn batch_plan(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng, bucketed: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    if bucketed {
        order.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if bucketed {
        batches.shuffle(rng);
    }
    batches
}

/// Mean fraction of padded phone cells over a batch plan.
pub fn plan_padding(lengths: &[usize], plan: &[Vec<usize>]) -> f64 {
    let (mut pad, mut cells) = (0usize, 0usize);
    for b in plan {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        cells += max * b.len();
        pad += b.iter().map(|&i| max - lengths[i]).sum::<usize>();
    }
    if cells == 0 {
        0.0
    } else {
        pad as f64 / cells as f64
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch);
    rng
}

/// Dropout generator for one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step + 1);
    rng
}

/// Training examples that fit the decoder, with the overlong ones dropped.
pub fn usable_examples(examples: &[Example], max_frames: usize) -> Vec<&Example> {
    examples
        .iter()
        .filter(|e| {
            let ok = e.mel.nrows() <= max_frames;
            if !ok {
                log::warn!(
                    "skipping {}: {} frames exceed max_decoder_frames {max_frames}",
                    e.utt_id,
                    e.mel.nrows()
                );
            }
            ok
        })
        .collect()
}

/// The batches of one epoch, as indices into `examples`.
pub fn make_batches(examples: &[&Example], cfg: &TrainConfig, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if examples.is_empty() {
        return Err(Error::ConfigError("no training examples".into()));
    }
    let lengths: Vec<usize> = examples.iter().map(|e| e.input.len()).collect();
    let mut rng = epoch_rng(cfg.seed, epoch);
    Ok(batch_plan(&lengths, cfg.batch_size, &mut rng, true))
}

/// One completed training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Steps completed after this update.
    pub step: u64,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

pub struct Trainer {
    pub model: Tacotron,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub step: u64,
    pub phones: Vec<String>,
    pad_id: usize,
}

impl Trainer {
    pub fn new(model: Tacotron, config: TrainConfig, phones: Vec<String>, pad_id: usize) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::zeros(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
            phones,
            pad_id,
        })
    }

    /// Continues from a checkpoint, including its optimizer state.
    pub fn resume(ck: Checkpoint, config: TrainConfig, pad_id: usize) -> Result<Self> {
        config.validate()?;
        let optimizer = ck
            .optimizer
            .unwrap_or_else(|| OptimizerState::zeros(&ck.model.params));
        Ok(Trainer {
            model: ck.model,
            optimizer,
            config,
            step: ck.step,
            phones: ck.phones,
            pad_id,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone(), self.phones.clone());
        ck.step = self.step;
        ck.optimizer = Some(self.optimizer.clone());
        ck.meta.insert("seed".into(), self.config.seed.to_string());
        ck
    }

    /// Writes `ckpt-<step>.ckpt` and refreshes `latest.ckpt`, both atomically.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let ck = self.checkpoint();
        let path = dir.join(format!("ckpt-{:07}.ckpt", self.step));
        ck.save(&path)?;
        ck.save(&dir.join("latest.ckpt"))?;
        Ok(path)
    }

    /// One update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let mut rng = step_rng(self.config.seed, self.step);
        let (loss, mut grads) = self.model.loss_and_grads(batch, Some(&mut rng))?;
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NumericalError(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        let lr = self.config.learning_rate_at(self.step);
        adam_step(
            self.model.params.values_mut(),
            &grads,
            &mut self.optimizer,
            lr,
            &self.config,
        );
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            grad_norm,
            learning_rate: lr,
        })
    }

    /// Trains until `max_steps` or until `on_step` breaks. The batch for step
    /// `s` depends only on the seed and `s`, so a resumed run continues the
    /// same sequence. On a non-finite loss the run aborts and the checkpoints
    /// already on disk are left untouched.
    pub fn train(
        &mut self,
        examples: &[Example],
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord, &Tacotron) -> ControlFlow<()>,
    ) -> Result<Vec<StepRecord>> {
        let usable = usable_examples(examples, self.model.config.max_decoder_frames);
        if usable.is_empty() {
            return Err(Error::ConfigError("no training examples fit max_decoder_frames".into()));
        }
        let per_epoch = make_batches(&usable, &self.config, 0)?.len() as u64;
        let (start, end) = (self.step, self.config.max_steps);
        let mut history = Vec::new();
        if start >= end {
            return Ok(history);
        }
        let cfg = self.config.clone();
        let pad_id = self.pad_id;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(cfg.prefetch);
            let usable = &usable;
            scope.spawn(move || {
                let mut epoch = u64::MAX;
                let mut plan = Vec::new();
                for step in start..end {
                    if step / per_epoch != epoch {
                        epoch = step / per_epoch;
                        plan = match make_batches(usable, &cfg, epoch) {
                            Ok(p) => p,
                            Err(e) => {
                                let _ = tx.send(Err(e));
                                return;
                            }
                        };
                    }
                    let items: Vec<&Example> = plan[(step % per_epoch) as usize]
                        .iter()
                        .map(|&i| usable[i])
                        .collect();
                    if tx.send(Batch::from_examples(&items, pad_id)).is_err() {
                        return;
                    }
                }
            });
            for batch in rx {
                let record = self.train_step(&batch?)?;
                if self.config.log_every > 0 && record.step % self.config.log_every == 0 {
                    log::info!(
                        "step {} loss {:.4} (mel {:.4}/{:.4}, stop {:.4}) |g| {:.3} lr {:.2e}",
                        record.step,
                        record.loss.total,
                        record.loss.mel_before,
                        record.loss.mel_after,
                        record.loss.stop,
                        record.grad_norm,
                        record.learning_rate
                    );
                }
                history.push(record);
                if let Some(dir) = checkpoint_dir {
                    let every = self.config.checkpoint_every;
                    if every > 0 && record.step % every == 0 {
                        self.save_checkpoint(dir)?;
                    }
                }
                if on_step(&record, &self.model).is_break() {
                    break;
                }
            }
            Ok(())
        })?;
        if let Some(dir) = checkpoint_dir {
            let every = self.config.checkpoint_every;
            if every == 0 || self.step % every != 0 {
                self.save_checkpoint(dir)?;
            }
        }
        Ok(history)
    }
}
