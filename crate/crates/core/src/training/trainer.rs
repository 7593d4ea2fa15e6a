use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{pgm_loss, seg_loss, total_loss};
use super::metrics::{image_counts, BinaryMask, MetricCounts, MetricReport, DEFAULT_THRESHOLD};
use super::optim::{Optimizer, OptimizerConfig};
use crate::autodiff::Tape;
use crate::data::{batch, Sample};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::network::{forward_var, Model, Prediction};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Dice weight.
    pub alpha: f64,
    /// Weight of the response loss.
    pub beta: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.1,
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::config("loss weights alpha and beta must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training-mode predictions of the epoch, thresholded at 0.5.
    pub report: MetricReport,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: Optimizer,
    /// Loss of every batch so far.
    pub losses: Vec<f32>,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: LossConfig,
    pub state: TrainState,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<f32>,
    pub history: Vec<EpochRecord>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn masks_of(t: &Tensor<f32>, threshold: f32) -> Result<Vec<BinaryMask>> {
    let (n, _, h, w) = t.dims4()?;
    (0..n)
        .map(|i| BinaryMask::new(h, w, t.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| v > threshold).collect()))
        .collect()
}

impl Trainer {
    pub fn new(model: Model<f32>, config: LossConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            state: TrainState {
                epoch: 0,
                optimizer: Optimizer::new(config.optimizer)?,
                losses: Vec::new(),
                history: Vec::new(),
            },
        })
    }

    pub fn resume(model: Model<f32>, config: LossConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { model, config, state })
    }

    /// One optimizer step; returns the loss and the confusion counts of the
    /// training-mode predictions.
    pub fn step(&mut self, samples: &[&Sample], epoch: usize, batch_index: usize, total_steps: u64) -> Result<(f32, MetricCounts)> {
        let (images, masks) = batch(samples)?;
        let mut tape = Tape::new();
        let (loss_var, logits, updates) = {
            let mut ctx = Ctx::new(&mut tape, &self.model.params, &self.model.buffers, Mode::Train);
            let out = forward_var(&mut ctx, &self.model.config, &images, None)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let seg = seg_loss(&mut tape, out.logits, &masks, self.config.alpha)?;
            let pgm = match out.response {
                Some(r) => Some(pgm_loss(&mut tape, r, &masks)?),
                None => None,
            };
            (total_loss(&mut tape, seg, pgm, self.config.beta)?, out.logits, updates)
        };
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
        }
        let grads = tape.backward(loss_var).params(&tape);
        self.state
            .optimizer
            .step(&mut self.model.params, &grads, total_steps)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: batch_index },
                other => other,
            })?;
        self.model.buffers.apply(&updates)?;
        let preds = masks_of(tape.value(logits), 0.0)?;
        let gts = masks_of(&masks, 0.5)?;
        let mut counts = MetricCounts::default();
        for (p, g) in preds.iter().zip(&gts) {
            counts.merge(&image_counts(p, g)?);
        }
        Ok((loss, counts))
    }

    /// Trains one epoch over a seeded permutation of `data`.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.state.epoch;
        let bs = self.config.batch_size;
        let total = (self.config.epochs.max(epoch + 1) * self.config.steps_per_epoch(data.len())) as u64;
        let order = epoch_order(self.config.seed, epoch, data.len());
        let mut counts = MetricCounts::default();
        let mut sum = 0.0f64;
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, c) = self.step(&samples, epoch, b, total)?;
            self.state.losses.push(loss);
            sum += loss as f64;
            batches += 1;
            counts.merge(&c);
        }
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch,
            mean_loss: sum / batches as f64,
            report: counts.report(),
        };
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(&mut self, data: &[Sample], mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>) -> Result<()> {
        while self.state.epoch < self.config.epochs {
            let r = self.run_epoch(data)?;
            on_epoch(self, &r)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            losses: self.state.losses,
            history: self.state.history,
        }
    }
}

/// Trains `model` on `data` for `config.epochs` epochs.
pub fn train(model: Model<f32>, data: &[Sample], config: &LossConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, *config)?;
    t.fit(data, |_, _| Ok(()))?;
    Ok(t.finish())
}

/// Eval-mode forward pass of a stack of samples.
pub fn predict(model: &Model<f32>, samples: &[&Sample]) -> Result<Prediction<f32>> {
    let (images, _) = batch(samples)?;
    model.forward(&images, Mode::Eval)
}

/// Per-sample `1×H×W` foreground probabilities, computed in batches.
pub fn predict_probabilities(model: &Model<f32>, data: &[Sample], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let probs = sigmoid(&predict(model, &refs)?.logits);
        for i in 0..chunk.len() {
            out.push(probs.select(i));
        }
    }
    Ok(out)
}

/// Metrics of eval-mode predictions at `threshold`. The model is not
/// modified.
pub fn evaluate(model: &Model<f32>, data: &[Sample], threshold: f32) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut counts = MetricCounts::default();
    for (p, s) in predict_probabilities(model, data, 8)?.iter().zip(data) {
        let pred = BinaryMask::threshold(p, threshold)?;
        let gt = BinaryMask::threshold(&s.mask, DEFAULT_THRESHOLD)?;
        counts.merge(&image_counts(&pred, &gt)?);
    }
    Ok(counts.report())
}
