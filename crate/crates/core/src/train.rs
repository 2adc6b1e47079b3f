//! Supervised training loop and validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::augment::{chromatic_augment, occlusion_augment};
use crate::data::StereoPair;
use crate::error::{Error, Result};
use crate::head::{compute_metrics, disparity_loss, DisparityMap, MetricReport};
use crate::model::Model;
use crate::nn::{Mode, Session};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// 1-based epochs from which the learning rate is halved once more.
    pub lr_halve_epochs: Vec<usize>,
    pub clip_norm: f32,
    pub seed: u64,
    /// The last `val_count` samples of a dataset are held out.
    pub val_count: usize,
    pub chromatic_strength: f32,
    /// Fraction of samples jittered with independent left/right factors.
    pub asymmetric_prob: f32,
    pub occlusion_prob: f32,
    pub occlusion_side: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 2,
            lr: 1e-3,
            lr_halve_epochs: vec![15, 20, 25],
            clip_norm: 0.1,
            seed: 0,
            val_count: 40,
            chromatic_strength: 0.3,
            asymmetric_prob: 0.2,
            occlusion_prob: 0.5,
            occlusion_side: (8, 16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        for p in [self.asymmetric_prob, self.occlusion_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.chromatic_strength) {
            return bad("chromatic_strength must lie in [0, 1)");
        }
        if self.occlusion_side.0 == 0 || self.occlusion_side.0 > self.occlusion_side.1 {
            return bad("occlusion side range is empty");
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let halvings = self.lr_halve_epochs.iter().filter(|&&h| h <= epoch).count();
        self.lr * 0.5f32.powi(halvings as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Validation EPE (NaN without validation data).
    pub epe: f64,
    pub seconds: f64,
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch images {:?} vs {shape:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// One optimization step on a batch; returns the loss.
pub fn train_step(model: &Model, store: &mut ParamStore, adam: &mut AdamState, batch: &[StereoPair], clip: f32) -> Result<f32> {
    let left = stack(&batch.iter().map(|p| &p.left).collect::<Vec<_>>())?;
    let right = stack(&batch.iter().map(|p| &p.right).collect::<Vec<_>>())?;
    let (loss, grads, updates) = {
        let mut s = Session::new(store, Mode::Train);
        let l = s.input(left);
        let r = s.input(right);
        let out = model.forward(&mut s, l, r)?;
        let gts: Vec<&DisparityMap> = batch.iter().map(|p| &p.gt).collect();
        let loss = disparity_loss(&mut s.graph, out.disparity, &gts)?;
        let value = s.graph.value(loss).item();
        let grads = s.backward(loss)?;
        (value, grads, s.into_bn_updates())
    };
    store.zero_grads();
    store.set_grads(grads);
    adam_step(store, adam, Some(clip))?;
    store.apply_bn_updates(&updates);
    Ok(loss)
}

/// Pixel-weighted metrics of the model on `pairs`, evaluated in batches.
pub fn evaluate(model: &Model, store: &ParamStore, pairs: &[StereoPair], batch_size: usize, thresholds: &[f32]) -> Result<MetricReport> {
    let mut abs_sum = 0.0f64;
    let mut pixels = 0usize;
    let mut bad_counts = vec![0.0f64; thresholds.len()];
    for chunk in pairs.chunks(batch_size.max(1)) {
        let left = stack(&chunk.iter().map(|p| &p.left).collect::<Vec<_>>())?;
        let right = stack(&chunk.iter().map(|p| &p.right).collect::<Vec<_>>())?;
        let preds = model.predict(store, &left, &right)?;
        for (pred, pair) in preds.iter().zip(chunk) {
            let r = compute_metrics(pred, &pair.gt, thresholds)?;
            abs_sum += r.epe * r.pixels as f64;
            for (acc, (_, f)) in bad_counts.iter_mut().zip(&r.bad) {
                *acc += f * r.pixels as f64;
            }
            pixels += r.pixels;
        }
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument("no validation pixels".into()));
    }
    let n = pixels as f64;
    Ok(MetricReport {
        epe: abs_sum / n,
        bad: thresholds.iter().zip(bad_counts).map(|(&t, c)| (t, c / n)).collect(),
        pixels,
    })
}

/// Applies the configured augmentations to one training sample.
pub fn augment<R: Rng + ?Sized>(pair: &mut StereoPair, cfg: &TrainConfig, rng: &mut R) {
    let symmetric = !rng.gen_bool(cfg.asymmetric_prob as f64);
    chromatic_augment(pair, symmetric, cfg.chromatic_strength, rng);
    if rng.gen_bool(cfg.occlusion_prob as f64) {
        occlusion_augment(pair, cfg.occlusion_side.0, cfg.occlusion_side.1, rng);
    }
}

/// Runs the full schedule. `on_epoch` sees each epoch's log as it completes.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[StereoPair],
    val_set: &[StereoPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let d = model.config.max_disparity as f32;
    for p in train_set.iter().chain(val_set) {
        if let Some(v) = p.gt.values.iter().zip(&p.gt.valid).find(|(v, &ok)| ok && (**v < 0.0 || **v > d - 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "ground-truth disparity {} is outside [0, {}] for max_disparity {}",
                v.0,
                d - 1.0,
                model.config.max_disparity
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut adam = AdamState::new(store, cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<StereoPair> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            for p in &mut batch {
                augment(p, cfg, &mut rng);
            }
            total += train_step(model, store, &mut adam, &batch, cfg.clip_norm)? as f64;
            batches += 1;
        }
        let epe = if val_set.is_empty() { f64::NAN } else { evaluate(model, store, val_set, cfg.batch_size, &[])?.epe };
        let log = EpochLog { epoch, lr: adam.lr, loss: total / batches as f64, epe, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
