//! Training loop: SGD with momentum and weight decay under a polynomial
//! learning-rate schedule, minimizing the deep-supervised hybrid loss.
//! Single-threaded over model state; with a fixed seed two runs produce
//! bit-identical loss sequences.

mod loss;

pub use loss::{
    deep_supervised_loss, hybrid_loss, LossParts, LossWeights, SSIM_C1, SSIM_C2, SSIM_SIGMA,
    SSIM_WINDOW,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_train, stack_batch, Sample};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DefTModel, NamedTensor, BN_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub resize_to: usize,
    pub crop_to: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 700,
            batch_size: 8,
            base_lr: 0.003,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            loss_weights: LossWeights::default(),
            seed: 0,
            resize_to: 256,
            crop_to: 224,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::config("poly_power must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.crop_to > self.resize_to {
            return Err(Error::config(format!(
                "crop_to {} exceeds resize_to {}",
                self.crop_to, self.resize_to
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter, in registry order.
pub struct OptimizerState<T: Element> {
    velocities: Vec<Vec<T>>,
    pub step: usize,
    pub lr: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[NamedTensor<T>]) -> Self {
        OptimizerState {
            velocities: params.iter().map(|p| vec![T::zero(); p.tensor.data().len()]).collect(),
            step: 0,
            lr: 0.0,
        }
    }
}

/// base_lr · (1 − iter/max_iter)^power. Defined for 0 ≤ iter ≤ max_iter;
/// iter = max_iter gives exactly 0.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::usage("poly schedule needs max_iter > 0"));
    }
    if iter > max_iter {
        return Err(Error::usage(format!(
            "iteration {iter} is past the end of the schedule ({max_iter})"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// v ← momentum·v + (g + weight_decay·p); p ← p − lr·v. Decay folds into
/// the gradient, so momentum smooths the decay term too.
pub fn sgd_step<T: Element>(
    params: &mut [NamedTensor<T>],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocities.len() != params.len() {
        return Err(Error::shape("optimizer state does not mirror the parameters"));
    }
    let mom = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    let lr_t = T::from_f64(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        let data = p.tensor.data_mut();
        if g.len() != data.len() || v.len() != data.len() {
            return Err(Error::shape(format!(
                "gradient for {} does not match its parameter",
                p.name
            )));
        }
        for i in 0..data.len() {
            v[i] = mom * v[i] + (g[i] + wd * data[i]);
            data[i] -= lr_t * v[i];
        }
    }
    state.step += 1;
    state.lr = lr;
    Ok(())
}

/// One row of the loss log. Component values are the raw (unweighted) term
/// sums across supervision heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

/// CSV with header `iteration,epoch,lr,total_loss,bce,ssim,iou`.
pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("iteration,epoch,lr,total_loss,bce,ssim,iou\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.epoch, r.lr, r.total_loss, r.bce, r.ssim, r.iou
        ));
    }
    out
}

pub fn train<T: Element>(
    model: &mut DefTModel<T>,
    dataset: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    train_with_callback(model, dataset, cfg, |_, _| {})
}

/// The full loop: per-epoch shuffle, resize-plus-random-crop augmentation,
/// forward in training mode, deep-supervised loss, backward, SGD update,
/// running-stat refresh. The callback sees every record as it is produced.
/// A non-finite loss aborts with the iteration index and learning rate.
pub fn train_with_callback<T, F>(
    model: &mut DefTModel<T>,
    dataset: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_record: F,
) -> Result<Vec<TrainRecord>>
where
    T: Element,
    F: FnMut(&TrainRecord, &DefTModel<T>),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches_per_epoch;
    let mut records = Vec::with_capacity(max_iter);
    if cfg.epochs == 0 {
        return Ok(records);
    }

    let mut opt = OptimizerState::new(model.params());
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| augment_train(&dataset[i], &mut rng, cfg.resize_to, cfg.crop_to))
                .collect::<Result<_>>()?;
            let (images, masks) = stack_batch(&batch)?;

            let lr = poly_lr(cfg.base_lr, iteration, max_iter, cfg.poly_power)?;
            // Numeric failures anywhere in the step report where the run
            // died; other error kinds pass through untouched.
            let at = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::numeric(format!("{msg} at iteration {iteration} (lr {lr})"))
                }
                other => other,
            };

            let mut g = Graph::new();
            let pids = model.bind(&mut g);
            let x = g.constant(images);
            let target = g.constant(masks);
            let outputs = model.forward(&mut g, &pids, x, true).map_err(|e| at(e))?;
            let parts = deep_supervised_loss(&mut g, &outputs, target, &cfg.loss_weights)
                .map_err(|e| at(e))?;

            let total = g.value(parts.total).data()[0].as_f64();
            if !total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at iteration {iteration} (lr {lr})"
                )));
            }
            g.backward(parts.total).map_err(|e| at(e))?;

            let grads: Vec<&[T]> = pids
                .iter()
                .zip(model.params())
                .map(|(&id, p)| {
                    g.grad(id).ok_or_else(|| {
                        Error::numeric(format!("parameter {} received no gradient", p.name))
                    })
                })
                .collect::<Result<_>>()?;
            sgd_step(
                model.params_mut(),
                &grads,
                &mut opt,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            model.apply_bn_updates(&outputs.bn_stats, BN_MOMENTUM);

            let record = TrainRecord {
                iteration,
                epoch,
                lr,
                total_loss: total,
                bce: parts.bce,
                ssim: parts.ssim,
                iou: parts.iou,
            };
            on_record(&record, model);
            records.push(record);
            iteration += 1;
        }
    }
    Ok(records)
}
