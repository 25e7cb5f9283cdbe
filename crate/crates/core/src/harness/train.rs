//! Training controller and evaluation.

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::objective::objective;
use super::optimizer::{decayed_lr, AdamW};
use super::transform::{apply_transform, TransformParams};
use crate::balance::compute_balance_weights;
use crate::error::{Error, Result};
use crate::imbalance::Dataset;
use crate::losses::LossBreakdown;
use crate::model::checkpoint::{Checkpoint, NormStats, SeedRecord};
use crate::model::{Model, ModelConfig};

const EVAL_CHUNK: usize = 256;

/// A dataset as raw pixel intensities in `[0, 1]`, N×C×H×W.
pub struct Tensors {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl Tensors {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let s = &ds.store;
        let n = ds.manifest.len();
        let mut data = Vec::with_capacity(n * s.image_len());
        for r in ds.manifest.records() {
            data.extend(ds.image(r)?.iter().map(|&p| p as f64 / 255.0));
        }
        Ok(Self {
            images: Array4::from_shape_vec((n, s.channels, s.height, s.width), data).expect("store shape"),
            labels: ds.manifest.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        (
            self.images.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Per-channel mean and standard deviation of raw training pixels.
pub fn norm_stats(images: &Array4<f64>) -> NormStats {
    let c = images.shape()[1];
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in images.axis_iter(Axis(1)) {
        let m = ch.mean().unwrap_or(0.0);
        let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / ch.len().max(1) as f64;
        mean.push(m);
        std.push(v.sqrt().max(1e-8));
    }
    NormStats { mean, std }
}

pub fn normalize(images: &mut Array4<f64>, norm: &NormStats) {
    for mut sample in images.outer_iter_mut() {
        for (mut plane, (m, s)) in sample.outer_iter_mut().zip(norm.mean.iter().zip(&norm.std)) {
            plane.mapv_inplace(|v| (v - m) / s);
        }
    }
}

pub struct TrainOutcome {
    /// Model after the last epoch.
    pub checkpoint: Checkpoint,
    /// One evaluation per epoch.
    pub reports: Vec<MetricsReport>,
    /// Loss of every optimizer step.
    pub loss_trace: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        self.reports.last().expect("at least one epoch")
    }

    /// Highest mean accuracy; the earliest epoch wins ties.
    pub fn best_report(&self) -> &MetricsReport {
        let mut best = &self.reports[0];
        for r in &self.reports[1..] {
            if r.mean_accuracy > best.mean_accuracy {
                best = r;
            }
        }
        best
    }
}

pub fn model_config(config: &TrainConfig, ds: &Dataset) -> Result<ModelConfig> {
    let s = &ds.store;
    if s.height != s.width {
        return Err(Error::data(format!("images must be square, got {}×{}", s.height, s.width)));
    }
    let cfg = ModelConfig {
        in_channels: s.channels,
        input_size: s.height,
        channels: config.channels.clone(),
        num_classes: ds.manifest.num_classes(),
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(config: &TrainConfig, train_ds: &Dataset, eval_ds: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if eval_ds.manifest.class_names() != train_ds.manifest.class_names() {
        return Err(Error::data("training and evaluation class lists differ"));
    }
    let model_cfg = model_config(config, train_ds)?;
    let weights = compute_balance_weights(&train_ds.manifest.class_counts()?, config.beta)?;
    let seeds = SeedRecord::derive(config.seed);
    let data = Tensors::from_dataset(train_ds)?;
    let eval = Tensors::from_dataset(eval_ds)?;
    let norm = norm_stats(&data.images);

    let mut model = Model::init(model_cfg, seeds.init_seed)?;
    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds.order_seed);
    let mut transform_rng = ChaCha8Rng::seed_from_u64(seeds.transform_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(config.max_epochs);
    let mut loss_trace = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr = decayed_lr(config.learning_rate, config.lr_decay_per_epoch, epoch);
        order.shuffle(&mut order_rng);
        let mut epoch_loss = [0.0; 3];
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                // A lone sample gives degenerate batch statistics.
                continue;
            }
            let (raw, labels) = data.gather(batch);
            let params = TransformParams::sample(
                config.transform,
                batch.len(),
                config.scale_range,
                config.gain_range,
                &mut transform_rng,
            );
            let (mut second, inverse) = apply_transform(&raw, &params)?;
            let mut first = raw;
            normalize(&mut first, &norm);
            normalize(&mut second, &norm);
            let out = objective(&model, &first, &second, &inverse, &labels, config, &weights, true)?;
            let grads = out.grads.expect("requested gradients");
            opt.step(&mut model.params, &grads, lr);
            model.update_running_stats(&out.stats);
            epoch_loss[0] += out.loss.total;
            epoch_loss[1] += out.loss.cls;
            epoch_loss[2] += out.loss.cons;
            steps += 1;
            loss_trace.push(out.loss);
        }
        let report = evaluate_model(&model, &norm, &eval, train_ds.manifest.class_names(), epoch + 1, "test")?;
        let per_step = |v: f64| v / steps.max(1) as f64;
        log::info!(
            "epoch {:>3}  loss {:.4} (cls {:.4}, cons {:.4})  overall {:.4}  mean {:.4}",
            epoch + 1,
            per_step(epoch_loss[0]),
            per_step(epoch_loss[1]),
            per_step(epoch_loss[2]),
            report.overall_accuracy,
            report.mean_accuracy
        );
        reports.push(report);
    }

    let checkpoint = Checkpoint {
        model,
        norm,
        seeds,
        class_names: train_ds.manifest.class_names().to_vec(),
        train_config: serde_json::to_value(config).map_err(|e| Error::config(e.to_string()))?,
        epoch: config.max_epochs,
    };
    Ok(TrainOutcome {
        checkpoint,
        reports,
        loss_trace,
    })
}

/// Argmax of single-view logits with running statistics.
pub fn predict(model: &Model, norm: &NormStats, images: &Array4<f64>) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.shape()[0]);
    let n = images.shape()[0];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let mut chunk = images.slice_axis(Axis(0), (start..(start + EVAL_CHUNK).min(n)).into()).to_owned();
        normalize(&mut chunk, norm);
        let logits = model.predict_logits(&chunk)?;
        preds.extend(logits.outer_iter().map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                .0
        }));
    }
    Ok(preds)
}

fn evaluate_model(
    model: &Model,
    norm: &NormStats,
    eval: &Tensors,
    class_names: &[String],
    epoch: usize,
    split: &str,
) -> Result<MetricsReport> {
    let preds = predict(model, norm, &eval.images)?;
    MetricsReport::from_predictions(&eval.labels, &preds, class_names.to_vec(), epoch, split)
}

pub fn evaluate(checkpoint: &Checkpoint, ds: &Dataset) -> Result<MetricsReport> {
    let l = checkpoint.model.config.num_classes;
    if ds.manifest.num_classes() != l {
        return Err(Error::data(format!(
            "checkpoint has {l} classes but the manifest has {}",
            ds.manifest.num_classes()
        )));
    }
    let eval = Tensors::from_dataset(ds)?;
    evaluate_model(
        &checkpoint.model,
        &checkpoint.norm,
        &eval,
        &checkpoint.class_names,
        checkpoint.epoch,
        &ds.manifest.split().to_string(),
    )
}
