//! Training engines: a cross-entropy baseline and a fixation-supervised
//! variant whose loss adds a weighted MSE between each sample's
//! training-time activation map and its fixation map.
//!
//! The activation map is rebuilt from the current dense weights every step:
//! the weight row of the driving class is multiplied elementwise with the
//! penultimate stack, summed over channels, and rectified. The map is then
//! resized to the fixation map's grid, optionally min-max normalized, and
//! compared by MSE; its gradient flows back into both the convolutional
//! stack and the dense weights.

use crate::cam::{bilinear_resize, bilinear_resize_backward};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{mse_loss, softmax_ce_loss};
use crate::model::{argmax, BatchTrace, Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

const STREAM_VAL_SPLIT: u64 = 1;
const STREAM_MODEL_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_BATCH: u64 = 4;

/// Fraction of the training split carved out for early-stopping validation.
const VALIDATION_FRACTION: f64 = 0.9;

/// Which class row drives the training-time activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamClassMode {
    Predicted,
    True,
}

/// How the resized activation map is scaled before the MSE. Constant maps
/// (all-zero included) are always compared as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapNorm {
    MinMax,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the fixation-map MSE term.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Epochs without validation-CE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub cam_class_mode: CamClassMode,
    pub map_norm: MapNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            lambda: 1.0,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            cam_class_mode: CamClassMode::Predicted,
            map_norm: MapNorm::MinMax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_ce: f64,
    pub train_mse: f64,
    pub train_accuracy: f64,
    pub val_ce: f64,
    pub val_mse: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub true_label: usize,
    pub predicted: usize,
    /// Softmax probability assigned to the true label.
    pub confidence_true: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based number of the last epoch that ran.
    pub stopped_epoch: usize,
    /// 1-based epoch whose validation CE was best; the returned model.
    pub best_epoch: usize,
    pub wall_time_s: f64,
    /// Final model evaluated on the full training input.
    pub final_records: Vec<SampleRecord>,
    pub final_accuracy: f64,
}

// ── the fixation-map MSE path ────────────────────────────────────────────

struct CamMse {
    mse: f64,
    /// d(mse)/d(activations), length K*n*n.
    d_act: Vec<f64>,
    /// d(mse)/d(dense weight row), length K*n*n.
    d_row: Vec<f64>,
}

/// MSE between the rectified weighted activation map and a fixation map,
/// with gradients w.r.t. both factors. `row` and `acts` hold [K, n, n].
fn cam_mse(
    row: &[f64],
    acts: &[f64],
    k: usize,
    n: usize,
    fixmap: &Tensor,
    norm: MapNorm,
) -> Result<CamMse> {
    let px = n * n;
    let mut pre = vec![0.0; px];
    for c in 0..k {
        let base = c * px;
        for ij in 0..px {
            pre[ij] += row[base + ij] * acts[base + ij];
        }
    }
    let cam = Tensor::new(vec![n, n], pre.iter().map(|&v| v.max(0.0)).collect())?;
    if fixmap.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "fixation map must be [h, w], got {:?}",
            fixmap.shape()
        )));
    }
    let (fh, fw) = (fixmap.shape()[0], fixmap.shape()[1]);
    let resized = bilinear_resize(&cam, fh, fw)?;

    let (mse, d_resized) = match norm {
        MapNorm::None => mse_loss(&resized, fixmap)?,
        MapNorm::MinMax => {
            let data = resized.data();
            let (mut imin, mut imax) = (0usize, 0usize);
            for (i, &v) in data.iter().enumerate() {
                if v < data[imin] {
                    imin = i;
                }
                if v > data[imax] {
                    imax = i;
                }
            }
            let span = data[imax] - data[imin];
            if span > 0.0 {
                let mn = data[imin];
                let normed = resized.map(|v| (v - mn) / span);
                let (mse, g) = mse_loss(&normed, fixmap)?;
                let sum_g: f64 = g.data().iter().sum();
                let sum_gn: f64 = g
                    .data()
                    .iter()
                    .zip(normed.data())
                    .map(|(a, b)| a * b)
                    .sum();
                let mut d = g.map(|v| v / span);
                d.data_mut()[imin] += (sum_gn - sum_g) / span;
                d.data_mut()[imax] -= sum_gn / span;
                (mse, d)
            } else {
                mse_loss(&resized, fixmap)?
            }
        }
    };

    let d_cam = bilinear_resize_backward(&d_resized, n, n)?;
    let mut d_act = vec![0.0; k * px];
    let mut d_row = vec![0.0; k * px];
    for ij in 0..px {
        if pre[ij] > 0.0 {
            let g = d_cam.data()[ij];
            if g != 0.0 {
                for c in 0..k {
                    let o = c * px + ij;
                    d_act[o] = g * row[o];
                    d_row[o] = g * acts[o];
                }
            }
        }
    }
    Ok(CamMse { mse, d_act, d_row })
}

/// Joint objective for one already-computed forward trace.
#[derive(Debug, Clone)]
pub struct JointLoss {
    /// ce + lambda * mse.
    pub loss: f64,
    pub ce: f64,
    pub mse: f64,
    /// d(loss)/d(logits); backpropagating this covers the whole CE path.
    pub logits_grad: Vec<f64>,
    /// The MSE term's extra gradient w.r.t. the penultimate activations,
    /// [K, n, n]; to be added where the flatten layer's input gradient
    /// forms. Zero when lambda = 0.
    pub activation_grad: Tensor,
    /// The MSE term's extra gradient w.r.t. the dense weight matrix (only
    /// the driving class row is nonzero). Zero when lambda = 0.
    pub dense_weight_grad: Tensor,
}

/// Evaluates CE + lambda * MSE for a single sample, with the gradient
/// contributions of the MSE path. With lambda = 0 the result is exactly the
/// cross-entropy output and both extra gradients are zero.
pub fn joint_loss(
    model: &Model,
    trace: &crate::model::ForwardTrace,
    label: usize,
    fixmap: &Tensor,
    lambda: f64,
    class_mode: CamClassMode,
    map_norm: MapNorm,
) -> Result<JointLoss> {
    let classes = model.config().num_classes;
    if label >= classes {
        return Err(Error::Index(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let k = model.penultimate_channels();
    let n = model.penultimate_side();
    let logits = Tensor::new(vec![1, classes], trace.logits.clone())?;
    let (ce, logits_grad) = softmax_ce_loss(&logits, &[label])?;
    let w = model.dense_weight();

    if lambda == 0.0 {
        return Ok(JointLoss {
            loss: ce,
            ce,
            mse: 0.0,
            logits_grad: logits_grad.into_data(),
            activation_grad: Tensor::zeros(vec![k, n, n]),
            dense_weight_grad: Tensor::zeros(w.shape().to_vec()),
        });
    }
    if trace.activations.shape() != [k, n, n] {
        return Err(Error::Dimension(format!(
            "activation stack {:?} does not match the model's [{k}, {n}, {n}]",
            trace.activations.shape()
        )));
    }
    let class = match class_mode {
        CamClassMode::Predicted => trace.predicted,
        CamClassMode::True => label,
    };
    let row_len = k * n * n;
    let row = &w.data()[class * row_len..(class + 1) * row_len];
    let parts = cam_mse(row, trace.activations.data(), k, n, fixmap, map_norm)?;

    let activation_grad = Tensor::new(
        vec![k, n, n],
        parts.d_act.iter().map(|&v| lambda * v).collect(),
    )?;
    let mut dense = Tensor::zeros(w.shape().to_vec());
    for (dst, &v) in dense.data_mut()[class * row_len..(class + 1) * row_len]
        .iter_mut()
        .zip(&parts.d_row)
    {
        *dst = lambda * v;
    }
    Ok(JointLoss {
        loss: ce + lambda * parts.mse,
        ce,
        mse: parts.mse,
        logits_grad: logits_grad.into_data(),
        activation_grad,
        dense_weight_grad: dense,
    })
}

// ── batched objective ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    /// Per-sample averages over the batch.
    pub ce: f64,
    pub mse: f64,
    pub correct: usize,
    pub total: usize,
}

struct BatchCore {
    trace: BatchTrace,
    logits_grad: Tensor,
    penultimate_grad: Option<Tensor>,
    dense_weight_grad: Option<Vec<f64>>,
    stats: BatchStats,
}

fn batch_core(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    fixmaps: Option<&[&Tensor]>,
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<BatchCore> {
    let batch = labels.len();
    let trace = model.forward_batch(images, Mode::Train, dropout_seed)?;
    let (ce, logits_grad) = softmax_ce_loss(&trace.logits, labels)?;
    let classes = model.config().num_classes;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| {
            argmax(&trace.logits.data()[b * classes..(b + 1) * classes]) == label
        })
        .count();

    let mut mse_sum = 0.0;
    let mut penultimate_grad = None;
    let mut dense_weight_grad = None;
    if config.lambda > 0.0 {
        let maps = fixmaps.ok_or_else(|| {
            Error::Data("fixation maps are required when lambda > 0".into())
        })?;
        if maps.len() != batch {
            return Err(Error::Dimension(format!(
                "{} fixation maps for a batch of {batch}",
                maps.len()
            )));
        }
        let k = model.penultimate_channels();
        let n = model.penultimate_side();
        let row_len = k * n * n;
        let w = model.dense_weight();
        let mut pg = Tensor::zeros(vec![batch, k, n, n]);
        let mut wg = vec![0.0; w.numel()];
        let scale = config.lambda / batch as f64;
        for b in 0..batch {
            let class = match config.cam_class_mode {
                CamClassMode::Predicted => {
                    argmax(&trace.logits.data()[b * classes..(b + 1) * classes])
                }
                CamClassMode::True => labels[b],
            };
            let acts = &trace.penultimate.data()[b * row_len..(b + 1) * row_len];
            let row = &w.data()[class * row_len..(class + 1) * row_len];
            let parts = cam_mse(row, acts, k, n, maps[b], config.map_norm)?;
            mse_sum += parts.mse;
            for (dst, &v) in pg.data_mut()[b * row_len..(b + 1) * row_len]
                .iter_mut()
                .zip(&parts.d_act)
            {
                *dst = scale * v;
            }
            for (dst, &v) in wg[class * row_len..(class + 1) * row_len]
                .iter_mut()
                .zip(&parts.d_row)
            {
                *dst += scale * v;
            }
        }
        penultimate_grad = Some(pg);
        dense_weight_grad = Some(wg);
    }
    Ok(BatchCore {
        trace,
        logits_grad,
        penultimate_grad,
        dense_weight_grad,
        stats: BatchStats {
            ce,
            mse: mse_sum / batch as f64,
            correct,
            total: batch,
        },
    })
}

/// Train-mode loss of one batch without touching the model: (ce, mse), both
/// per-sample averages. The finite-difference oracle for [`batch_step`].
pub fn batch_loss(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    fixmaps: Option<&[&Tensor]>,
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<(f64, f64)> {
    let core = batch_core(model, images, labels, fixmaps, config, dropout_seed)?;
    Ok((core.stats.ce, core.stats.mse))
}

/// One gradient accumulation step: forward in train mode, joint backward,
/// batchnorm running-statistics update. Does not apply the optimizer.
pub fn batch_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    fixmaps: Option<&[&Tensor]>,
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<BatchStats> {
    let core = batch_core(model, images, labels, fixmaps, config, dropout_seed)?;
    model.backward_batch(&core.trace, &core.logits_grad, core.penultimate_grad.as_ref())?;
    if let Some(wg) = &core.dense_weight_grad {
        for (name, t) in model.named_params_mut() {
            if name == "dense.weight" {
                t.accumulate_grad(wg);
                break;
            }
        }
    }
    model.apply_running_stats(&core.trace)?;
    Ok(core.stats)
}

// ── training engine ──────────────────────────────────────────────────────

fn stack_images(dataset: &Dataset, indices: &[usize], side: usize) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * side * side);
    for &i in indices {
        data.extend_from_slice(dataset.samples[i].image.data());
    }
    Tensor::new(vec![indices.len(), 1, side, side], data)
        .expect("sample shapes were checked before stacking")
}

/// Splits `0..len` into batches, stealing one sample from the previous
/// batch when the tail would hold a single sample (train-mode batchnorm
/// needs at least two values per channel).
fn batch_ranges(len: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + batch_size).min(len);
        out.push((start, end));
        start = end;
    }
    if out.len() >= 2 && out.last().map(|&(s, e)| e - s) == Some(1) {
        let n = out.len();
        out[n - 2].1 -= 1;
        out[n - 1].0 -= 1;
    }
    out
}

fn epoch_eval(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    use_mse: bool,
) -> Result<(f64, f64, f64)> {
    let side = model.config().input_side;
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    let classes = dataset.num_classes;
    let (mut ce_sum, mut mse_sum, mut correct) = (0.0, 0.0, 0usize);
    let k = model.penultimate_channels();
    let n = model.penultimate_side();
    let row_len = k * n * n;
    for &(s, e) in batch_ranges(indices.len(), config.batch_size.max(1)).iter() {
        let batch = &indices[s..e];
        let images = stack_images(dataset, batch, side);
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.samples[i].label).collect();
        let trace = model.forward_batch(&images, Mode::Eval, 0)?;
        let (ce, _) = softmax_ce_loss(&trace.logits, &labels)?;
        ce_sum += ce * labels.len() as f64;
        for (b, &i) in batch.iter().enumerate() {
            let logit_row = &trace.logits.data()[b * classes..(b + 1) * classes];
            if argmax(logit_row) == labels[b] {
                correct += 1;
            }
            if use_mse {
                let map = dataset.samples[i].fixmap.as_ref().ok_or_else(|| {
                    Error::Data(format!(
                        "sample {} has no fixation map",
                        dataset.samples[i].id
                    ))
                })?;
                let class = match config.cam_class_mode {
                    CamClassMode::Predicted => argmax(logit_row),
                    CamClassMode::True => labels[b],
                };
                let acts = &trace.penultimate.data()[b * row_len..(b + 1) * row_len];
                let row =
                    &model.dense_weight().data()[class * row_len..(class + 1) * row_len];
                mse_sum += cam_mse(row, acts, k, n, map, config.map_norm)?.mse;
            }
        }
    }
    let total = indices.len() as f64;
    Ok((ce_sum / total, mse_sum / total, correct as f64 / total))
}

fn image_side(dataset: &Dataset) -> Result<usize> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Argument("training dataset is empty".into()))?;
    let shape = first.image.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension(format!(
            "sample {} is {:?}, expected a square [side, side] image",
            first.id, shape
        )));
    }
    let side = shape[0];
    for s in &dataset.samples {
        if s.image.shape() != [side, side] {
            return Err(Error::Dimension(format!(
                "sample {} is {:?} but the dataset started with [{side}, {side}]",
                s.id,
                s.image.shape()
            )));
        }
    }
    Ok(side)
}

fn run_training(dataset: &Dataset, config: &TrainConfig, use_mse: bool) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let config = &TrainConfig {
        lambda: if use_mse { config.lambda } else { 0.0 },
        ..*config
    };
    let start = Instant::now();
    let side = image_side(dataset)?;
    if dataset.num_classes < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    if use_mse {
        for s in &dataset.samples {
            if s.fixmap.is_none() {
                return Err(Error::Data(format!("sample {} has no fixation map", s.id)));
            }
        }
    }
    let (train, val) = crate::data::split(
        dataset,
        VALIDATION_FRACTION,
        derive_seed(config.seed, &[STREAM_VAL_SPLIT]),
    )?;
    let model_config = ModelConfig::preset(side, dataset.num_classes);
    let mut model = Model::new(model_config, derive_seed(config.seed, &[STREAM_MODEL_INIT]))?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stall = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);

        let (mut ce_sum, mut mse_sum, mut correct) = (0.0, 0.0, 0usize);
        for (batch_idx, &(s, e)) in batch_ranges(order.len(), config.batch_size)
            .iter()
            .enumerate()
        {
            let batch = &order[s..e];
            let images = stack_images(&train, batch, side);
            let labels: Vec<usize> = batch.iter().map(|&i| train.samples[i].label).collect();
            let maps: Vec<&Tensor>;
            let fixmaps = if use_mse && config.lambda > 0.0 {
                maps = batch
                    .iter()
                    .map(|&i| train.samples[i].fixmap.as_ref().expect("checked above"))
                    .collect();
                Some(maps.as_slice())
            } else {
                None
            };
            let seed = derive_seed(config.seed, &[STREAM_BATCH, epoch as u64, batch_idx as u64]);
            let stats = batch_step(&mut model, &images, &labels, fixmaps, config, seed)?;
            ce_sum += stats.ce * stats.total as f64;
            mse_sum += stats.mse * stats.total as f64;
            correct += stats.correct;
            let mut named = model.named_params_mut();
            let mut view: Vec<(&str, &mut Tensor)> = named
                .iter_mut()
                .map(|(name, t)| (name.as_str(), &mut **t))
                .collect();
            adam.step(&mut view)?;
        }
        let n_train = train.samples.len() as f64;
        let (val_ce, val_mse, val_acc) =
            epoch_eval(&model, &val, config, use_mse && config.lambda > 0.0)?;
        epochs.push(EpochStats {
            epoch,
            train_ce: ce_sum / n_train,
            train_mse: mse_sum / n_train,
            train_accuracy: correct as f64 / n_train,
            val_ce,
            val_mse,
            val_accuracy: val_acc,
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_ce < *b);
        if improved {
            best = Some((val_ce, epoch, model.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }
    }
    let stopped_epoch = epochs.len();
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let (final_accuracy, final_records) = evaluate(&best_model, dataset)?;
    Ok((
        best_model,
        TrainReport {
            epochs,
            stopped_epoch,
            best_epoch,
            wall_time_s: start.elapsed().as_secs_f64(),
            final_records,
            final_accuracy,
        },
    ))
}

/// Trains the classifier with cross-entropy only.
pub fn train_baseline(dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    run_training(dataset, config, false)
}

/// Trains with CE + lambda * fixation-map MSE. `fixmaps` holds one [h, w]
/// map per sample, in dataset order. With lambda = 0 the run reproduces
/// [`train_baseline`] bit for bit under the same seed.
pub fn train_vegam(
    dataset: &Dataset,
    fixmaps: &[Tensor],
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    if fixmaps.len() != dataset.samples.len() {
        return Err(Error::Dimension(format!(
            "{} fixation maps for {} samples",
            fixmaps.len(),
            dataset.samples.len()
        )));
    }
    let mut enriched = dataset.clone();
    for (sample, map) in enriched.samples.iter_mut().zip(fixmaps) {
        sample.fixmap = Some(map.clone());
    }
    run_training(&enriched, config, config.lambda > 0.0)
}

/// Eval-mode accuracy and per-sample records for a dataset.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, Vec<SampleRecord>)> {
    if dataset.samples.is_empty() {
        return Err(Error::Argument("evaluation dataset is empty".into()));
    }
    let side = model.config().input_side;
    let classes = model.config().num_classes;
    let mut records = Vec::with_capacity(dataset.samples.len());
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    for &(s, e) in batch_ranges(indices.len(), 64).iter() {
        let batch = &indices[s..e];
        for &i in batch {
            let shape = dataset.samples[i].image.shape();
            if shape != [side, side] {
                return Err(Error::Dimension(format!(
                    "sample {} is {:?}, model expects [{side}, {side}]",
                    dataset.samples[i].id, shape
                )));
            }
        }
        let images = stack_images(dataset, batch, side);
        let trace = model.forward_batch(&images, Mode::Eval, 0)?;
        for (b, &i) in batch.iter().enumerate() {
            let sample = &dataset.samples[i];
            let logits = &trace.logits.data()[b * classes..(b + 1) * classes];
            let probs = crate::loss::softmax(logits);
            let predicted = argmax(logits);
            if predicted == sample.label {
                correct += 1;
            }
            records.push(SampleRecord {
                sample_id: sample.id.clone(),
                true_label: sample.label,
                predicted,
                confidence_true: probs[sample.label],
            });
        }
    }
    Ok((correct as f64 / dataset.samples.len() as f64, records))
}

// ── run-artifact serialization ───────────────────────────────────────────

/// Per-epoch metrics as CSV. Wall time is deliberately left out so reruns
/// with the same seed emit byte-identical files.
pub fn write_metrics_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record([
        "epoch",
        "train_ce",
        "train_mse",
        "train_accuracy",
        "val_ce",
        "val_mse",
        "val_accuracy",
    ])
    .map_err(io_err)?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_ce.to_string(),
            e.train_mse.to_string(),
            e.train_accuracy.to_string(),
            e.val_ce.to_string(),
            e.val_mse.to_string(),
            e.val_accuracy.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-sample predictions as CSV (`sample_id,true,pred,confidence_true`).
pub fn write_eval_csv(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["sample_id", "true", "pred", "confidence_true"])
        .map_err(io_err)?;
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.true_label.to_string(),
            r.predicted.to_string(),
            r.confidence_true.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a per-sample prediction CSV back (the inverse of
/// [`write_eval_csv`]).
pub fn read_eval_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let expected = ["sample_id", "true", "pred", "confidence_true"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "{}: expected header {}, got {}",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let get = |i: usize, name: &str| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| parse_err(format!("missing {name} field")))
        };
        records.push(SampleRecord {
            sample_id: get(0, "sample_id")?.to_string(),
            true_label: get(1, "true")?
                .parse()
                .map_err(|_| parse_err("true label is not an integer".into()))?,
            predicted: get(2, "pred")?
                .parse()
                .map_err(|_| parse_err("pred label is not an integer".into()))?,
            confidence_true: get(3, "confidence_true")?
                .parse()
                .map_err(|_| parse_err("confidence is not a number".into()))?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_glyphs;

    fn toy_model(side: usize, classes: usize, seed: u64) -> Model {
        Model::new(ModelConfig::preset(side, classes), seed).unwrap()
    }

    #[test]
    fn config_defaults_match_the_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.patience, 5);
        assert_eq!(c.cam_class_mode, CamClassMode::Predicted);
        assert_eq!(c.map_norm, MapNorm::MinMax);
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..c }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn batch_ranges_never_leave_a_lone_tail_sample() {
        assert_eq!(batch_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_ranges(9, 4), vec![(0, 4), (4, 7), (7, 9)]);
        assert_eq!(batch_ranges(4, 4), vec![(0, 4)]);
        assert_eq!(batch_ranges(1, 4), vec![(0, 1)]);
    }

    #[test]
    fn zero_lambda_joint_loss_is_exactly_cross_entropy() {
        let model = toy_model(8, 2, 3);
        let ds = generate_glyphs(2, 1, 8, 5).unwrap();
        let trace = model.forward(&ds.samples[0].image).unwrap();
        let fixmap = Tensor::full(vec![8, 8], 0.5);
        let jl = joint_loss(
            &model,
            &trace,
            0,
            &fixmap,
            0.0,
            CamClassMode::Predicted,
            MapNorm::MinMax,
        )
        .unwrap();
        let logits = Tensor::new(vec![1, 2], trace.logits.clone()).unwrap();
        let (ce, ce_grad) = softmax_ce_loss(&logits, &[0]).unwrap();
        assert_eq!(jl.loss, ce);
        assert_eq!(jl.mse, 0.0);
        assert_eq!(jl.logits_grad, ce_grad.data());
        assert!(jl.activation_grad.data().iter().all(|&v| v == 0.0));
        assert!(jl.dense_weight_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matching_map_kills_the_mse_term() {
        // n = 1 for an 8x8 input, so the training-time map is one pixel and
        // min-max normalization falls back to the raw comparison
        let model = toy_model(8, 2, 7);
        let ds = generate_glyphs(2, 1, 8, 6).unwrap();
        let trace = model.forward(&ds.samples[1].image).unwrap();
        let k = model.penultimate_channels();
        let row = model.dense_weight_maps(trace.predicted).unwrap();
        let cam_value: f64 = (0..k)
            .map(|c| row.data()[c] * trace.activations.data()[c])
            .sum::<f64>()
            .max(0.0);
        let fixmap = Tensor::full(vec![1, 1], cam_value);
        let jl = joint_loss(
            &model,
            &trace,
            1,
            &fixmap,
            2.5,
            CamClassMode::Predicted,
            MapNorm::MinMax,
        )
        .unwrap();
        assert!(jl.mse.abs() < 1e-24);
        assert!((jl.loss - jl.ce).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        // 32x32 input gives a 2x2 training-time map; a 3x3 fixation map
        // exercises the resize and min-max paths of the gradient
        let model = toy_model(32, 2, 11);
        let ds = generate_glyphs(2, 1, 32, 9).unwrap();
        let image = &ds.samples[0].image;
        let label = 0;
        let fixmap = Tensor::from_fn(vec![3, 3], |i| (i as f64) / 10.0);
        let lambda = 1.7;
        let loss_of = |model: &Model, trace: &crate::model::ForwardTrace| {
            joint_loss(
                model,
                trace,
                label,
                &fixmap,
                lambda,
                CamClassMode::Predicted,
                MapNorm::MinMax,
            )
            .unwrap()
        };
        let trace = model.forward(image).unwrap();
        let jl = loss_of(&model, &trace);
        assert!(jl.mse > 0.0, "test needs a live MSE term");

        let h = 1e-6;
        // through the activations (logits held fixed isolates the MSE path)
        for idx in [0usize, 5, 130, 300, 511] {
            let mut plus = trace.clone();
            plus.activations.data_mut()[idx] += h;
            let mut minus = trace.clone();
            minus.activations.data_mut()[idx] -= h;
            let fd = (loss_of(&model, &plus).loss - loss_of(&model, &minus).loss) / (2.0 * h);
            let an = jl.activation_grad.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "activation {idx}: fd {fd} vs analytic {an}"
            );
        }
        // through the dense weights
        let row_len = model.penultimate_channels()
            * model.penultimate_side()
            * model.penultimate_side();
        let class = trace.predicted;
        for offset in [1usize, 77, 256, 500] {
            let idx = class * row_len + offset;
            let mut bumped = model.clone();
            for (name, t) in bumped.named_params_mut() {
                if name == "dense.weight" {
                    t.data_mut()[idx] += h;
                }
            }
            let plus = loss_of(&bumped, &trace).loss;
            for (name, t) in bumped.named_params_mut() {
                if name == "dense.weight" {
                    t.data_mut()[idx] -= 2.0 * h;
                }
            }
            let minus = loss_of(&bumped, &trace).loss;
            let fd = (plus - minus) / (2.0 * h);
            let an = jl.dense_weight_grad.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "weight {offset}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn baseline_learns_a_separable_two_class_toy() {
        let ds = generate_glyphs(2, 20, 16, 31).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            max_epochs: 12,
            patience: 12,
            seed: 42,
            ..TrainConfig::default()
        };
        let (_, report) = train_baseline(&ds, &config).unwrap();
        let last = report.epochs.last().unwrap();
        assert_eq!(last.train_accuracy, 1.0, "epochs: {:?}", report.epochs);
        assert!(last.train_ce < report.epochs[0].train_ce);
        assert!(report.epochs[0].train_accuracy <= last.train_accuracy);
        // the best epoch holds the smallest validation CE seen
        let min_val = report
            .epochs
            .iter()
            .map(|e| e.val_ce)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(
            report.epochs[report.best_epoch - 1].val_ce, min_val,
            "best epoch must carry the minimum validation CE"
        );
        assert!(report.final_accuracy >= 0.95);
    }

    #[test]
    fn identical_seeds_reproduce_the_report_exactly() {
        let ds = generate_glyphs(2, 8, 16, 77).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (model_a, report_a) = train_baseline(&ds, &config).unwrap();
        let (model_b, report_b) = train_baseline(&ds, &config).unwrap();
        assert_eq!(report_a.epochs, report_b.epochs);
        assert_eq!(report_a.final_records, report_b.final_records);
        for ((na, ta), (nb, tb)) in model_a.named_tensors().iter().zip(model_b.named_tensors()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn zero_lambda_vegam_reproduces_the_baseline_bit_for_bit() {
        let ds = generate_glyphs(2, 8, 16, 13).unwrap();
        let maps: Vec<Tensor> = ds
            .samples
            .iter()
            .map(|_| Tensor::full(vec![16, 16], 0.25))
            .collect();
        let config = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 3,
            seed: 21,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let (model_a, report_a) = train_baseline(&ds, &config).unwrap();
        let (model_b, report_b) = train_vegam(&ds, &maps, &config).unwrap();
        assert_eq!(report_a.epochs, report_b.epochs);
        for ((_, ta), (_, tb)) in model_a.named_tensors().iter().zip(model_b.named_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn evaluate_scores_a_constant_predictor_at_chance() {
        let ds = generate_glyphs(2, 6, 16, 3).unwrap();
        let mut model = toy_model(16, 2, 1);
        for (name, t) in model.named_params_mut() {
            if name == "dense.weight" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "dense.bias" {
                t.data_mut()[0] = 4.0;
                t.data_mut()[1] = 0.0;
            }
        }
        let (accuracy, records) = evaluate(&model, &ds).unwrap();
        assert_eq!(accuracy, 0.5);
        assert!(records.iter().all(|r| r.predicted == 0));
        // confidences equal the softmax of a fresh forward trace
        let trace = model.forward(&ds.samples[3].image).unwrap();
        assert_eq!(records[3].confidence_true, trace.confidence[ds.samples[3].label]);
    }

    #[test]
    fn eval_csv_round_trips_and_metrics_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            SampleRecord {
                sample_id: "a".into(),
                true_label: 1,
                predicted: 0,
                confidence_true: 0.125,
            },
            SampleRecord {
                sample_id: "b".into(),
                true_label: 0,
                predicted: 0,
                confidence_true: 0.75,
            },
        ];
        let path = dir.path().join("eval.csv");
        write_eval_csv(&path, &records).unwrap();
        assert_eq!(read_eval_csv(&path).unwrap(), records);

        let report = TrainReport {
            epochs: vec![EpochStats {
                epoch: 1,
                train_ce: 0.6931471805599453,
                train_mse: 0.01,
                train_accuracy: 0.5,
                val_ce: 0.7,
                val_mse: 0.02,
                val_accuracy: 0.25,
            }],
            stopped_epoch: 1,
            best_epoch: 1,
            wall_time_s: 1.0,
            final_records: records.clone(),
            final_accuracy: 0.5,
        };
        let m1 = dir.path().join("m1.csv");
        let m2 = dir.path().join("m2.csv");
        write_metrics_csv(&m1, &report).unwrap();
        write_metrics_csv(&m2, &report).unwrap();
        assert_eq!(
            std::fs::read(&m1).unwrap(),
            std::fs::read(&m2).unwrap()
        );
        let text = std::fs::read_to_string(&m1).unwrap();
        assert!(text.starts_with("epoch,train_ce,train_mse,train_accuracy"));
        assert!(text.contains("0.6931471805599453"));
    }
}
