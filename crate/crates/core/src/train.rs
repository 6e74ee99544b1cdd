//! Mini-batch training with early stopping on validation mean AUC.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Augmenter, Dataset, ZoomRange};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::model::{Model, Prediction};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub augment: bool,
    pub zoom_range: ZoomRange,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
    /// When false the history's wall-time column is written as 0 so that
    /// repeated runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 8,
            max_epochs: 100,
            max_steps: None,
            patience: 10,
            augment: false,
            zoom_range: ZoomRange::Out,
            seed: 0,
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean over classes where the AUC is defined; NaN if none is.
    pub val_mean_auc: f64,
    /// Effective sharpness at the start of the epoch, if the pooling has one.
    pub r_eff: Option<f64>,
    pub wall_time: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mean_auc,r_eff,wall_time";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let r_eff = r.r_eff.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_mean_auc, r_eff, r.wall_time
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the best validation epoch.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Predictions for every sample, in dataset order.
pub fn predict_all<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch: usize) -> Result<Vec<Prediction<T>>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(model.predict(&dataset.images(chunk)?)?);
    }
    Ok(out)
}

/// Mean per-class AUC over the classes where it is defined.
pub fn mean_auc<T: Scalar>(dataset: &Dataset, predictions: &[Prediction<T>]) -> f64 {
    let aucs: Vec<f64> = (0..dataset.num_classes())
        .filter_map(|k| {
            let scores: Vec<f64> = predictions.iter().map(|p| p.probs[k].f64()).collect();
            let labels: Vec<u8> = dataset.samples.iter().map(|s| s.labels[k]).collect();
            roc_auc(&scores, &labels).ok()
        })
        .collect();
    if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, train_set, val_set, config, &mut |_, _| {})
}

/// [`train`] with a callback invoked after every epoch with the record and
/// the current (not necessarily best) model.
pub fn train_with<T: Scalar>(
    mut model: Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model<T>),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "train",
            "training and validation sets must be non-empty",
        ));
    }
    let k = model.config().num_classes;
    if train_set.num_classes() != k || val_set.num_classes() != k {
        return Err(Error::shape(
            "train",
            format!(
                "model has {k} classes, datasets have {} / {}",
                train_set.num_classes(),
                val_set.num_classes()
            ),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("train", "batch_size must be >= 1"));
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let augmenter = Augmenter::new(config.zoom_range);
    let mut adam = Adam::new(config.adam, model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    let step_cap = config.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=config.max_epochs {
        if steps >= step_cap {
            break;
        }
        let r_eff = model.r_eff();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            if steps >= step_cap {
                break;
            }
            let mut images = train_set.images::<T>(chunk)?;
            if config.augment {
                let side = train_set.samples[chunk[0]].image.width();
                let plane = side * side;
                for (j, &i) in chunk.iter().enumerate() {
                    let aug = augmenter.augment(&train_set.samples[i].image, &mut rng);
                    for (dst, &v) in images.data_mut()[j * plane..(j + 1) * plane].iter_mut().zip(aug.data()) {
                        *dst = T::of(v);
                    }
                }
            }
            let targets = train_set.targets::<T>(chunk)?;
            let (loss, grads) = model.loss_and_grads(&images, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch + 1,
                    r_eff: model.r_eff().unwrap_or(f64::NAN),
                });
            }
            adam.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::NonFiniteGradient { name } => Error::NonFiniteUpdate {
                    name,
                    epoch,
                    batch: batch + 1,
                    r_eff: model.r_eff().unwrap_or(f64::NAN),
                },
                other => other,
            })?;
            model.clamp_beta();
            steps += 1;
            loss_sum += loss.f64() * chunk.len() as f64;
            loss_n += chunk.len();
        }

        let preds = predict_all(&model, val_set, 32)?;
        let val_auc = mean_auc(val_set, &preds);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_mean_auc: val_auc,
            r_eff,
            wall_time: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&record, &model);
        history.push(record);

        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_auc > *b || (b.is_nan() && !val_auc.is_nan()),
        };
        if improved {
            best = Some((val_auc, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        steps,
    })
}
