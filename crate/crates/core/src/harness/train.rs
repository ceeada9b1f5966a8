use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{select_top_k, RunConfig};
use super::eval::evaluate;
use crate::dataset::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::geometry::assign_gt_index;
use crate::model::{backward, save_checkpoint, GradientSet, TransformModel};
use crate::optim::{learning_rate, step, OptimizerState};

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,mean_train_loss,val_ap50,skipped_samples";

/// RNG stream for per-epoch shuffling; stream 0 initializes the model.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_train_loss: f64,
    pub val_ap50: Option<f64>,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransformModel,
    pub log: Vec<EpochRecord>,
}

/// A training sample reduced to what backward needs.
struct Target {
    text_row: usize,
    feats: Vec<f64>,
    gt_index: usize,
}

fn prepare(data: &Dataset, cfg: &RunConfig) -> Vec<Option<Target>> {
    data.samples
        .iter()
        .map(|sample| {
            let kept = select_top_k(sample, cfg.top_k);
            let gt_index = assign_gt_index(kept.boxes(), &kept.gt_box, cfg.min_gt_iou)?;
            Some(Target {
                text_row: kept.text_row,
                feats: data.features.proposal_matrix(&kept),
                gt_index,
            })
        })
        .collect()
}

/// Trains a transformation layer on `train`, evaluating on `val` after every
/// epoch when it is given.
pub fn fit(train: &Dataset, val: Option<&Dataset>, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (d_img, d_txt) = (train.meta.d_img, train.meta.d_txt);
    if let Some(v) = val {
        if (v.meta.d_img, v.meta.d_txt) != (d_img, d_txt) {
            return Err(Error::ShapeMismatch(format!(
                "train data is {d_img}x{d_txt} but validation data is {}x{}",
                v.meta.d_img, v.meta.d_txt
            )));
        }
    }

    let targets = prepare(train, cfg);
    let skipped = targets.iter().filter(|t| t.is_none()).count();
    if skipped == targets.len() {
        return Err(Error::NoTrainableSamples(targets.len()));
    }

    let opt = &cfg.optimizer;
    let mut init_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut model = TransformModel::init_uniform(d_img, d_txt, &mut init_rng)?;
    let mut state = OptimizerState::new(&model);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut log = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for batch in order.chunks(opt.batch_size) {
            let valid: Vec<&Target> = batch.iter().filter_map(|&i| targets[i].as_ref()).collect();
            if valid.is_empty() {
                continue;
            }
            // Collected in batch order, then reduced sequentially, so the sum
            // does not depend on thread scheduling.
            let results: Vec<(f64, GradientSet)> = valid
                .par_iter()
                .map(|t| {
                    backward(
                        &model,
                        train.features.text_row(t.text_row),
                        &t.feats,
                        t.gt_index,
                    )
                })
                .collect::<Result<_>>()?;

            let mut grads = GradientSet::zeros_like(&model);
            for (loss, g) in &results {
                loss_sum += loss;
                grads.add_assign(g);
            }
            loss_count += results.len();
            grads.scale(1.0 / results.len() as f64);
            step(&mut model, &mut state, &grads, opt, epoch)?;
        }

        let val_ap50 = match val {
            Some(v) => Some(evaluate(&model, v, cfg)?.ap50),
            None => None,
        };
        let mean_train_loss = loss_sum / loss_count as f64;
        if !mean_train_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "mean training loss in epoch {epoch}"
            )));
        }
        log.push(EpochRecord {
            epoch,
            lr: learning_rate(opt, epoch),
            mean_train_loss,
            val_ap50,
            skipped_samples: skipped,
        });
    }

    Ok(TrainOutcome { model, log })
}

/// Loads `cfg.train_dir` (and `cfg.val_dir` if set), trains, and writes the
/// final model to `cfg.checkpoint_path` if set.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("train_dir is required".into()))?;
    let train_data = load_dataset(train_dir)?;
    if train_data.is_empty() {
        return Err(Error::EmptyDataset(train_dir.display().to_string()));
    }
    let val_data = cfg.val_dir.as_ref().map(load_dataset).transpose()?;
    let outcome = fit(&train_data, val_data.as_ref(), cfg)?;
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&outcome.model, path)?;
    }
    Ok(outcome)
}

/// Renders the epoch log as CSV. A missing validation AP50 is an empty field.
pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in log {
        let val = r.val_ap50.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.mean_train_loss, val, r.skipped_samples
        );
    }
    out
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, epoch_log_csv(log)).map_err(|e| Error::io(path, e))
}
