use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::GroundingSample;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    /// Proposals kept per sample, by descending `rpn_score`.
    pub top_k: usize,
    /// IoU a proposal needs with the ground-truth box to serve as the
    /// training target.
    pub min_gt_iou: f64,
    /// AP50 counts `IoU > 0.5` when set, `IoU >= 0.5` otherwise.
    pub strict_ap50: bool,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            top_k: 32,
            min_gt_iou: 0.5,
            strict_ap50: true,
            train_dir: None,
            val_dir: None,
            checkpoint_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_gt_iou) {
            return Err(Error::InvalidConfig(format!(
                "min_gt_iou must be in [0, 1], got {}",
                self.min_gt_iou
            )));
        }
        Ok(())
    }
}

/// Original indices of the `k` proposals with the highest `rpn_score`, in
/// their original relative order. Ties keep the earlier proposal.
pub fn top_k_indices(sample: &GroundingSample, k: usize) -> Vec<usize> {
    let n = sample.proposals.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort, so equal scores stay in list order.
    order.sort_by(|&a, &b| {
        sample.proposals[b]
            .rpn_score
            .total_cmp(&sample.proposals[a].rpn_score)
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Copy of `sample` restricted to its top-`k` proposals.
pub fn select_top_k(sample: &GroundingSample, k: usize) -> GroundingSample {
    let mut out = sample.clone();
    if k < sample.proposals.len() {
        out.proposals = top_k_indices(sample, k)
            .into_iter()
            .map(|i| sample.proposals[i].clone())
            .collect();
    }
    out
}
