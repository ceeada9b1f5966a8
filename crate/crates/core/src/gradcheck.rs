//! Randomized central-difference check of the closed-form gradients.
//!
//! The numeric side only evaluates the forward loss, so it shares no code
//! with the analytic backward pass beyond scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{backward, cosine_scores, loss, TransformModel};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub proposals: (usize, usize),
    pub d_img: (usize, usize),
    pub d_txt: (usize, usize),
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 7,
            proposals: (2, 64),
            d_img: (4, 128),
            d_txt: (4, 128),
            step: 1e-6,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub coordinates: usize,
    /// Largest error over all coordinates, in units of [`relative_error`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, abs_floor / rel_tol)`.
///
/// A value at most `rel_tol` means the pair agrees to `rel_tol` relatively or
/// to `abs_floor` absolutely.
pub fn relative_error(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(abs_floor / rel_tol);
    (analytic - numeric).abs() / scale
}

struct Trial {
    model: TransformModel,
    text: Vec<f64>,
    proposals: Vec<f64>,
    gt_index: usize,
}

fn random_trial(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Trial> {
    let p = rng.random_range(cfg.proposals.0..=cfg.proposals.1);
    let d_img = rng.random_range(cfg.d_img.0..=cfg.d_img.1);
    let d_txt = rng.random_range(cfg.d_txt.0..=cfg.d_txt.1);
    let init = TransformModel::init_uniform(d_img, d_txt, rng)?;
    let bias = (0..d_img)
        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let model = TransformModel::new(d_img, d_txt, init.weights().to_vec(), bias)?;
    let mut normals =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let text = normals(d_txt);
    let proposals = normals(p * d_img);
    let gt_index = rng.random_range(0..p);
    Ok(Trial {
        model,
        text,
        proposals,
        gt_index,
    })
}

fn forward_loss(t: &Trial, model: &TransformModel) -> Result<f64> {
    loss(&cosine_scores(model, &t.text, &t.proposals)?.with_gt(t.gt_index))
}

fn param(model: &TransformModel, k: usize, n_w: usize) -> f64 {
    if k < n_w {
        model.weights()[k]
    } else {
        model.bias()[k - n_w]
    }
}

fn set_param(model: &mut TransformModel, k: usize, n_w: usize, value: f64) {
    let (w, b) = model.params_mut();
    if k < n_w {
        w[k] = value;
    } else {
        b[k - n_w] = value;
    }
}

/// (max relative error, max absolute error, coordinates) for one trial.
fn check_trial(cfg: &GradCheckConfig, t: &Trial) -> Result<(f64, f64, usize)> {
    let (_, grads) = backward(&t.model, &t.text, &t.proposals, t.gt_index)?;
    let n_w = grads.d_weights.len();
    let n = n_w + grads.d_bias.len();

    let errors: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map_init(
            || t.model.clone(),
            |model, k| {
                let analytic = if k < n_w {
                    grads.d_weights[k]
                } else {
                    grads.d_bias[k - n_w]
                };
                let original = param(model, k, n_w);
                let (up, down) = (original + cfg.step, original - cfg.step);
                set_param(model, k, n_w, up);
                let f_up = forward_loss(t, model)?;
                set_param(model, k, n_w, down);
                let f_down = forward_loss(t, model)?;
                set_param(model, k, n_w, original);
                let numeric = (f_up - f_down) / (up - down);
                Ok((
                    relative_error(analytic, numeric, cfg.rel_tol, cfg.abs_floor),
                    (analytic - numeric).abs(),
                ))
            },
        )
        .collect::<Result<_>>()?;

    let max_rel = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_abs = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok((max_rel, max_abs, n))
}

/// Runs `cfg.trials` randomized configurations and reports the worst error.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let ranges = [cfg.proposals, cfg.d_img, cfg.d_txt];
    if cfg.trials == 0 || ranges.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
        return Err(Error::InvalidConfig(
            "gradcheck needs trials >= 1 and non-empty positive ranges".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        trials: cfg.trials,
        coordinates: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        passed: false,
    };
    for _ in 0..cfg.trials {
        let trial = random_trial(cfg, &mut rng)?;
        let (rel, abs, n) = check_trial(cfg, &trial)?;
        report.max_rel_err = report.max_rel_err.max(rel);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.coordinates += n;
    }
    report.passed = report.max_rel_err <= cfg.rel_tol;
    Ok(report)
}
