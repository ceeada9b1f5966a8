//! The learnable transformation layer and the cosine-softmax grounding loss.
//!
//! A sentence embedding `x` is mapped into image-feature space by an affine
//! layer, `t = W x + b`. Each proposal feature `a_i` is scored by its cosine
//! with `t`, and the scores are trained with softmax cross-entropy against the
//! ground-truth proposal. Gradients are closed-form.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Lower clamp on proposal-feature norms during scoring.
pub const PROPOSAL_NORM_FLOOR: f64 = 1e-12;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMSVGCK1";

/// Affine map from text-embedding space to image-feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformModel {
    d_img: usize,
    d_txt: usize,
    /// `d_img x d_txt`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TransformModel {
    pub fn new(d_img: usize, d_txt: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if d_img == 0 || d_txt == 0 {
            return Err(Error::ShapeMismatch("model dims must be at least 1".into()));
        }
        if weights.len() != d_img * d_txt || bias.len() != d_img {
            return Err(Error::ShapeMismatch(format!(
                "weights len {} / bias len {} do not fit d_img={d_img}, d_txt={d_txt}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            d_img,
            d_txt,
            weights,
            bias,
        })
    }

    pub fn zeros(d_img: usize, d_txt: usize) -> Result<Self> {
        Self::new(d_img, d_txt, vec![0.0; d_img * d_txt], vec![0.0; d_img])
    }

    /// Fan-in uniform initialization: `W ~ U(-1/sqrt(d_txt), 1/sqrt(d_txt))`, `b = 0`.
    pub fn init_uniform<R: Rng + ?Sized>(d_img: usize, d_txt: usize, rng: &mut R) -> Result<Self> {
        if d_img == 0 || d_txt == 0 {
            return Err(Error::ShapeMismatch("model dims must be at least 1".into()));
        }
        let bound = 1.0 / (d_txt as f64).sqrt();
        let weights = (0..d_img * d_txt)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(d_img, d_txt, weights, vec![0.0; d_img])
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Multiplies every parameter by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.d_img,
            self.d_txt,
            self.weights.iter().map(|w| w * factor).collect(),
            self.bias.iter().map(|b| b * factor).collect(),
        )
    }

    pub fn ensure_dims(&self, d_img: usize, d_txt: usize) -> Result<()> {
        if self.d_img != d_img || self.d_txt != d_txt {
            return Err(Error::ShapeMismatch(format!(
                "model is {}x{} (d_img x d_txt) but data is {d_img}x{d_txt}",
                self.d_img, self.d_txt
            )));
        }
        Ok(())
    }

    /// `W x + b`.
    pub fn transform(&self, text_feat: &[f64]) -> Result<Vec<f64>> {
        if text_feat.len() != self.d_txt {
            return Err(Error::ShapeMismatch(format!(
                "text feature has {} dims, model expects {}",
                text_feat.len(),
                self.d_txt
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.d_txt)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, text_feat) + b)
            .collect())
    }
}

/// Per-proposal cosine scores and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub gt_index: Option<usize>,
}

impl ScoreVector {
    /// Builds the softmax of `scores` with max-subtraction.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let max = max_of(&scores);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / total).collect();
        Self {
            scores,
            probs,
            gt_index: None,
        }
    }

    pub fn with_gt(mut self, gt_index: usize) -> Self {
        self.gt_index = Some(gt_index);
        self
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradients of the loss with respect to `W` (row-major) and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &TransformModel) -> Self {
        Self {
            d_weights: vec![0.0; model.weights.len()],
            d_bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.d_weights.iter_mut().chain(self.d_bias.iter_mut()) {
            *v *= factor;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_proposals(model: &TransformModel, proposal_feats: &[f64]) -> Result<usize> {
    if proposal_feats.is_empty() || !proposal_feats.len().is_multiple_of(model.d_img) {
        return Err(Error::ShapeMismatch(format!(
            "proposal matrix of {} values is not a non-empty P x {} matrix",
            proposal_feats.len(),
            model.d_img
        )));
    }
    Ok(proposal_feats.len() / model.d_img)
}

fn transformed_with_norm(model: &TransformModel, text_feat: &[f64]) -> Result<(Vec<f64>, f64)> {
    let t = model.transform(text_feat)?;
    let t_norm = norm(&t);
    if !t_norm.is_finite() {
        return Err(Error::NonFinite("transformed text vector".into()));
    }
    if t_norm == 0.0 {
        return Err(Error::DegenerateModel);
    }
    Ok((t, t_norm))
}

/// Cosine score of every proposal row against the transformed text vector.
/// `proposal_feats` is `P x d_img`, row-major.
pub fn cosine_scores(
    model: &TransformModel,
    text_feat: &[f64],
    proposal_feats: &[f64],
) -> Result<ScoreVector> {
    check_proposals(model, proposal_feats)?;
    let (t, t_norm) = transformed_with_norm(model, text_feat)?;
    let scores = proposal_feats
        .chunks_exact(model.d_img)
        .map(|a| {
            let a_norm = norm(a).max(PROPOSAL_NORM_FLOOR);
            (dot(a, &t) / (a_norm * t_norm)).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(ScoreVector::from_scores(scores))
}

/// Softmax cross-entropy of the ground-truth score, `-log softmax(S)[g]`,
/// evaluated as `log sum exp(S_i - m) - (S_g - m)` with `m = max S`.
pub fn loss(score_vec: &ScoreVector) -> Result<f64> {
    let g = score_vec.gt_index.ok_or(Error::MissingGtIndex)?;
    let scores = &score_vec.scores;
    if g >= scores.len() {
        return Err(Error::GtIndexOutOfRange {
            index: g,
            len: scores.len(),
        });
    }
    let m = max_of(scores);
    let log_sum: f64 = scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(log_sum - (scores[g] - m))
}

/// Loss and its gradient with respect to the model parameters.
pub fn backward(
    model: &TransformModel,
    text_feat: &[f64],
    proposal_feats: &[f64],
    gt_index: usize,
) -> Result<(f64, GradientSet)> {
    let sv = cosine_scores(model, text_feat, proposal_feats)?.with_gt(gt_index);
    let value = loss(&sv)?;
    let (t, t_norm) = transformed_with_norm(model, text_feat)?;

    // dL/dS_i = p_i - [i == g]
    // dL/dt = sum_i dL/dS_i * (a_i / (|a_i| |t|) - S_i t / |t|^2)
    let mut d_t = vec![0.0; model.d_img];
    let mut score_weighted = 0.0;
    for (i, a) in proposal_feats.chunks_exact(model.d_img).enumerate() {
        let d_s = sv.probs[i] - if i == gt_index { 1.0 } else { 0.0 };
        if d_s == 0.0 {
            continue;
        }
        let coef = d_s / (norm(a).max(PROPOSAL_NORM_FLOOR) * t_norm);
        for (d, x) in d_t.iter_mut().zip(a) {
            *d += coef * x;
        }
        score_weighted += d_s * sv.scores[i];
    }
    let radial = score_weighted / (t_norm * t_norm);
    for (d, x) in d_t.iter_mut().zip(&t) {
        *d -= radial * x;
    }

    let mut d_weights = Vec::with_capacity(model.weights.len());
    for &g in &d_t {
        d_weights.extend(text_feat.iter().map(|x| g * x));
    }
    Ok((
        value,
        GradientSet {
            d_weights,
            d_bias: d_t,
        },
    ))
}

/// Writes `magic | u32 d_img | u32 d_txt | W (f64) | b (f64)`, all little-endian.
pub fn save_checkpoint(model: &TransformModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 8 * (model.weights.len() + model.bias.len()));
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))
    };
    bytes.extend_from_slice(&dim(model.d_img)?.to_le_bytes());
    bytes.extend_from_slice(&dim(model.d_txt)?.to_le_bytes());
    for v in model.weights.iter().chain(&model.bias) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. When `expected` is given as `(d_img, d_txt)`, the
/// stored dims must match it.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<(usize, usize)>,
) -> Result<TransformModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let d_img = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d_txt = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n_params = d_img * d_txt + d_img;
    let expected_len = 16 + 8 * n_params;
    if bytes.len() != expected_len {
        return Err(bad(format!(
            "{} bytes on disk, expected {expected_len} for d_img={d_img}, d_txt={d_txt}",
            bytes.len()
        )));
    }
    if let Some((ei, et)) = expected {
        if (ei, et) != (d_img, d_txt) {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {} is {d_img}x{d_txt} (d_img x d_txt) but data is {ei}x{et}",
                path.display()
            )));
        }
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let weights: Vec<f64> = values.by_ref().take(d_img * d_txt).collect();
    let bias: Vec<f64> = values.collect();
    TransformModel::new(d_img, d_txt, weights, bias).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn identity_model(d: usize) -> TransformModel {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        TransformModel::new(d, d, w, vec![0.0; d]).unwrap()
    }

    #[test]
    fn transform_of_unit_vector_is_first_column() {
        // 4x3 weights: identity on top, zero row padded below.
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let m = TransformModel::new(4, 3, w, vec![0.0; 4]).unwrap();
        assert_eq!(
            m.transform(&[1.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn bias_only_model_is_constant() {
        let c = vec![0.5, -2.0, 3.0];
        let m = TransformModel::new(3, 2, vec![0.0; 6], c.clone()).unwrap();
        for x in [[1.0, 2.0], [-7.0, 0.25], [0.0, 0.0]] {
            assert_eq!(m.transform(&x).unwrap(), c);
        }
    }

    #[test]
    fn transform_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d_img, d_txt) = (4, 3);
        let w = random_vec(&mut rng, d_img * d_txt);
        let b = random_vec(&mut rng, d_img);
        let x = random_vec(&mut rng, d_txt);
        let m = TransformModel::new(d_img, d_txt, w.clone(), b.clone()).unwrap();
        let got = m.transform(&x).unwrap();
        for i in 0..d_img {
            let mut acc = 0.0;
            for j in 0..d_txt {
                acc += w[i * d_txt + j] * x[j];
            }
            acc += b[i];
            assert!(
                (got[i] - acc).abs() <= 1e-15,
                "row {i}: {} vs {acc}",
                got[i]
            );
        }
    }

    #[test]
    fn transform_rejects_wrong_dims() {
        let m = TransformModel::zeros(3, 2).unwrap();
        assert!(matches!(m.transform(&[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cosine_closed_forms() {
        let m = identity_model(2);
        let sv = cosine_scores(&m, &[1.0, 0.0], &[1.0, 0.0, 0.0, 3.0, 1.0, 1.0]).unwrap();
        assert_eq!(sv.scores[0], 1.0);
        assert_eq!(sv.scores[1], 0.0);
        assert!((sv.scores[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn zero_transformed_vector_is_degenerate() {
        let m = TransformModel::zeros(2, 2).unwrap();
        assert!(matches!(
            cosine_scores(&m, &[1.0, 1.0], &[1.0, 0.0]),
            Err(Error::DegenerateModel)
        ));
    }

    #[test]
    fn singleton_loss_is_zero() {
        let sv = ScoreVector::from_scores(vec![0.3]).with_gt(0);
        assert_eq!(loss(&sv).unwrap(), 0.0);
    }

    #[test]
    fn uniform_loss_is_log_p() {
        let sv = ScoreVector::from_scores(vec![0.25; 32]).with_gt(17);
        assert!((loss(&sv).unwrap() - 3.465_735_902_799_726_5).abs() < 1e-12);
    }

    #[test]
    fn two_way_loss_matches_high_precision_value() {
        // ln(1 + e^-2) evaluated at 60 significant digits:
        // 0.126928011042972496443726806358304431434333062808358357550141
        let sv = ScoreVector::from_scores(vec![2.0, 0.0]).with_gt(0);
        let v = loss(&sv).unwrap();
        assert!((v - 0.126_928_011_042_972_5).abs() < 1e-15, "{v}");
    }

    #[test]
    fn loss_needs_gt_index() {
        let sv = ScoreVector::from_scores(vec![0.1, 0.2]);
        assert!(matches!(loss(&sv), Err(Error::MissingGtIndex)));
        assert!(matches!(
            loss(&sv.with_gt(2)),
            Err(Error::GtIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn singleton_backward_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TransformModel::init_uniform(4, 3, &mut rng).unwrap();
        let (l, g) = backward(&m, &random_vec(&mut rng, 3), &random_vec(&mut rng, 4), 0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.d_weights.iter().chain(&g.d_bias).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_loss_is_bitwise_forward_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = TransformModel::init_uniform(6, 5, &mut rng).unwrap();
        let x = random_vec(&mut rng, 5);
        let a = random_vec(&mut rng, 6 * 7);
        let (l, _) = backward(&m, &x, &a, 4).unwrap();
        let forward = loss(&cosine_scores(&m, &x, &a).unwrap().with_gt(4)).unwrap();
        assert_eq!(l.to_bits(), forward.to_bits());
    }

    #[test]
    fn proposal_scaling_leaves_loss_and_score_grad_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = TransformModel::init_uniform(5, 4, &mut rng).unwrap();
        let x = random_vec(&mut rng, 4);
        let a = random_vec(&mut rng, 5 * 6);
        let a3: Vec<f64> = a.iter().map(|v| v * 3.0).collect();
        let s1 = cosine_scores(&m, &x, &a).unwrap().with_gt(2);
        let s3 = cosine_scores(&m, &x, &a3).unwrap().with_gt(2);
        assert!((loss(&s1).unwrap() - loss(&s3).unwrap()).abs() < 1e-14);
        for i in 0..6 {
            let d1 = s1.probs[i] - (i == 2) as u8 as f64;
            let d3 = s3.probs[i] - (i == 2) as u8 as f64;
            assert!((d1 - d3).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let p = rng.random_range(2..10);
            let d_img = rng.random_range(2..8);
            let d_txt = rng.random_range(2..8);
            let m = TransformModel::init_uniform(d_img, d_txt, &mut rng).unwrap();
            let x = random_vec(&mut rng, d_txt);
            let a = random_vec(&mut rng, p * d_img);
            let g = rng.random_range(0..p);
            let (_, grads) = backward(&m, &x, &a, g).unwrap();

            let eval = |model: &TransformModel| {
                loss(&cosine_scores(model, &x, &a).unwrap().with_gt(g)).unwrap()
            };
            let h = 1e-6;
            let n_w = d_img * d_txt;
            for k in 0..n_w + d_img {
                let bump = |delta: f64| {
                    let (mut w, mut b) = (m.weights().to_vec(), m.bias().to_vec());
                    if k < n_w {
                        w[k] += delta;
                    } else {
                        b[k - n_w] += delta;
                    }
                    eval(&TransformModel::new(d_img, d_txt, w, b).unwrap())
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = if k < n_w {
                    grads.d_weights[k]
                } else {
                    grads.d_bias[k - n_w]
                };
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-5,
                    "{analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TransformModel::init_uniform(7, 3, &mut rng).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 8 * (21 + 7));
        assert_eq!(load_checkpoint(&path, Some((7, 3))).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_truncation_and_dims() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let m = TransformModel::init_uniform(3, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let good = fs::read(&path).unwrap();

        assert!(matches!(
            load_checkpoint(&path, Some((3, 5))),
            Err(Error::ShapeMismatch(_))
        ));

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(Error::Checkpoint { .. })
        ));

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(Error::Checkpoint { .. })
        ));
    }
}
