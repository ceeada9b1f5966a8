use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{top_k_indices, RunConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{hit_at_50_with, BoundingBox};
use crate::model::{cosine_scores, TransformModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub predicted_box: BoundingBox,
    /// Index into the sample's full proposal list.
    pub predicted_index: usize,
    pub max_score: f64,
    pub hit: bool,
    /// Whether any kept proposal would have been a hit.
    pub oracle_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub oracle_recall: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SamplePrediction>,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

fn predict_samples(
    model: &TransformModel,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<Vec<SamplePrediction>> {
    model.ensure_dims(data.meta.d_img, data.meta.d_txt)?;
    data.samples
        .par_iter()
        .map(|sample| {
            let kept = top_k_indices(sample, cfg.top_k);
            let mut feats = Vec::with_capacity(kept.len() * model.d_img());
            for &i in &kept {
                feats.extend_from_slice(data.features.image_row(sample.proposals[i].feat_row));
            }
            let text = data.features.text_row(sample.text_row);
            let sv = cosine_scores(model, text, &feats)?;
            let best = sv.argmax();
            let predicted_index = kept[best];
            let predicted_box = sample.proposals[predicted_index].bbox;
            let oracle_hit = kept.iter().any(|&i| {
                hit_at_50_with(&sample.proposals[i].bbox, &sample.gt_box, cfg.strict_ap50)
            });
            Ok(SamplePrediction {
                sample_id: sample.sample_id.clone(),
                predicted_box,
                predicted_index,
                max_score: sv.scores[best],
                hit: hit_at_50_with(&predicted_box, &sample.gt_box, cfg.strict_ap50),
                oracle_hit,
            })
        })
        .collect()
}

/// Scores every sample's top-k proposals and reports AP50 and oracle recall.
pub fn evaluate(model: &TransformModel, data: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation data".into()));
    }
    let per_sample = predict_samples(model, data, cfg)?;
    let n = per_sample.len() as f64;
    let hits = per_sample.iter().filter(|s| s.hit).count() as f64;
    let oracle = per_sample.iter().filter(|s| s.oracle_hit).count() as f64;
    Ok(EvalReport {
        ap50: hits / n,
        oracle_recall: oracle / n,
        n_samples: per_sample.len(),
        per_sample,
    })
}

pub fn evaluate_dir(
    model: &TransformModel,
    dir: impl AsRef<Path>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let dir = dir.as_ref();
    let data = load_dataset(dir)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    evaluate(model, &data, cfg)
}

/// Highest-scoring box per sample, in manifest order.
pub fn predict(model: &TransformModel, data: &Dataset, cfg: &RunConfig) -> Result<Vec<Prediction>> {
    Ok(predict_samples(model, data, cfg)?
        .into_iter()
        .map(|s| Prediction {
            sample_id: s.sample_id,
            bbox: s.predicted_box,
            score: s.max_score,
        })
        .collect())
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    crate::dataset::write_lines(path.as_ref(), predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::synth::{generate_synthetic, SynthConfig};
    use rand::SeedableRng;

    fn synth_test_split(noise: f64, seed: u64) -> (Dataset, Vec<f64>, SynthConfig) {
        let cfg = SynthConfig {
            n_train: 1,
            n_test: 200,
            p: 16,
            d_img: 24,
            d_txt: 8,
            noise_sigma: noise,
            seed,
            gt_score_floor: 0.0,
        };
        let data = generate_synthetic(&cfg).unwrap();
        let meta = DatasetMeta::new(cfg.d_img, cfg.d_txt, cfg.n_test, cfg.n_test * cfg.p);
        (
            Dataset {
                meta,
                samples: data.test.samples,
                features: data.test.features,
            },
            data.planted,
            cfg,
        )
    }

    #[test]
    fn planted_model_on_noiseless_data_is_perfect() {
        let (ds, planted, cfg) = synth_test_split(0.0, 4);
        let model =
            TransformModel::new(cfg.d_img, cfg.d_txt, planted, vec![0.0; cfg.d_img]).unwrap();
        let report = evaluate(&model, &ds, &RunConfig::default()).unwrap();
        assert_eq!(report.ap50, 1.0);
        assert_eq!(report.oracle_recall, 1.0);
        assert_eq!(report.n_samples, 200);
    }

    #[test]
    fn ap50_never_exceeds_oracle_recall_and_is_mean_of_hits() {
        let (ds, _, cfg) = synth_test_split(0.05, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let model = TransformModel::init_uniform(cfg.d_img, cfg.d_txt, &mut rng).unwrap();
        for k in [1, 4, 8, 16] {
            let run = RunConfig {
                top_k: k,
                ..RunConfig::default()
            };
            let r = evaluate(&model, &ds, &run).unwrap();
            assert!(r.ap50 <= r.oracle_recall);
            let mean = r.per_sample.iter().filter(|s| s.hit).count() as f64 / r.n_samples as f64;
            assert_eq!(r.ap50, mean);
        }
    }

    #[test]
    fn predictions_come_from_the_proposal_list_in_order() {
        let (ds, _, cfg) = synth_test_split(0.05, 9);
        let model = TransformModel::init_uniform(
            cfg.d_img,
            cfg.d_txt,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let preds = predict(&model, &ds, &RunConfig::default()).unwrap();
        assert_eq!(preds.len(), ds.len());
        for (p, s) in preds.iter().zip(&ds.samples) {
            assert_eq!(p.sample_id, s.sample_id);
            assert!(s.proposals.iter().any(|q| q.bbox == p.bbox));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (ds, _, _) = synth_test_split(0.05, 10);
        let model = TransformModel::zeros(3, 3).unwrap();
        assert!(matches!(
            evaluate(&model, &ds, &RunConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
