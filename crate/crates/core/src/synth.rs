//! Synthetic datasets with a planted linear text-to-image relation.
//!
//! A hidden matrix `A` (`d_img x d_txt`, standard normal) links the two
//! modalities. For a latent direction `z` on the unit sphere the text feature
//! is `z + noise`, the referred proposal's feature is `Az/|Az| + noise`, and
//! every distractor is `Az'/|Az'|` for an independent `z'`. A transformation
//! close to `A` therefore grounds every command.
//!
//! Proposal boxes sit in distinct cells of a fixed grid, so they are pairwise
//! disjoint and the referred proposal's box is the ground-truth box.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, FeatureStore, GroundingSample, Proposal};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

const IMAGE_WIDTH: f64 = 1600.0;
const IMAGE_HEIGHT: f64 = 900.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Proposals per sample.
    pub p: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Lower bound of the referred proposal's `rpn_score` draw; 0 makes it
    /// indistinguishable from distractors.
    pub gt_score_floor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            p: 16,
            d_img: 64,
            d_txt: 32,
            noise_sigma: 0.05,
            seed: 42,
            gt_score_floor: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidConfig(format!(
                "p must be >= 2, got {}",
                self.p
            )));
        }
        if self.d_img < 2 || self.d_txt < 2 {
            return Err(Error::InvalidConfig(format!(
                "d_img and d_txt must be >= 2, got {} and {}",
                self.d_img, self.d_txt
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "n_train and n_test must be >= 1".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.gt_score_floor) {
            return Err(Error::InvalidConfig(format!(
                "gt_score_floor must be in [0, 1), got {}",
                self.gt_score_floor
            )));
        }
        Ok(())
    }
}

/// An in-memory split ready to be written with [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub samples: Vec<GroundingSample>,
    pub features: FeatureStore,
    /// Index of the referred proposal within each sample.
    pub gt_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// The planted map, `d_img x d_txt` row-major.
    pub planted: Vec<f64>,
    pub train: SynthSplit,
    pub test: SynthSplit,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    planted: Vec<f64>,
    cols: usize,
    rows: usize,
}

impl Generator<'_> {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn unit_sphere(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn planted_direction(&self, z: &[f64]) -> Vec<f64> {
        let az: Vec<f64> = self
            .planted
            .chunks_exact(self.cfg.d_txt)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let n = az.iter().map(|x| x * x).sum::<f64>().sqrt();
        az.into_iter().map(|x| x / n).collect()
    }

    fn add_noise(&mut self, v: &mut [f64]) {
        let sigma = self.cfg.noise_sigma;
        for x in v {
            *x += sigma * self.normal();
        }
    }

    fn cell_box(&mut self, cell: usize) -> BoundingBox {
        let (cw, ch) = (
            IMAGE_WIDTH / self.cols as f64,
            IMAGE_HEIGHT / self.rows as f64,
        );
        let (cx, cy) = (
            (cell % self.cols) as f64 * cw,
            (cell / self.cols) as f64 * ch,
        );
        let x_min = cx + cw * self.rng.random_range(0.02..0.3);
        let x_max = cx + cw * self.rng.random_range(0.7..0.98);
        let y_min = cy + ch * self.rng.random_range(0.02..0.3);
        let y_max = cy + ch * self.rng.random_range(0.7..0.98);
        BoundingBox::new(x_min, y_min, x_max, y_max).expect("cell boxes have positive area")
    }

    fn split(&mut self, prefix: &str, n: usize) -> Result<SynthSplit> {
        let (p, d_img, d_txt) = (self.cfg.p, self.cfg.d_img, self.cfg.d_txt);
        let mut samples = Vec::with_capacity(n);
        let mut gt_indices = Vec::with_capacity(n);
        let mut image = Vec::with_capacity(n * p * d_img);
        let mut text = Vec::with_capacity(n * d_txt);
        let mut cells: Vec<usize> = (0..self.cols * self.rows).collect();

        for i in 0..n {
            let z = self.unit_sphere(d_txt);
            let mut t = z.clone();
            self.add_noise(&mut t);
            text.extend(t.iter().map(|&v| v as f32 as f64));

            let gt = self.rng.random_range(0..p);
            cells.shuffle(&mut self.rng);
            let mut proposals = Vec::with_capacity(p);
            let mut gt_box = None;
            for (k, &cell) in cells[..p].iter().enumerate() {
                let bbox = self.cell_box(cell);
                let feat = if k == gt {
                    gt_box = Some(bbox);
                    let mut f = self.planted_direction(&z);
                    self.add_noise(&mut f);
                    f
                } else {
                    let other = self.unit_sphere(d_txt);
                    self.planted_direction(&other)
                };
                let rpn_score = if k == gt {
                    self.rng.random_range(self.cfg.gt_score_floor..=1.0)
                } else {
                    self.rng.random_range(0.0..=1.0)
                };
                proposals.push(Proposal {
                    bbox,
                    rpn_score,
                    feat_row: i * p + k,
                });
                image.extend(feat.iter().map(|&v| v as f32 as f64));
            }
            samples.push(GroundingSample {
                sample_id: format!("{prefix}-{i:06}"),
                command: String::new(),
                text_row: i,
                gt_box: gt_box.expect("gt index lies in 0..p"),
                proposals,
            });
            gt_indices.push(gt);
        }
        Ok(SynthSplit {
            samples,
            features: FeatureStore::new(d_img, d_txt, image, text)?,
            gt_indices,
        })
    }
}

/// Generates the train and test splits in memory. Deterministic in `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planted: Vec<f64> = (0..cfg.d_img * cfg.d_txt)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let cols = (cfg.p as f64).sqrt().ceil() as usize;
    let rows = cfg.p.div_ceil(cols);
    let mut g = Generator {
        cfg,
        rng,
        planted,
        cols,
        rows,
    };
    let train = g.split("train", cfg.n_train)?;
    let test = g.split("test", cfg.n_test)?;
    Ok(SynthData {
        planted: g.planted,
        train,
        test,
    })
}

/// Generates both splits and writes them to `out/train` and `out/test`.
pub fn write_synthetic(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let data = generate_synthetic(cfg)?;
    let out = out.as_ref();
    let (train_dir, test_dir) = (out.join("train"), out.join("test"));
    write_dataset(&train_dir, &data.train.samples, &data.train.features)?;
    write_dataset(&test_dir, &data.test.samples, &data.test.features)?;
    Ok((train_dir, test_dir))
}
