//! On-disk dataset of precomputed embeddings.
//!
//! A dataset directory holds four files:
//!
//! - `meta.json`: a [`DatasetMeta`] object.
//! - `manifest.jsonl`: one [`GroundingSample`] per line.
//! - `image_feats.bin`: `num_proposal_rows x d_img` f32 little-endian, row-major, no header.
//! - `text_feats.bin`: `num_samples x d_txt` f32 little-endian, row-major, no header.
//!
//! Features are widened to f64 on load. Rows that are all zeros or contain
//! non-finite values are rejected, since cosine scoring is undefined on them.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_FEATS_FILE: &str = "image_feats.bin";
pub const TEXT_FEATS_FILE: &str = "text_feats.bin";

pub const SCHEMA_VERSION: u32 = 1;
pub const DTYPE: &str = "f32";
pub const ENDIANNESS: &str = "little";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub d_img: usize,
    pub d_txt: usize,
    pub num_samples: usize,
    pub num_proposal_rows: usize,
    pub dtype: String,
    pub endianness: String,
}

impl DatasetMeta {
    pub fn new(d_img: usize, d_txt: usize, num_samples: usize, num_proposal_rows: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            d_img,
            d_txt,
            num_samples,
            num_proposal_rows,
            dtype: DTYPE.to_string(),
            endianness: ENDIANNESS.to_string(),
        }
    }

    fn validate(&self, file: &Path) -> Result<()> {
        let bad = |msg: String| Error::Malformed {
            file: file.to_path_buf(),
            line: 1,
            msg,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dtype != DTYPE {
            return Err(bad(format!(
                "dtype must be \"{DTYPE}\", got \"{}\"",
                self.dtype
            )));
        }
        if self.endianness != ENDIANNESS {
            return Err(bad(format!(
                "endianness must be \"{ENDIANNESS}\", got \"{}\"",
                self.endianness
            )));
        }
        if self.d_img == 0 || self.d_txt == 0 {
            return Err(bad("d_img and d_txt must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// A region proposal: its box, detector confidence, and image-feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub rpn_score: f64,
    pub feat_row: usize,
}

/// One command paired with its image's proposals and the referred box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSample {
    pub sample_id: String,
    pub command: String,
    pub text_row: usize,
    pub gt_box: BoundingBox,
    pub proposals: Vec<Proposal>,
}

impl GroundingSample {
    pub fn boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.proposals.iter().map(|p| &p.bbox)
    }
}

/// Row-major feature matrices in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    d_img: usize,
    d_txt: usize,
    image: Vec<f64>,
    text: Vec<f64>,
}

impl FeatureStore {
    pub fn new(d_img: usize, d_txt: usize, image: Vec<f64>, text: Vec<f64>) -> Result<Self> {
        if d_img == 0 || d_txt == 0 {
            return Err(Error::ShapeMismatch(
                "feature dims must be at least 1".into(),
            ));
        }
        if !image.len().is_multiple_of(d_img) || !text.len().is_multiple_of(d_txt) {
            return Err(Error::ShapeMismatch(format!(
                "feature buffers ({}, {}) are not multiples of dims ({d_img}, {d_txt})",
                image.len(),
                text.len()
            )));
        }
        Ok(Self {
            d_img,
            d_txt,
            image,
            text,
        })
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    pub fn num_image_rows(&self) -> usize {
        self.image.len() / self.d_img
    }

    pub fn num_text_rows(&self) -> usize {
        self.text.len() / self.d_txt
    }

    pub fn image_row(&self, row: usize) -> &[f64] {
        &self.image[row * self.d_img..(row + 1) * self.d_img]
    }

    pub fn text_row(&self, row: usize) -> &[f64] {
        &self.text[row * self.d_txt..(row + 1) * self.d_txt]
    }

    /// Proposal features of `sample`, stacked row-major as `P x d_img`.
    pub fn proposal_matrix(&self, sample: &GroundingSample) -> Vec<f64> {
        let mut out = Vec::with_capacity(sample.proposals.len() * self.d_img);
        for p in &sample.proposals {
            out.extend_from_slice(self.image_row(p.feat_row));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<GroundingSample>,
    pub features: FeatureStore,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads and cross-validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();

    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Malformed {
        file: meta_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    meta.validate(&meta_path)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let samples = read_manifest(&manifest_path, &meta)?;

    let image_path = dir.join(IMAGE_FEATS_FILE);
    let image = read_f32_matrix(&image_path, meta.num_proposal_rows, meta.d_img)?;
    let text_path = dir.join(TEXT_FEATS_FILE);
    let text = read_f32_matrix(&text_path, meta.num_samples, meta.d_txt)?;

    let features = FeatureStore::new(meta.d_img, meta.d_txt, image, text)?;
    Ok(Dataset {
        meta,
        samples,
        features,
    })
}

fn read_manifest(path: &Path, meta: &DatasetMeta) -> Result<Vec<GroundingSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, msg: String| Error::Malformed {
        file: path.to_path_buf(),
        line,
        msg,
    };

    let mut samples = Vec::with_capacity(meta.num_samples);
    let mut total_proposals = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GroundingSample =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;

        if sample.proposals.is_empty() {
            return Err(malformed(
                line_no,
                format!("sample `{}` has no proposals", sample.sample_id),
            ));
        }
        if sample.text_row >= meta.num_samples {
            return Err(Error::RowOutOfRange {
                file: path.to_path_buf(),
                sample_id: sample.sample_id,
                row: sample.text_row,
                rows: meta.num_samples,
            });
        }
        let mut seen = HashSet::with_capacity(sample.proposals.len());
        for p in &sample.proposals {
            if p.feat_row >= meta.num_proposal_rows {
                return Err(Error::RowOutOfRange {
                    file: path.to_path_buf(),
                    sample_id: sample.sample_id.clone(),
                    row: p.feat_row,
                    rows: meta.num_proposal_rows,
                });
            }
            if !seen.insert(p.feat_row) {
                return Err(malformed(
                    line_no,
                    format!(
                        "sample `{}` lists feat_row {} more than once",
                        sample.sample_id, p.feat_row
                    ),
                ));
            }
            if !(0.0..=1.0).contains(&p.rpn_score) {
                return Err(malformed(
                    line_no,
                    format!(
                        "sample `{}` has rpn_score {} outside [0, 1]",
                        sample.sample_id, p.rpn_score
                    ),
                ));
            }
        }
        total_proposals += sample.proposals.len();
        samples.push(sample);
    }

    if samples.len() != meta.num_samples {
        return Err(Error::DimensionMismatch {
            file: path.to_path_buf(),
            msg: format!(
                "{} records, but meta.json declares num_samples = {}",
                samples.len(),
                meta.num_samples
            ),
        });
    }
    if total_proposals != meta.num_proposal_rows {
        return Err(Error::DimensionMismatch {
            file: path.to_path_buf(),
            msg: format!(
                "{total_proposals} proposals in total, but meta.json declares num_proposal_rows = {}",
                meta.num_proposal_rows
            ),
        });
    }
    Ok(samples)
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::DimensionMismatch {
            file: path.to_path_buf(),
            msg: format!(
                "{} bytes on disk, expected {expected} ({rows} rows x {cols} cols x 4 bytes)",
                bytes.len()
            ),
        });
    }

    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    for (row, chunk) in values.chunks_exact(cols).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRow {
                file: path.to_path_buf(),
                row,
            });
        }
        if chunk.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNormRow {
                file: path.to_path_buf(),
                row,
            });
        }
    }
    Ok(values)
}

/// Writes `samples` and `features` as a dataset directory, narrowing features
/// to f32. Returns the metadata that was written.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[GroundingSample],
    features: &FeatureStore,
) -> Result<DatasetMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let num_proposal_rows = features.num_image_rows();
    let meta = DatasetMeta::new(
        features.d_img(),
        features.d_txt(),
        features.num_text_rows(),
        num_proposal_rows,
    );
    if samples.len() != meta.num_samples {
        return Err(Error::ShapeMismatch(format!(
            "{} samples but {} text rows",
            samples.len(),
            meta.num_samples
        )));
    }

    let meta_path = dir.join(META_FILE);
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_json.push('\n');
    fs::write(&meta_path, meta_json).map_err(|e| Error::io(&meta_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    write_lines(&manifest_path, samples)?;

    write_f32(&dir.join(IMAGE_FEATS_FILE), &features.image)?;
    write_f32(&dir.join(TEXT_FEATS_FILE), &features.text)?;
    Ok(meta)
}

/// Writes each item as one compact JSON line.
pub(crate) fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
