//! Dataset directory layout and annotation schema.
//!
//! A split lives under `<root>/<split>/` as `images/*.ppm`, `masks/*.pgm`,
//! optional `weak_masks/*.pgm` (0=bg, 128=unknown, 255=fg), plus
//! `annotations.json` (record list) and `meta.json` (generator echo).

use crate::pgm::{self, GrayImage, RgbImage};
use crate::synth::{generate_scene, SceneSpec};
use crate::weak::{self, ClickAnnotation};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Schema { path: PathBuf, source: serde_json::Error },
    #[error("record {image_id}: mask file {path} is missing")]
    MissingMask { image_id: String, path: PathBuf },
    #[error("scene generation failed: {0}")]
    Synth(#[from] crate::synth::SynthError),
    #[error("record {image_id}: {source}")]
    Annotation { image_id: String, source: weak::WeakError },
    #[error("split {0} contains no records")]
    EmptySplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub center: [usize; 2],
    pub top_left: [usize; 2],
    pub bottom_right: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_mask_path: Option<String>,
}

impl AnnotationRecord {
    pub fn clicks(&self) -> ClickAnnotation {
        ClickAnnotation {
            center: (self.center[0], self.center[1]),
            top_left: (self.top_left[0], self.top_left[1]),
            bottom_right: (self.bottom_right[0], self.bottom_right[1]),
        }
    }
}

/// Generator echo stored next to the annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: String,
    pub count: usize,
    pub index_offset: usize,
    pub scene: SceneSpec,
}

/// One loaded record. `mask` is present when the record references a mask
/// file; `weak_labels` is the full-resolution {1,0,-1} map when the split
/// has been weak-annotated.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub image_id: String,
    pub image: RgbImage,
    pub tokens: Vec<String>,
    pub clicks: ClickAnnotation,
    pub mask: Option<GrayImage>,
    pub weak_labels: Option<Vec<i8>>,
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| DataError::Schema { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|source| DataError::Schema { path: path.to_path_buf(), source })
}

/// Generates `count` samples with indices starting at `index_offset` and
/// writes the complete split. Disjoint index ranges keep splits disjoint.
pub fn generate_split(
    root: &Path,
    split: &str,
    scene: &SceneSpec,
    count: usize,
    index_offset: usize,
) -> Result<(), DataError> {
    let dir = split_dir(root, split);
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    std::fs::create_dir_all(&masks).map_err(io_err(&masks))?;

    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        let index = index_offset + k;
        let sample = generate_scene(scene, index)?;
        let image_id = format!("{split}_{index:05}");
        let image_path = images.join(format!("{image_id}.ppm"));
        let mask_rel = format!("masks/{image_id}.pgm");
        pgm::write_ppm(&image_path, &sample.image).map_err(io_err(&image_path))?;
        let mask_path = dir.join(&mask_rel);
        pgm::write_pgm(&mask_path, &sample.mask).map_err(io_err(&mask_path))?;
        let clicks = weak::derive_clicks(&sample.mask)
            .map_err(|source| DataError::Annotation { image_id: image_id.clone(), source })?;
        records.push(AnnotationRecord {
            image_id,
            tokens: sample.tokens,
            center: [clicks.center.0, clicks.center.1],
            top_left: [clicks.top_left.0, clicks.top_left.1],
            bottom_right: [clicks.bottom_right.0, clicks.bottom_right.1],
            full_mask_path: Some(mask_rel),
        });
    }
    write_json(&dir.join("annotations.json"), &records)?;
    write_json(
        &dir.join("meta.json"),
        &SplitMeta { split: split.to_string(), count, index_offset, scene: *scene },
    )
}

/// Loads every record of a split. Masks referenced by the annotations must
/// exist; weak masks are loaded when present.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<DatasetSample>, DataError> {
    let dir = split_dir(root, split);
    let ann_path = dir.join("annotations.json");
    let records: Vec<AnnotationRecord> = read_json(&ann_path)?;
    if records.is_empty() {
        return Err(DataError::EmptySplit(split.to_string()));
    }
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let image_path = dir.join("images").join(format!("{}.ppm", rec.image_id));
        let image = pgm::read_ppm(&image_path).map_err(io_err(&image_path))?;
        let mask = match &rec.full_mask_path {
            Some(rel) => {
                let path = dir.join(rel);
                if !path.exists() {
                    return Err(DataError::MissingMask { image_id: rec.image_id, path });
                }
                Some(pgm::read_pgm(&path).map_err(io_err(&path))?)
            }
            None => None,
        };
        let weak_path = dir.join("weak_masks").join(format!("{}.pgm", rec.image_id));
        let weak_labels = if weak_path.exists() {
            let img = pgm::read_pgm(&weak_path).map_err(io_err(&weak_path))?;
            Some(img.pixels.iter().map(|&b| weak::byte_to_weak_label(b)).collect())
        } else {
            None
        };
        samples.push(DatasetSample {
            clicks: rec.clicks(),
            image_id: rec.image_id,
            image,
            tokens: rec.tokens,
            mask,
            weak_labels,
        });
    }
    Ok(samples)
}

/// Derives clicks, superpixels, and weak label masks for every record of a
/// split, rewriting `annotations.json` and filling `weak_masks/`. Records
/// whose mask is empty are skipped; the skip count is returned. Re-running
/// reproduces identical files.
pub fn annotate_split_weak(
    root: &Path,
    split: &str,
    n_segments: usize,
    compactness: f64,
    iterations: usize,
) -> Result<usize, DataError> {
    let dir = split_dir(root, split);
    let samples = read_split(root, split)?;
    let weak_dir = dir.join("weak_masks");
    std::fs::create_dir_all(&weak_dir).map_err(io_err(&weak_dir))?;

    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for s in &samples {
        let Some(mask) = &s.mask else {
            skipped += 1;
            continue;
        };
        let clicks = match weak::derive_clicks(mask) {
            Ok(c) => c,
            Err(weak::WeakError::EmptyMask) => {
                skipped += 1;
                continue;
            }
            Err(source) => {
                return Err(DataError::Annotation { image_id: s.image_id.clone(), source })
            }
        };
        let sp = weak::compute_superpixels(&s.image, n_segments, compactness, iterations)
            .map_err(|source| DataError::Annotation { image_id: s.image_id.clone(), source })?;
        let labels = weak::expand_weak_labels(&clicks, &sp);
        let mut img = GrayImage::new(s.image.width, s.image.height);
        for (p, &l) in img.pixels.iter_mut().zip(&labels) {
            *p = weak::weak_label_to_byte(l);
        }
        let path = weak_dir.join(format!("{}.pgm", s.image_id));
        pgm::write_pgm(&path, &img).map_err(io_err(&path))?;
        records.push(AnnotationRecord {
            image_id: s.image_id.clone(),
            tokens: s.tokens.clone(),
            center: [clicks.center.0, clicks.center.1],
            top_left: [clicks.top_left.0, clicks.top_left.1],
            bottom_right: [clicks.bottom_right.0, clicks.bottom_right.1],
            full_mask_path: Some(format!("masks/{}.pgm", s.image_id)),
        });
    }
    write_json(&dir.join("annotations.json"), &records)?;
    Ok(skipped)
}

/// Block-mean downsampling of an RGB image to planar `[3, h/f, w/f]` doubles
/// in [0,1]; the gated-CRF kernel reads colors at mask resolution.
pub fn downsample_rgb_mean(img: &RgbImage, factor: usize) -> Vec<f64> {
    let (h, w) = (img.height / factor, img.width / factor);
    let mut out = vec![0.0; 3 * h * w];
    let inv = 1.0 / (factor * factor) as f64 / 255.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let px = img.get(y * factor + dy, x * factor + dx);
                    for c in 0..3 {
                        acc[c] += px[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                out[c * h * w + y * w + x] = acc[c] * inv;
            }
        }
    }
    out
}
