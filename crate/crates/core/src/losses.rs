//! Training objectives: position-target construction with focal loss, mask
//! downsampling with Dice loss, partial cross-entropy over sparse labels,
//! the gated pairwise smoothness term, and their combinations.

use crate::config::{LevelSpec, RunConfig};
use crate::tape::{GcrfKernel, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("object mask is empty")]
    EmptyMask,
    #[error("mask side {0} is not divisible by 4")]
    Indivisible(usize),
    #[error("no predicted masks to score")]
    NoPredictions,
}

/// Binary view of a grayscale mask (nonzero = foreground).
pub fn mask_bits(mask: &crate::pgm::GrayImage) -> Vec<bool> {
    mask.pixels.iter().map(|&p| p != 0).collect()
}

/// Per-level center maps: the mask's center of mass is mapped to each grid
/// by stride, rounded to the nearest cell, and a border-clipped 3x3 block
/// around it is set to 1.
pub fn make_position_targets(
    mask: &[bool],
    height: usize,
    width: usize,
    levels: &[LevelSpec],
) -> Result<Vec<Vec<u8>>, LossError> {
    assert_eq!(mask.len(), height * width);
    let mut sum_r = 0.0;
    let mut sum_c = 0.0;
    let mut n = 0usize;
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] {
                sum_r += r as f64;
                sum_c += c as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(targets_around(sum_r / n as f64, sum_c / n as f64, levels))
}

/// Per-level center maps around a known center pixel, for click-supervised
/// position training.
pub fn make_position_targets_from_point(
    center: (usize, usize),
    levels: &[LevelSpec],
) -> Vec<Vec<u8>> {
    targets_around(center.0 as f64, center.1 as f64, levels)
}

fn targets_around(com_r: f64, com_c: f64, levels: &[LevelSpec]) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let size = level.size;
        let cell = |com: f64| -> usize {
            let c = (com / level.stride as f64).round() as isize;
            c.clamp(0, size as isize - 1) as usize
        };
        let (cr, cc) = (cell(com_r), cell(com_c));
        let mut grid = vec![0u8; size * size];
        for r in cr.saturating_sub(1)..=(cr + 1).min(size - 1) {
            for c in cc.saturating_sub(1)..=(cc + 1).min(size - 1) {
                grid[r * size + c] = 1;
            }
        }
        out.push(grid);
    }
    out
}

/// Focal loss per level (mean over cells), averaged over levels.
pub fn focal_position_loss(
    t: &mut Tape,
    heatmaps: &[Var],
    targets: &[Vec<u8>],
    alpha: f64,
    gamma: f64,
) -> Var {
    assert_eq!(heatmaps.len(), targets.len());
    assert!(!heatmaps.is_empty());
    let per_level: Vec<Var> = heatmaps
        .iter()
        .zip(targets)
        .map(|(&hm, tg)| t.focal_loss(hm, tg, alpha, gamma))
        .collect();
    t.mean_n(&per_level)
}

/// Quarter-resolution binary target: block-average the {0,1} mask (the
/// antialiased resize at an integer factor) and threshold at 0.5.
pub fn downsample_gt_mask(
    mask: &[bool],
    height: usize,
    width: usize,
) -> Result<Vec<f64>, LossError> {
    if height % 4 != 0 {
        return Err(LossError::Indivisible(height));
    }
    if width % 4 != 0 {
        return Err(LossError::Indivisible(width));
    }
    assert_eq!(mask.len(), height * width);
    let (oh, ow) = (height / 4, width / 4);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for dr in 0..4 {
                for dc in 0..4 {
                    if mask[(r * 4 + dr) * width + c * 4 + dc] {
                        acc += 1.0;
                    }
                }
            }
            out[r * ow + c] = if acc / 16.0 >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Overlap loss per predicted mask against the shared target, averaged over
/// masks. `probs` is `[k, h, w]`.
pub fn dice_loss(t: &mut Tape, probs: Var, target: &[f64], eps: f64) -> Result<Var, LossError> {
    if t.data(probs).shape()[0] == 0 {
        return Err(LossError::NoPredictions);
    }
    Ok(t.dice_loss(probs, target, eps))
}

/// Cross-entropy over pixels labeled 0/1 only, averaged over masks. The
/// flag is true when no pixel carried a label (loss is 0 then).
pub fn partial_ce_loss(t: &mut Tape, probs: Var, labels: &[i8]) -> (Var, bool) {
    let (loss, has_labels) = t.pce_loss(probs, labels);
    (loss, !has_labels)
}

/// Pairwise smoothness energy over a square window, gated and normalized by
/// the valid pair count. `rgb_quarter` is the image at mask resolution.
pub fn gated_crf_loss(
    t: &mut Tape,
    probs: Var,
    rgb_quarter: &[f64],
    gate: &[bool],
    cfg: &RunConfig,
) -> Var {
    let shape = t.data(probs).shape().to_vec();
    let kernel = GcrfKernel::new(
        rgb_quarter,
        gate,
        shape[1],
        shape[2],
        cfg.crf_radius,
        cfg.crf_sigma_xy,
        cfg.crf_sigma_rgb,
        cfg.crf_kernel_weight,
    );
    t.gcrf_loss(probs, &kernel)
}

/// Scalar summary of one training objective evaluation.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossReport {
    pub total: f64,
    pub pos: f64,
    pub seg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crf: Option<f64>,
}

/// Fully-supervised objective: position + segmentation.
pub fn total_loss_full(t: &mut Tape, pos: Var, seg: Var) -> (Var, LossReport) {
    let total = t.add(pos, seg);
    let report = LossReport {
        total: t.value(total),
        pos: t.value(pos),
        seg: t.value(seg),
        crf: None,
    };
    (total, report)
}

/// Weakly-supervised objective: position + segmentation + weighted
/// smoothness.
pub fn total_loss_weak(
    t: &mut Tape,
    pos: Var,
    seg: Var,
    crf: Var,
    lambda_w: f64,
) -> (Var, LossReport) {
    let scaled = t.affine(crf, lambda_w, 0.0);
    let ps = t.add(pos, seg);
    let total = t.add(ps, scaled);
    let report = LossReport {
        total: t.value(total),
        pos: t.value(pos),
        seg: t.value(seg),
        crf: Some(t.value(crf)),
    };
    (total, report)
}
