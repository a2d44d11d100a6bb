//! Candidate-mask suppression and merging, plus evaluation metrics.

use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot evaluate an empty sample set")]
    EmptySet,
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One candidate mask at quarter resolution with its confidence.
#[derive(Clone, Debug)]
pub struct ScoredMask {
    pub soft: Vec<f64>,
    pub binary: Vec<bool>,
    pub score: f64,
    pub height: usize,
    pub width: usize,
}

impl ScoredMask {
    /// Binarizes the soft mask at `threshold` (>= keeps the pixel).
    pub fn new(soft: Vec<f64>, height: usize, width: usize, score: f64, threshold: f64) -> Self {
        assert_eq!(soft.len(), height * width);
        let binary = soft.iter().map(|&p| p >= threshold).collect();
        ScoredMask { soft, binary, score, height, width }
    }
}

/// Intersection over union of two equally-shaped binary masks. Two empty
/// masks agree perfectly and score 1.0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "iou needs equally shaped masks");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Gaussian-decayed scores, aligned with the input order. Candidates are
/// ranked by descending score (stable, so ties keep input order); each mask
/// is decayed by the most suppressive higher-ranked overlap:
/// min_i exp(-(iou(i,j)^2 - c_i^2) / sigma), with c_i the strongest overlap
/// onto i from above.
pub fn matrix_nms(candidates: &[ScoredMask], sigma: f64) -> Vec<f64> {
    let n = candidates.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| candidates[b].score.partial_cmp(&candidates[a].score).unwrap());

    let mut overlaps = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            overlaps[a * n + b] = iou(&candidates[order[a]].binary, &candidates[order[b]].binary);
        }
    }
    let mut compensation = vec![0.0f64; n];
    for i in 0..n {
        for k in 0..i {
            compensation[i] = compensation[i].max(overlaps[k * n + i]);
        }
    }
    let mut decayed = vec![0.0; n];
    for j in 0..n {
        let mut decay = 1.0f64;
        for i in 0..j {
            let o = overlaps[i * n + j];
            decay = decay.min((-(o * o - compensation[i] * compensation[i]) / sigma).exp());
        }
        decayed[order[j]] = candidates[order[j]].score * decay;
    }
    decayed
}

/// The surviving mask after suppression: the single candidate with the
/// highest decayed score (first on ties), at quarter and full resolution.
#[derive(Clone, Debug)]
pub struct MergedMask {
    pub index: usize,
    pub quarter: Vec<bool>,
    pub full: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// Picks the best-decayed candidate and nearest-neighbor upsamples it by
/// `factor`. None when no candidate exists; the caller then re-predicts
/// from a fallback kernel.
pub fn merge_masks(
    candidates: &[ScoredMask],
    decayed: &[f64],
    factor: usize,
) -> Option<MergedMask> {
    assert_eq!(candidates.len(), decayed.len());
    let best = (0..candidates.len()).max_by(|&a, &b| {
        decayed[a]
            .partial_cmp(&decayed[b])
            .unwrap()
            .then(b.cmp(&a))
    })?;
    let c = &candidates[best];
    Some(MergedMask {
        index: best,
        quarter: c.binary.clone(),
        full: upsample_mask_nn(&c.binary, c.height, c.width, factor),
        height: c.height * factor,
        width: c.width * factor,
    })
}

/// Nearest-neighbor integer upsample of a binary mask.
pub fn upsample_mask_nn(mask: &[bool], h: usize, w: usize, factor: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = mask[(y / factor) * w + x / factor];
        }
    }
    out
}

/// Thresholds for the precision-at-overlap metrics.
pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SampleIou {
    pub id: String,
    pub iou: f64,
}

/// Aggregate segmentation quality over an evaluation split.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    #[serde(rename = "prec@0.5")]
    pub prec_50: f64,
    #[serde(rename = "prec@0.6")]
    pub prec_60: f64,
    #[serde(rename = "prec@0.7")]
    pub prec_70: f64,
    #[serde(rename = "prec@0.8")]
    pub prec_80: f64,
    #[serde(rename = "prec@0.9")]
    pub prec_90: f64,
    pub samples: Vec<SampleIou>,
}

impl EvalReport {
    pub fn prec_values(&self) -> [f64; 5] {
        [self.prec_50, self.prec_60, self.prec_70, self.prec_80, self.prec_90]
    }
}

/// Mean IoU and the fraction of samples strictly above each overlap
/// threshold.
pub fn evaluate(samples: Vec<SampleIou>) -> Result<EvalReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let n = samples.len() as f64;
    let miou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
    let prec = |x: f64| samples.iter().filter(|s| s.iou > x).count() as f64 / n;
    Ok(EvalReport {
        miou,
        prec_50: prec(0.5),
        prec_60: prec(0.6),
        prec_70: prec(0.7),
        prec_80: prec(0.8),
        prec_90: prec(0.9),
        samples,
    })
}

/// Scores aligned prediction/target mask pairs and aggregates them.
pub fn evaluate_masks(
    pairs: &[(String, Vec<bool>, Vec<bool>)],
) -> Result<EvalReport, MetricsError> {
    evaluate(
        pairs
            .iter()
            .map(|(id, pred, gt)| SampleIou { id: id.clone(), iou: iou(pred, gt) })
            .collect(),
    )
}

/// Writes the per-sample IoUs as `image_id,iou` rows.
pub fn write_iou_csv(path: &Path, samples: &[SampleIou]) -> Result<(), MetricsError> {
    let wrap = |source: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(wrap)?;
    let mut buf = String::from("image_id,iou\n");
    for s in samples {
        buf.push_str(&format!("{},{:.6}\n", s.id, s.iou));
    }
    f.write_all(buf.as_bytes()).map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8], h: usize, w: usize, score: f64) -> ScoredMask {
        let soft: Vec<f64> = bits.iter().map(|&b| if b == 1 { 0.9 } else { 0.1 }).collect();
        ScoredMask::new(soft, h, w, score, 0.5)
    }

    #[test]
    fn iou_counts_pixels() {
        let a = [true, true, false, false];
        let b = [true, false, false, false];
        assert_eq!(iou(&a, &b), 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]), 1.0);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_identity_bound(bits_a in proptest::collection::vec(any::<bool>(), 16),
                                               bits_b in proptest::collection::vec(any::<bool>(), 16)) {
            let ab = iou(&bits_a, &bits_b);
            prop_assert!((ab - iou(&bits_b, &bits_a)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                prop_assert_eq!(&bits_a, &bits_b);
            }
            prop_assert_eq!(iou(&bits_a, &bits_a), 1.0);
        }
    }

    #[test]
    fn single_candidate_keeps_its_score() {
        let c = mask(&[1, 1, 0, 0], 2, 2, 0.7);
        assert_eq!(matrix_nms(&[c], 2.0), vec![0.7]);
        assert!(matrix_nms(&[], 2.0).is_empty());
    }

    #[test]
    fn identical_pair_decays_by_closed_form() {
        let a = mask(&[1, 1, 0, 0], 2, 2, 0.9);
        let b = mask(&[1, 1, 0, 0], 2, 2, 0.8);
        let d = matrix_nms(&[a, b], 2.0);
        assert_eq!(d[0], 0.9);
        assert!((d[1] - 0.8 * (-1.0f64 / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_masks_are_untouched() {
        let a = mask(&[1, 1, 0, 0], 2, 2, 0.9);
        let b = mask(&[0, 0, 1, 1], 2, 2, 0.4);
        assert_eq!(matrix_nms(&[a, b], 2.0), vec![0.9, 0.4]);
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..=10);
            let cands: Vec<ScoredMask> = (0..n)
                .map(|_| {
                    let bits: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
                    mask(&bits, 4, 4, rng.gen_range(0.0..1.0))
                })
                .collect();
            let got = matrix_nms(&cands, 2.0);

            // reference: re-derive every quantity with plain nested loops
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| cands[b].score.partial_cmp(&cands[a].score).unwrap());
            let mut want = vec![0.0; n];
            for (rank_j, &j) in idx.iter().enumerate() {
                let mut decay = 1.0f64;
                for (rank_i, &i) in idx.iter().enumerate().take(rank_j) {
                    let mut comp = 0.0f64;
                    for &k in idx.iter().take(rank_i) {
                        comp = comp.max(iou(&cands[k].binary, &cands[i].binary));
                    }
                    let o = iou(&cands[i].binary, &cands[j].binary);
                    decay = decay.min((-(o * o - comp * comp) / 2.0).exp());
                }
                want[j] = cands[j].score * decay;
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
            // suppression never raises a score; the top mask keeps its own
            for (c, g) in cands.iter().zip(&got) {
                assert!(*g <= c.score + 1e-15);
            }
            assert!((got[idx[0]] - cands[idx[0]].score).abs() < 1e-15);
        }
    }

    #[test]
    fn merge_picks_best_decayed_and_upsamples() {
        let a = mask(&[1, 0, 0, 0], 2, 2, 0.6);
        let b = mask(&[1, 1, 1, 0], 2, 2, 0.9);
        let cands = vec![a, b];
        let decayed = matrix_nms(&cands, 2.0);
        let merged = merge_masks(&cands, &decayed, 4).unwrap();
        assert_eq!(merged.index, 1);
        assert_eq!(merged.quarter, vec![true, true, true, false]);
        assert_eq!(merged.height, 8);
        assert_eq!(merged.width, 8);
        // each quarter cell expands into a 4x4 block
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(merged.full[y * 8 + x], merged.quarter[(y / 4) * 2 + x / 4]);
            }
        }
        assert!(merge_masks(&[], &[], 4).is_none());
    }

    #[test]
    fn merge_on_equal_masks_prefers_higher_score() {
        let a = mask(&[1, 1, 0, 0], 2, 2, 0.5);
        let b = mask(&[1, 1, 0, 0], 2, 2, 0.9);
        let cands = vec![a, b];
        let decayed = matrix_nms(&cands, 2.0);
        let merged = merge_masks(&cands, &decayed, 4).unwrap();
        assert_eq!(merged.index, 1);
        assert_eq!(merged.quarter, vec![true, true, false, false]);
    }

    #[test]
    fn evaluate_aggregates_and_thresholds_strictly() {
        let report = evaluate(vec![
            SampleIou { id: "a".into(), iou: 1.0 },
            SampleIou { id: "b".into(), iou: 0.7 },
            SampleIou { id: "c".into(), iou: 0.4 },
        ])
        .unwrap();
        assert!((report.miou - 0.7).abs() < 1e-12);
        // hand count: >0.5 gives {1.0, 0.7}; >0.7 gives {1.0} (strict)
        assert!((report.prec_50 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.prec_60 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.prec_70 - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.prec_80 - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.prec_90 - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(evaluate(vec![]), Err(MetricsError::EmptySet)));
    }

    #[test]
    fn evaluate_masks_covers_extremes() {
        let gt = vec![true, true, false, false];
        let perfect = evaluate_masks(&[("x".into(), gt.clone(), gt.clone())]).unwrap();
        assert_eq!(perfect.miou, 1.0);
        assert_eq!(perfect.prec_values(), [1.0; 5]);

        let empty_pred = evaluate_masks(&[("y".into(), vec![false; 4], gt)]).unwrap();
        assert_eq!(empty_pred.miou, 0.0);
        assert_eq!(empty_pred.prec_values(), [0.0; 5]);
    }

    proptest! {
        #[test]
        fn precision_is_monotone_in_threshold(ious in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let samples: Vec<SampleIou> = ious
                .iter()
                .enumerate()
                .map(|(i, &v)| SampleIou { id: format!("s{i}"), iou: v })
                .collect();
            let report = evaluate(samples).unwrap();
            let p = report.prec_values();
            for w in p.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert!(report.miou >= 0.0 && report.miou <= 1.0);
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = evaluate(vec![SampleIou { id: "a".into(), iou: 0.85 }]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"prec@0.5\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.miou, report.miou);
        assert_eq!(back.samples.len(), 1);
    }

    #[test]
    fn csv_lists_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ious.csv");
        write_iou_csv(
            &path,
            &[
                SampleIou { id: "val_00000".into(), iou: 0.5 },
                SampleIou { id: "val_00001".into(), iou: 1.0 },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "image_id,iou\nval_00000,0.500000\nval_00001,1.000000\n");
    }
}
