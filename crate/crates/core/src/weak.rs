//! Click derivation, SLIC superpixels, and weak-label expansion.
//!
//! Weak supervision starts from three clicks per object (center of mass plus
//! the two tight bounding-box corners), grows the center click into its
//! superpixel as foreground, marks everything strictly outside the corner
//! box as background, and leaves the rest unknown.

use crate::pgm::{GrayImage, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeakError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("requested {requested} segments for {pixels} pixels")]
    TooManySegments { requested: usize, pixels: usize },
}

/// Three key points in pixel coordinates, rows before columns.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClickAnnotation {
    pub center: (usize, usize),
    pub top_left: (usize, usize),
    pub bottom_right: (usize, usize),
}

impl ClickAnnotation {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top_left.0
            && r <= self.bottom_right.0
            && c >= self.top_left.1
            && c <= self.bottom_right.1
    }
}

/// Rounds with .5 going down, the tie rule used for click coordinates.
fn round_half_down(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

/// Center of mass (rounded) and tight bounding-box corners of a binary
/// mask (nonzero = foreground).
pub fn derive_clicks(mask: &GrayImage) -> Result<ClickAnnotation, WeakError> {
    let mut sum_r = 0.0f64;
    let mut sum_c = 0.0f64;
    let mut n = 0usize;
    let (mut min_r, mut max_r, mut min_c, mut max_c) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) != 0 {
                sum_r += r as f64;
                sum_c += c as f64;
                n += 1;
                min_r = min_r.min(r);
                max_r = max_r.max(r);
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
        }
    }
    if n == 0 {
        return Err(WeakError::EmptyMask);
    }
    let center = (
        round_half_down(sum_r / n as f64),
        round_half_down(sum_c / n as f64),
    );
    Ok(ClickAnnotation {
        center,
        top_left: (min_r, min_c),
        bottom_right: (max_r, max_c),
    })
}

/// A labeling of every pixel into connected segments 0..count.
#[derive(Clone, Debug)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn label(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }
}

fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    fn lin(u: u8) -> f64 {
        let v = u as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    }
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    fn f(t: f64) -> f64 {
        const D3: f64 = 6.0 / 29.0 * (6.0 / 29.0) * (6.0 / 29.0);
        if t > D3 {
            t.cbrt()
        } else {
            t / (3.0 * (6.0 / 29.0) * (6.0 / 29.0)) + 4.0 / 29.0
        }
    }
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// SLIC: localized k-means over (Lab, position) with grid seeding, gradient
/// seed perturbation, fixed iteration count, and connectivity enforcement.
/// Fully deterministic.
pub fn compute_superpixels(
    image: &RgbImage,
    n_segments: usize,
    compactness: f64,
    iterations: usize,
) -> Result<SuperpixelMap, WeakError> {
    let (h, w) = (image.height, image.width);
    let n_px = h * w;
    assert!(n_segments >= 1, "need at least one segment");
    if n_segments > n_px {
        return Err(WeakError::TooManySegments { requested: n_segments, pixels: n_px });
    }

    let lab: Vec<[f64; 3]> = (0..n_px)
        .map(|i| srgb_to_lab(image.get(i / w, i % w)))
        .collect();

    // seed grid sized to approximate the requested count
    let ny = ((n_segments as f64 * h as f64 / w as f64).sqrt().round() as usize)
        .clamp(1, h);
    let nx = ((n_segments as f64 / ny as f64).ceil() as usize).clamp(1, w);
    let spacing = (n_px as f64 / (ny * nx) as f64).sqrt();

    // center state: (y, x, lab)
    let mut centers: Vec<(f64, f64, [f64; 3])> = Vec::with_capacity(ny * nx);
    for iy in 0..ny {
        for ix in 0..nx {
            let cy = ((iy as f64 + 0.5) * h as f64 / ny as f64) as usize;
            let cx = ((ix as f64 + 0.5) * w as f64 / nx as f64) as usize;
            let (cy, cx) = lowest_gradient_near(&lab, h, w, cy.min(h - 1), cx.min(w - 1));
            centers.push((cy as f64, cx as f64, lab[cy * w + cx]));
        }
    }

    let inv_s2 = (compactness / spacing) * (compactness / spacing);
    let mut labels = vec![0u32; n_px];
    let search = (2.0 * spacing).ceil() as isize;
    for _ in 0..iterations {
        let mut best = vec![f64::INFINITY; n_px];
        for (k, &(cy, cx, clab)) in centers.iter().enumerate() {
            let y0 = (cy as isize - search).max(0) as usize;
            let y1 = ((cy as isize + search) as usize).min(h - 1);
            let x0 = (cx as isize - search).max(0) as usize;
            let x1 = ((cx as isize + search) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let pl = lab[i];
                    let d_lab = (pl[0] - clab[0]) * (pl[0] - clab[0])
                        + (pl[1] - clab[1]) * (pl[1] - clab[1])
                        + (pl[2] - clab[2]) * (pl[2] - clab[2]);
                    let d_xy = (y as f64 - cy) * (y as f64 - cy)
                        + (x as f64 - cx) * (x as f64 - cx);
                    let d = d_lab + d_xy * inv_s2;
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // recompute centers; empty clusters keep their position
        let mut acc = vec![(0.0f64, 0.0f64, [0.0f64; 3], 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let a = &mut acc[labels[i] as usize];
                a.0 += y as f64;
                a.1 += x as f64;
                for c in 0..3 {
                    a.2[c] += lab[i][c];
                }
                a.3 += 1;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            if a.3 > 0 {
                let inv = 1.0 / a.3 as f64;
                centers[k] = (
                    a.0 * inv,
                    a.1 * inv,
                    [a.2[0] * inv, a.2[1] * inv, a.2[2] * inv],
                );
            }
        }
    }

    let (labels, count) = enforce_connectivity(&labels, h, w);
    Ok(SuperpixelMap { width: w, height: h, labels, count })
}

fn lowest_gradient_near(
    lab: &[[f64; 3]],
    h: usize,
    w: usize,
    cy: usize,
    cx: usize,
) -> (usize, usize) {
    let grad = |y: usize, x: usize| -> f64 {
        let yl = y.saturating_sub(1);
        let yh = (y + 1).min(h - 1);
        let xl = x.saturating_sub(1);
        let xh = (x + 1).min(w - 1);
        let mut g = 0.0;
        for c in 0..3 {
            let dv = lab[y * w + xh][c] - lab[y * w + xl][c];
            let dh = lab[yh * w + x][c] - lab[yl * w + x][c];
            g += dv * dv + dh * dh;
        }
        g
    };
    let mut best = (cy, cx);
    let mut best_g = grad(cy, cx);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let g = grad(y as usize, x as usize);
            if g < best_g {
                best_g = g;
                best = (y as usize, x as usize);
            }
        }
    }
    best
}

/// Splits every label into 4-connected components, keeps the largest
/// component per label, and merges each orphan component into an adjacent
/// resolved region. Final labels are renumbered 0.. in scan order.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize) -> (Vec<u32>, usize) {
    let n_px = h * w;
    let mut comp = vec![usize::MAX; n_px];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut comp_first = Vec::new();
    let mut queue = Vec::new();
    for start in 0..n_px {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let lbl = labels[start];
        comp_label.push(lbl);
        comp_first.push(start);
        let mut size = 0usize;
        queue.clear();
        queue.push(start);
        comp[start] = id;
        while let Some(i) = queue.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == lbl {
                    comp[j] = id;
                    queue.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comp_size.push(size);
    }

    // largest component per label survives; scan order breaks ties
    let n_comp = comp_label.len();
    let mut keeper: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for id in 0..n_comp {
        let e = keeper.entry(comp_label[id]).or_insert(id);
        if comp_size[id] > comp_size[*e] {
            *e = id;
        }
    }
    let kept: Vec<bool> = (0..n_comp)
        .map(|id| keeper.get(&comp_label[id]) == Some(&id))
        .collect();

    // final label per component; kept ones numbered by first-pixel order
    let mut order: Vec<usize> = (0..n_comp).filter(|&id| kept[id]).collect();
    order.sort_by_key(|&id| comp_first[id]);
    let mut final_label = vec![u32::MAX; n_comp];
    for (new, &id) in order.iter().enumerate() {
        final_label[id] = new as u32;
    }

    // orphans adopt the label of the first resolved 4-neighbor, repeating
    // until everything is attached
    let mut unresolved: Vec<usize> = (0..n_comp).filter(|&id| !kept[id]).collect();
    while !unresolved.is_empty() {
        let mut progressed = false;
        let mut remaining = Vec::new();
        'comps: for &id in &unresolved {
            for i in 0..n_px {
                if comp[i] != id {
                    continue;
                }
                let (y, x) = (i / w, i % w);
                for j in [
                    (y > 0).then(|| i - w),
                    (x > 0).then(|| i - 1),
                    (x + 1 < w).then(|| i + 1),
                    (y + 1 < h).then(|| i + w),
                ]
                .into_iter()
                .flatten()
                {
                    if comp[j] != id && final_label[comp[j]] != u32::MAX {
                        final_label[id] = final_label[comp[j]];
                        progressed = true;
                        continue 'comps;
                    }
                }
            }
            remaining.push(id);
        }
        assert!(progressed, "orphan merge must progress");
        unresolved = remaining;
    }

    let out: Vec<u32> = comp.iter().map(|&id| final_label[id]).collect();
    (out, order.len())
}

/// Foreground label value in expanded weak masks.
pub const WEAK_FG: i8 = 1;
/// Background label value.
pub const WEAK_BG: i8 = 0;
/// Unknown label value, ignored by the partial cross-entropy.
pub const WEAK_UNKNOWN: i8 = -1;

/// Expands clicks into a full-resolution {1, 0, -1} label map: foreground is
/// the center click's superpixel clipped to the corner box, background is
/// everything strictly outside the box, the rest is unknown. Superpixel
/// pixels leaking outside the box are demoted to unknown, not background.
pub fn expand_weak_labels(clicks: &ClickAnnotation, superpixels: &SuperpixelMap) -> Vec<i8> {
    let (h, w) = (superpixels.height, superpixels.width);
    let fg_label = superpixels.label(clicks.center.0, clicks.center.1);
    let mut out = vec![WEAK_UNKNOWN; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let in_fg_sp = superpixels.labels[i] == fg_label;
            if in_fg_sp {
                if clicks.contains(r, c) {
                    out[i] = WEAK_FG;
                }
                // leaked superpixel pixels stay unknown
            } else if !clicks.contains(r, c) {
                out[i] = WEAK_BG;
            }
        }
    }
    out
}

/// Nearest-neighbor downsampling of a label map by an integer factor,
/// sampling the center pixel of each block.
pub fn downsample_labels_nn(labels: &[i8], h: usize, w: usize, factor: usize) -> Vec<i8> {
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![WEAK_UNKNOWN; ho * wo];
    for r in 0..ho {
        let sr = (r * factor + factor / 2).min(h - 1);
        for c in 0..wo {
            let sc = (c * factor + factor / 2).min(w - 1);
            out[r * wo + c] = labels[sr * w + sc];
        }
    }
    out
}

/// Byte encoding used in weak-mask PGM files.
pub fn weak_label_to_byte(l: i8) -> u8 {
    match l {
        WEAK_FG => 255,
        WEAK_BG => 0,
        _ => 128,
    }
}

pub fn byte_to_weak_label(b: u8) -> i8 {
    match b {
        255 => WEAK_FG,
        0 => WEAK_BG,
        _ => WEAK_UNKNOWN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, fg: &[(usize, usize)]) -> GrayImage {
        let mut m = GrayImage::new(w, h);
        for &(r, c) in fg {
            m.set(r, c, 255);
        }
        m
    }

    #[test]
    fn clicks_of_solid_square() {
        let mut fg = Vec::new();
        for r in 2..=5 {
            for c in 2..=5 {
                fg.push((r, c));
            }
        }
        let m = mask_from(8, 8, &fg);
        let a = derive_clicks(&m).unwrap();
        // center of mass 3.5 rounds down under the half-down rule
        assert_eq!(a.center, (3, 3));
        assert_eq!(a.top_left, (2, 2));
        assert_eq!(a.bottom_right, (5, 5));
    }

    #[test]
    fn clicks_of_single_pixel() {
        let m = mask_from(9, 9, &[(7, 7)]);
        let a = derive_clicks(&m).unwrap();
        assert_eq!(a.center, (7, 7));
        assert_eq!(a.top_left, (7, 7));
        assert_eq!(a.bottom_right, (7, 7));
    }

    #[test]
    fn l_shape_center_may_be_off_object() {
        // thick L: vertical bar cols 0..=1, horizontal bar rows 8..=9
        let mut fg = Vec::new();
        for r in 0..10 {
            for c in 0..2 {
                fg.push((r, c));
            }
        }
        for r in 8..10 {
            for c in 2..10 {
                fg.push((r, c));
            }
        }
        let m = mask_from(10, 10, &fg);
        let a = derive_clicks(&m).unwrap();
        // exhaustive average: rows sum 20*4.5 + 16*8.5, cols 20*0.5 + 16*5.5
        let er: f64 = (20.0 * 4.5 + 16.0 * 8.5) / 36.0;
        let ec: f64 = (20.0 * 0.5 + 16.0 * 5.5) / 36.0;
        assert_eq!(a.center, ((er - 0.5).ceil() as usize, (ec - 0.5).ceil() as usize));
        assert_eq!(m.get(a.center.0, a.center.1), 0, "constructed to fall off-object");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = GrayImage::new(4, 4);
        assert!(matches!(derive_clicks(&m), Err(WeakError::EmptyMask)));
    }

    #[test]
    fn corner_box_is_tight() {
        let m = mask_from(12, 12, &[(3, 4), (7, 9), (5, 2)]);
        let a = derive_clicks(&m).unwrap();
        assert_eq!(a.top_left, (3, 2));
        assert_eq!(a.bottom_right, (7, 9));
        // each side touches a mask pixel
        assert!((0..12).any(|c| m.get(3, c) != 0));
        assert!((0..12).any(|c| m.get(7, c) != 0));
        assert!((0..12).any(|r| m.get(r, 2) != 0));
        assert!((0..12).any(|r| m.get(r, 9) != 0));
    }

    #[test]
    fn single_segment_covers_image() {
        let mut img = RgbImage::new(16, 12);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i % 251) as u8;
        }
        let sp = compute_superpixels(&img, 1, 10.0, 10).unwrap();
        assert_eq!(sp.count, 1);
        assert!(sp.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn uniform_image_gives_grid_like_areas() {
        let mut img = RgbImage::new(32, 32);
        for p in img.pixels.iter_mut() {
            *p = 120;
        }
        let sp = compute_superpixels(&img, 4, 10.0, 10).unwrap();
        assert_eq!(sp.count, 4);
        let mut areas = vec![0usize; 4];
        for &l in &sp.labels {
            areas[l as usize] += 1;
        }
        let expect = (32 * 32 / 4) as f64;
        for &a in &areas {
            assert!(
                (a as f64 - expect).abs() <= 0.3 * expect,
                "area {a} deviates more than 30% from {expect}"
            );
        }
    }

    #[test]
    fn two_tone_boundary_follows_color_edge() {
        let mut img = RgbImage::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let v = if x < 16 { [200, 40, 40] } else { [40, 40, 200] };
                img.set(y, x, v);
            }
        }
        let sp = compute_superpixels(&img, 2, 10.0, 10).unwrap();
        assert_eq!(sp.count, 2);
        let left_label = sp.label(16, 0);
        let right_label = sp.label(16, 31);
        assert_ne!(left_label, right_label);
        let mut correct = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let want = if x < 16 { left_label } else { right_label };
                if sp.label(y, x) == want {
                    correct += 1;
                }
            }
        }
        assert!(correct as f64 >= 0.95 * 32.0 * 32.0, "only {correct}/1024 correct");
    }

    #[test]
    fn superpixels_are_connected_partition() {
        let mut img = RgbImage::new(48, 40);
        for y in 0..40 {
            for x in 0..48 {
                img.set(y, x, [(x * 5) as u8, (y * 6) as u8, ((x + y) * 3) as u8]);
            }
        }
        let sp = compute_superpixels(&img, 20, 10.0, 10).unwrap();
        // every label in 0..count
        assert!(sp.labels.iter().all(|&l| (l as usize) < sp.count));
        // every label occurs
        for want in 0..sp.count {
            assert!(sp.labels.iter().any(|&l| l as usize == want));
        }
        // 4-connectivity: per label, flood fill from first pixel reaches all
        for want in 0..sp.count as u32 {
            let first = sp.labels.iter().position(|&l| l == want).unwrap();
            let mut seen = vec![false; sp.labels.len()];
            let mut queue = vec![first];
            seen[first] = true;
            let mut reached = 0usize;
            while let Some(i) = queue.pop() {
                reached += 1;
                let (y, x) = (i / sp.width, i % sp.width);
                let mut push = |j: usize| {
                    if !seen[j] && sp.labels[j] == want {
                        seen[j] = true;
                        queue.push(j);
                    }
                };
                if y > 0 {
                    push(i - sp.width);
                }
                if y + 1 < sp.height {
                    push(i + sp.width);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < sp.width {
                    push(i + 1);
                }
            }
            let total = sp.labels.iter().filter(|&&l| l == want).count();
            assert_eq!(reached, total, "segment {want} is disconnected");
        }
    }

    #[test]
    fn too_many_segments_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(matches!(
            compute_superpixels(&img, 17, 10.0, 5),
            Err(WeakError::TooManySegments { .. })
        ));
    }

    #[test]
    fn expansion_partitions_and_respects_box() {
        // hand-built superpixel map: 4 vertical strips of width 2 on 8x8
        let mut labels = vec![0u32; 64];
        for r in 0..8 {
            for c in 0..8 {
                labels[r * 8 + c] = (c / 2) as u32;
            }
        }
        let sp = SuperpixelMap { width: 8, height: 8, labels, count: 4 };
        let clicks = ClickAnnotation {
            center: (3, 2),
            top_left: (2, 1),
            bottom_right: (5, 4),
        };
        let out = expand_weak_labels(&clicks, &sp);
        for r in 0..8 {
            for c in 0..8 {
                let v = out[r * 8 + c];
                let inside = clicks.contains(r, c);
                let in_sp = c / 2 == 1;
                if in_sp && inside {
                    assert_eq!(v, WEAK_FG);
                } else if in_sp {
                    assert_eq!(v, WEAK_UNKNOWN, "leak at ({r},{c}) must be unknown");
                } else if !inside {
                    assert_eq!(v, WEAK_BG);
                } else {
                    assert_eq!(v, WEAK_UNKNOWN);
                }
            }
        }
        // center click itself is foreground
        assert_eq!(out[3 * 8 + 2], WEAK_FG);
    }

    #[test]
    fn box_covering_image_leaves_no_background() {
        let labels = vec![0u32; 16];
        let sp = SuperpixelMap { width: 4, height: 4, labels, count: 1 };
        let clicks = ClickAnnotation {
            center: (1, 1),
            top_left: (0, 0),
            bottom_right: (3, 3),
        };
        let out = expand_weak_labels(&clicks, &sp);
        assert!(out.iter().all(|&v| v != WEAK_BG));
        assert!(out.iter().all(|&v| v == WEAK_FG));
    }

    #[test]
    fn nn_downsample_picks_block_centers() {
        let mut labels = vec![WEAK_UNKNOWN; 8 * 8];
        labels[2 * 8 + 2] = WEAK_FG; // center of the (0,0) block of factor 4
        labels[2 * 8 + 6] = WEAK_BG;
        let down = downsample_labels_nn(&labels, 8, 8, 4);
        assert_eq!(down.len(), 4);
        assert_eq!(down[0], WEAK_FG);
        assert_eq!(down[1], WEAK_BG);
        assert_eq!(down[2], WEAK_UNKNOWN);
        assert_eq!(down[3], WEAK_UNKNOWN);
    }

    #[test]
    fn weak_byte_codes_round_trip() {
        for l in [WEAK_FG, WEAK_BG, WEAK_UNKNOWN] {
            assert_eq!(byte_to_weak_label(weak_label_to_byte(l)), l);
        }
    }
}
