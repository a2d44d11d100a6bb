//! Synthetic scene generator: colored shapes on a noisy background plus a
//! referring expression that uniquely picks one of them.

use crate::pgm::{GrayImage, RgbImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

#[derive(Clone, Copy, Debug)]
pub struct ColorDef {
    pub word: &'static str,
    pub rgb: [u8; 3],
}

pub const COLORS: [ColorDef; 8] = [
    ColorDef { word: "red", rgb: [210, 45, 45] },
    ColorDef { word: "green", rgb: [55, 190, 70] },
    ColorDef { word: "blue", rgb: [55, 90, 220] },
    ColorDef { word: "yellow", rgb: [230, 215, 60] },
    ColorDef { word: "cyan", rgb: [60, 210, 210] },
    ColorDef { word: "magenta", rgb: [210, 60, 200] },
    ColorDef { word: "orange", rgb: [235, 145, 50] },
    ColorDef { word: "purple", rgb: [140, 70, 200] },
];

const BACKGROUND: [u8; 3] = [38, 40, 46];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            min_objects: 2,
            max_objects: 4,
            min_size: 12,
            max_size: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into [`COLORS`].
    pub color: usize,
    pub size: usize,
    pub center: (usize, usize),
    /// Row-major occupancy over the full image.
    pub raster: Vec<bool>,
    pub area: usize,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub size: usize,
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not build a uniquely-describable scene for index {index} in {attempts} attempts")]
    Exhausted { index: usize, attempts: usize },
}

/// One generated training or validation sample.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub scene: Scene,
    pub image: RgbImage,
    /// Visible pixels of the target, 255 = foreground.
    pub mask: GrayImage,
    pub tokens: Vec<String>,
}

fn rasterize(shape: Shape, center: (usize, usize), size: usize, n: usize) -> (Vec<bool>, usize) {
    let mut raster = vec![false; n * n];
    let mut area = 0usize;
    let (cy, cx) = (center.0 as isize, center.1 as isize);
    let half = (size / 2) as isize;
    let mut set = |y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n {
            let i = y as usize * n + x as usize;
            if !raster[i] {
                raster[i] = true;
                area += 1;
            }
        }
    };
    match shape {
        Shape::Circle => {
            let r2 = half * half;
            for y in (cy - half)..=(cy + half) {
                for x in (cx - half)..=(cx + half) {
                    let dy = y - cy;
                    let dx = x - cx;
                    if dy * dy + dx * dx <= r2 {
                        set(y, x);
                    }
                }
            }
        }
        Shape::Square => {
            let top = cy - half;
            let left = cx - half;
            for y in top..top + size as isize {
                for x in left..left + size as isize {
                    set(y, x);
                }
            }
        }
        Shape::Triangle => {
            let top = cy - half;
            for dy in 0..size as isize {
                let hw = dy * half / (size as isize - 1).max(1);
                for x in (cx - hw)..=(cx + hw) {
                    set(top + dy, x);
                }
            }
        }
    }
    (raster, area)
}

fn overlap_count(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count()
}

/// Maximum fraction of the smaller object's area two objects may share.
pub const MAX_OVERLAP: f64 = 0.2;
/// Minimum fraction of an object that must stay visible after stacking.
const MIN_VISIBLE: f64 = 0.6;

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let n = spec.image_size;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..40 {
            let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
            let color = rng.gen_range(0..COLORS.len());
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let margin = size / 2 + 2;
            if n <= 2 * margin {
                continue;
            }
            let cy = rng.gen_range(margin..n - margin);
            let cx = rng.gen_range(margin..n - margin);
            let (raster, area) = rasterize(shape, (cy, cx), size, n);
            if area == 0 {
                continue;
            }
            let ok = objects.iter().all(|o| {
                let inter = overlap_count(&raster, &o.raster);
                inter as f64 <= MAX_OVERLAP * area.min(o.area) as f64
            });
            if ok {
                objects.push(SceneObject { shape, color, size, center: (cy, cx), raster, area });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }

    // later objects draw on top; everything must stay mostly visible
    let owner = owner_map(&objects, n);
    for (i, o) in objects.iter().enumerate() {
        let visible = owner.iter().filter(|&&v| v == Some(i)).count();
        if (visible as f64) < MIN_VISIBLE * o.area as f64 {
            return None;
        }
    }

    // pick the first target (in shuffled order) with a unique expression
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(rng);
    let scene = Scene { size: n, objects, target: 0 };
    for cand in order {
        let mut s = scene.clone();
        s.target = cand;
        if expression_for(&s, cand).is_some() {
            return Some(s);
        }
    }
    None
}

fn owner_map(objects: &[SceneObject], n: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; n * n];
    for (i, o) in objects.iter().enumerate() {
        for (p, &on) in o.raster.iter().enumerate() {
            if on {
                owner[p] = Some(i);
            }
        }
    }
    owner
}

/// Shortest expression (color+shape, else position+color+shape) that matches
/// exactly the target under [`expression_matches`]; None if every candidate
/// is ambiguous.
pub fn expression_for(scene: &Scene, target: usize) -> Option<Vec<String>> {
    let t = &scene.objects[target];
    let base = vec![COLORS[t.color].word.to_string(), t.shape.word().to_string()];
    if matches_exactly_target(scene, &base, target) {
        return Some(base);
    }
    for pos in ["left", "right", "top", "bottom"] {
        let mut tokens = vec![pos.to_string()];
        tokens.extend(base.iter().cloned());
        if matches_exactly_target(scene, &tokens, target) {
            return Some(tokens);
        }
    }
    None
}

fn matches_exactly_target(scene: &Scene, tokens: &[String], target: usize) -> bool {
    let mut matched = None;
    for i in 0..scene.objects.len() {
        if expression_matches(scene, tokens, i) {
            if matched.is_some() {
                return false;
            }
            matched = Some(i);
        }
    }
    matched == Some(target)
}

/// Grammar semantics: `[position]? color shape`. The object must carry the
/// color and shape; a position word additionally requires it to be the
/// strict extreme along that axis among all objects of that color and shape.
pub fn expression_matches(scene: &Scene, tokens: &[String], index: usize) -> bool {
    let (pos, color_word, shape_word) = match tokens.len() {
        2 => (None, tokens[0].as_str(), tokens[1].as_str()),
        3 => (Some(tokens[0].as_str()), tokens[1].as_str(), tokens[2].as_str()),
        _ => return false,
    };
    let obj = &scene.objects[index];
    if COLORS[obj.color].word != color_word || obj.shape.word() != shape_word {
        return false;
    }
    let Some(pos) = pos else { return true };
    let peers: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| COLORS[o.color].word == color_word && o.shape.word() == shape_word)
        .collect();
    peers.iter().all(|o| {
        if std::ptr::eq(*o, obj) {
            return true;
        }
        match pos {
            "left" => obj.center.1 < o.center.1,
            "right" => obj.center.1 > o.center.1,
            "top" => obj.center.0 < o.center.0,
            "bottom" => obj.center.0 > o.center.0,
            _ => false,
        }
    })
}

fn render(scene: &Scene, rng: &mut ChaCha8Rng) -> (RgbImage, GrayImage) {
    let n = scene.size;
    let owner = owner_map(&scene.objects, n);
    let mut image = RgbImage::new(n, n);
    let mut mask = GrayImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (base, spread) = match owner[i] {
                Some(o) => (COLORS[scene.objects[o].color].rgb, 5i16),
                None => (BACKGROUND, 8i16),
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise = rng.gen_range(-spread..=spread);
                px[c] = (base[c] as i16 + noise).clamp(0, 255) as u8;
            }
            image.set(y, x, px);
            if owner[i] == Some(scene.target) {
                mask.set(y, x, 255);
            }
        }
    }
    (image, mask)
}

fn sub_seed(seed: u64, index: usize, attempt: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 * 100_003)
        .wrapping_add(attempt as u64 * 7919 + 1)
}

/// Deterministic sample for (spec.seed, index). Scene attempts that cannot
/// be made uniquely describable advance to the next sub-seed.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<GeneratedSample, SynthError> {
    const ATTEMPTS: usize = 100;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, index, attempt));
        let Some(scene) = try_scene(spec, &mut rng) else { continue };
        let tokens = expression_for(&scene, scene.target)
            .expect("target chosen to be describable");
        let (image, mask) = render(&scene, &mut rng);
        if mask.pixels.iter().all(|&p| p == 0) {
            continue;
        }
        return Ok(GeneratedSample { scene, image, mask, tokens });
    }
    Err(SynthError::Exhausted { index, attempts: ATTEMPTS })
}
