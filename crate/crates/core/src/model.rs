//! Network definition: image pyramid encoder, expression encoder, attention
//! fusion with position heatmaps, kernel pools, and the mask decoder.
//!
//! Every forward runs on a [`Tape`], so training and inference share one
//! code path; inference simply skips the backward pass.

use crate::config::RunConfig;
use crate::params::{ParamStore, Staged};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Largest pyramid stride; input sides must divide by it.
pub const MAX_STRIDE: usize = 64;
/// Pyramid depth (strides 4, 8, 16, 32, 64).
pub const N_LEVELS: usize = 5;
/// Mask lattice stride.
pub const MASK_STRIDE: usize = 4;

fn xavier(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

fn conv_param(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) {
    store.ensure_uniform(&format!("{name}.w"), &[co, ci, k, k], xavier(ci * k * k), rng);
    store.ensure_zeros(&format!("{name}.b"), &[co]);
}

fn linear_param(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) {
    store.ensure_uniform(&format!("{name}.w"), &[rows, cols], xavier(rows), rng);
    store.ensure_zeros(&format!("{name}.b"), &[cols]);
}

/// Creates every trainable array for the configured pipeline, in a fixed
/// order so the seed determines all values.
pub fn build_params(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let c = cfg.channels;
    let d_text = 2 * cfg.text_hidden;
    let mut p = ParamStore::new();

    // image encoder
    conv_param(&mut p, rng, "enc.stem1", c, 3, 3);
    conv_param(&mut p, rng, "enc.stem2", c, c, 3);
    for i in 2..=N_LEVELS {
        conv_param(&mut p, rng, &format!("enc.down{i}"), c, c, 3);
    }
    for i in 1..=N_LEVELS {
        conv_param(&mut p, rng, &format!("enc.lat{i}"), c, c, 1);
    }
    for i in 1..=N_LEVELS {
        conv_param(&mut p, rng, &format!("enc.out{i}"), c, c, 3);
    }

    // expression encoder
    p.ensure_uniform("text.embed", &[crate::vocab::vocab_size(), cfg.text_embed_dim], 0.5, rng);
    for dir in ["f", "b"] {
        p.ensure_uniform(
            &format!("text.{dir}.wx"),
            &[cfg.text_embed_dim, cfg.text_hidden],
            xavier(cfg.text_embed_dim),
            rng,
        );
        p.ensure_uniform(
            &format!("text.{dir}.wh"),
            &[cfg.text_hidden, cfg.text_hidden],
            xavier(cfg.text_hidden),
            rng,
        );
        p.ensure_zeros(&format!("text.{dir}.b"), &[cfg.text_hidden]);
    }

    // fusion stack and heatmap heads, per active level, per step
    for i in cfg.level_lo..=cfg.level_hi {
        for j in 0..cfg.fusion_steps {
            let base = format!("fus.l{i}.s{j}");
            linear_param(&mut p, rng, &format!("{base}.att_s"), d_text, c);
            conv_param(&mut p, rng, &format!("{base}.att_f"), c, c, 1);
            linear_param(&mut p, rng, &format!("{base}.mix_s"), c, c);
            conv_param(&mut p, rng, &format!("{base}.mix_f"), c, c, 1);
            // identity-offset gate keeps the product path alive at init
            p.insert(format!("{base}.mix_s.b"), ArrayD::from_elem(IxDyn(&[c]), 1.0));
        }
        conv_param(&mut p, rng, &format!("fus.l{i}.head"), 1, c, 3);
    }

    match cfg.pipeline {
        crate::config::Pipeline::Kernel => {
            conv_param(&mut p, rng, "kern.c1", c, c + 2, 3);
            conv_param(&mut p, rng, "kern.c2", c, c, 3);
            decoder_params(&mut p, rng, "seg", c);
        }
        crate::config::Pipeline::Direct => {
            decoder_params(&mut p, rng, "dir", c);
            conv_param(&mut p, rng, "dir.out", 1, c, 1);
        }
    }
    p
}

fn decoder_params(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    for i in 2..=N_LEVELS {
        for k in 0..i - 1 {
            conv_param(p, rng, &format!("{prefix}.l{i}.c{k}"), c, c, 3);
        }
    }
    conv_param(p, rng, &format!("{prefix}.proj"), c, c, 1);
}

fn conv(t: &mut Tape, p: &Staged, name: &str, input: Var, stride: usize) -> Var {
    let c = t.conv2d(input, p.var(&format!("{name}.w")), stride);
    t.add_chan_bias(c, p.var(&format!("{name}.b")))
}

fn conv_tanh(t: &mut Tape, p: &Staged, name: &str, input: Var, stride: usize) -> Var {
    let c = conv(t, p, name, input, stride);
    t.tanh(c)
}

/// Five-level feature pyramid (strides 4..64) from a planar `[3, n, n]`
/// image in [0,1]. Errors if the side is not divisible by the largest
/// stride.
pub fn encode_image(
    t: &mut Tape,
    p: &Staged,
    cfg: &RunConfig,
    image: &[f64],
) -> Result<Vec<Var>, String> {
    let n = cfg.image_size;
    if image.len() != 3 * n * n {
        return Err(format!("expected {} image values, got {}", 3 * n * n, image.len()));
    }
    if n % MAX_STRIDE != 0 {
        return Err(format!("image side {n} is not divisible by the max stride {MAX_STRIDE}"));
    }
    let img = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, n, n]), image.to_vec()).unwrap());

    // bottom-up
    let s1 = conv_tanh(t, p, "enc.stem1", img, 2);
    let c1 = conv_tanh(t, p, "enc.stem2", s1, 2);
    let mut trunk = vec![c1];
    for i in 2..=N_LEVELS {
        let prev = *trunk.last().unwrap();
        trunk.push(conv_tanh(t, p, &format!("enc.down{i}"), prev, 2));
    }

    // top-down with lateral merges
    let mut merged = vec![Var(usize::MAX); N_LEVELS];
    for i in (1..=N_LEVELS).rev() {
        let lat = conv(t, p, &format!("enc.lat{i}"), trunk[i - 1], 1);
        merged[i - 1] = if i == N_LEVELS {
            lat
        } else {
            let up = t.upsample_bilinear2(merged[i]);
            t.add(lat, up)
        };
    }
    Ok((1..=N_LEVELS)
        .map(|i| conv_tanh(t, p, &format!("enc.out{i}"), merged[i - 1], 1))
        .collect())
}

/// Per-word features `[N, 2*hidden]` from token ids: embedding plus a
/// bidirectional recurrent pass, so every row sees the whole sequence.
pub fn encode_expression(
    t: &mut Tape,
    p: &Staged,
    cfg: &RunConfig,
    tokens: &[usize],
) -> Result<Var, String> {
    if tokens.is_empty() {
        return Err("expression must contain at least one token".into());
    }
    for &id in tokens {
        if id >= crate::vocab::vocab_size() {
            return Err(format!("token id {id} outside vocabulary"));
        }
    }
    let n = tokens.len();
    let h = cfg.text_hidden;
    let embedded = t.embedding(p.var("text.embed"), tokens);
    let xs: Vec<Var> = (0..n).map(|i| t.gather_row(embedded, i)).collect();

    let run = |t: &mut Tape, dir: &str, order: Vec<usize>| -> Vec<Var> {
        let wx = p.var(&format!("text.{dir}.wx"));
        let wh = p.var(&format!("text.{dir}.wh"));
        let b = p.var(&format!("text.{dir}.b"));
        let mut state = t.leaf(ArrayD::zeros(IxDyn(&[h])));
        let mut out = vec![Var(usize::MAX); n];
        for i in order {
            let xin = t.vec_matmul(xs[i], wx);
            let hin = t.vec_matmul(state, wh);
            let s = t.add(xin, hin);
            let s = t.add(s, b);
            state = t.tanh(s);
            out[i] = state;
        }
        out
    };
    let fwd = run(t, "f", (0..n).collect());
    let bwd = run(t, "b", (0..n).rev().collect());
    let rows: Vec<Var> = (0..n).map(|i| t.concat_vec(fwd[i], bwd[i])).collect();
    Ok(t.stack_rows(&rows))
}

/// Per-word attention of one fusion step, captured for inspection.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AttentionRecord {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Alternative blending rules kept only for the test harness.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) enum FusionStrategy {
    Attention,
    Concat,
    Multiply,
    Mean,
}

struct FusionStep {
    feature: Var,
    record: AttentionRecord,
}

/// Word logits: projected words times the transposed spatial average of the
/// projected feature map.
fn attention_logits(t: &mut Tape, p: &Staged, base: &str, text: Var, feat: Var) -> (Var, Var) {
    let s_proj0 = t.matmul(text, p.var(&format!("{base}.att_s.w")));
    let s_proj = t.add_row_bias(s_proj0, p.var(&format!("{base}.att_s.b")));
    let f_proj = conv(t, p, &format!("{base}.att_f"), feat, 1);
    let avg = t.mean_spatial(f_proj);
    let c = t.data(avg).len();
    let avg_col = t.reshape(avg, &[c, 1]);
    let logits2 = t.matmul(s_proj, avg_col);
    let n = t.data(text).shape()[0];
    let logits = t.reshape(logits2, &[n]);
    (s_proj, logits)
}

/// Blends the attention-weighted language vector into the feature map. The
/// weights are taken as given so tests can force them.
fn fuse_with_attention(
    t: &mut Tape,
    p: &Staged,
    base: &str,
    feat: Var,
    s_proj: Var,
    weights: Var,
    strategy: FusionStrategy,
) -> Var {
    let shape = t.data(feat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let xhat = t.vec_matmul(weights, s_proj);
    match strategy {
        FusionStrategy::Attention => {
            let s0 = t.vec_matmul(xhat, p.var(&format!("{base}.mix_s.w")));
            let s_mix = t.add(s0, p.var(&format!("{base}.mix_s.b")));
            let f_mix = conv(t, p, &format!("{base}.mix_f"), feat, 1);
            let s_map = t.broadcast_chan(s_mix, h, w);
            t.mul(s_map, f_mix)
        }
        FusionStrategy::Multiply => {
            let s_map = t.broadcast_chan(xhat, h, w);
            t.mul(s_map, feat)
        }
        FusionStrategy::Mean => {
            let s0 = t.vec_matmul(xhat, p.var(&format!("{base}.mix_s.w")));
            let s_mix = t.add(s0, p.var(&format!("{base}.mix_s.b")));
            let f_mix = conv(t, p, &format!("{base}.mix_f"), feat, 1);
            let s_map = t.broadcast_chan(s_mix, h, w);
            let sum = t.add(s_map, f_mix);
            t.affine(sum, 0.5, 0.0)
        }
        FusionStrategy::Concat => {
            let s_map = t.broadcast_chan(xhat, h, w);
            let cat = t.concat_chan(feat, s_map);
            conv(t, p, &format!("{base}.cat"), cat, 1)
        }
    }
}

fn fuse_step(
    t: &mut Tape,
    p: &Staged,
    base: &str,
    text: Var,
    feat: Var,
    strategy: FusionStrategy,
) -> FusionStep {
    let (s_proj, logits) = attention_logits(t, p, base, text, feat);
    let weights = t.sigmoid(logits);
    let record = AttentionRecord {
        logits: t.data(logits).iter().copied().collect(),
        weights: t.data(weights).iter().copied().collect(),
    };
    let feature = fuse_with_attention(t, p, base, feat, s_proj, weights, strategy);
    FusionStep { feature, record }
}

/// Fusion and heatmap outputs over the active levels.
pub struct PositionOutputs {
    /// Final fused map per active level, `[c, h, w]`.
    pub fused: Vec<Var>,
    /// Heatmap per active level, `[1, h, w]`, values in (0,1).
    pub heatmaps: Vec<Var>,
    /// attention[level][step]
    pub attention: Vec<Vec<AttentionRecord>>,
}

/// Runs the configured number of fusion steps on every active level and
/// applies the heatmap head. `pyramid` must hold all five levels.
pub fn predict_heatmaps(
    t: &mut Tape,
    p: &Staged,
    cfg: &RunConfig,
    pyramid: &[Var],
    text: Var,
) -> PositionOutputs {
    let mut fused = Vec::new();
    let mut heatmaps = Vec::new();
    let mut attention = Vec::new();
    for i in cfg.level_lo..=cfg.level_hi {
        let mut feat = pyramid[i - 1];
        let mut records = Vec::new();
        for j in 0..cfg.fusion_steps {
            let step = fuse_step(
                t,
                p,
                &format!("fus.l{i}.s{j}"),
                text,
                feat,
                FusionStrategy::Attention,
            );
            feat = step.feature;
            records.push(step.record);
        }
        let logits = conv(t, p, &format!("fus.l{i}.head"), feat, 1);
        heatmaps.push(t.sigmoid(logits));
        fused.push(feat);
        attention.push(records);
    }
    PositionOutputs { fused, heatmaps, attention }
}

/// Normalized coordinate planes `[2, h, w]`: rows then columns, each axis
/// spanning [-1, 1] (a single cell maps to 0).
pub fn coord_channels(t: &mut Tape, h: usize, w: usize) -> Var {
    let axis = |n: usize, i: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = axis(h, y);
            data[h * w + y * w + x] = axis(w, x);
        }
    }
    t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, h, w]), data).unwrap())
}

/// Kernel map per active level: coordinate-augmented features through two
/// shared convolutions, `[c, h, w]` each.
pub fn build_kernel_pools(t: &mut Tape, p: &Staged, cfg: &RunConfig, pyramid: &[Var]) -> Vec<Var> {
    (cfg.level_lo..=cfg.level_hi)
        .map(|i| {
            let feat = pyramid[i - 1];
            let shape = t.data(feat).shape().to_vec();
            let coords = coord_channels(t, shape[1], shape[2]);
            let cat = t.concat_chan(feat, coords);
            let c1 = conv_tanh(t, p, "kern.c1", cat, 1);
            conv_tanh(t, p, "kern.c2", c1, 1)
        })
        .collect()
}

/// Quarter-resolution mask feature from pyramid levels 2 and up: each level
/// runs conv+tanh+upsample stages until stride 4, the results are summed
/// and projected.
pub fn decode_mask_feature(
    t: &mut Tape,
    p: &Staged,
    prefix: &str,
    levels_2_up: &[Var],
) -> Var {
    assert!(levels_2_up.len() == N_LEVELS - 1, "decoder wants levels 2..=5");
    let mut branches = Vec::new();
    for (off, &level) in levels_2_up.iter().enumerate() {
        let i = off + 2;
        let mut x = level;
        for k in 0..i - 1 {
            x = conv_tanh(t, p, &format!("{prefix}.l{i}.c{k}"), x, 1);
            x = t.upsample_bilinear2(x);
        }
        branches.push(x);
    }
    let sum = t.sum_n(&branches);
    conv_tanh(t, p, &format!("{prefix}.proj"), sum, 1)
}

/// One selected kernel position with its confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectedKernel {
    /// Index into the active-level list (not the pyramid index).
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Positions where the heatmap strictly exceeds the threshold, ordered by
/// descending score with (level, row, col) as the tie-break.
pub fn select_kernels(t: &Tape, heatmaps: &[Var], threshold: f64) -> Vec<SelectedKernel> {
    let mut out = Vec::new();
    for (li, &hm) in heatmaps.iter().enumerate() {
        let d = t.data(hm);
        let shape = d.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let ds = d.as_slice().unwrap();
        for r in 0..h {
            for c in 0..w {
                let score = ds[r * w + c];
                if score > threshold {
                    out.push(SelectedKernel { level: li, row: r, col: c, score });
                }
            }
        }
    }
    sort_kernels(&mut out);
    out
}

fn sort_kernels(ks: &mut [SelectedKernel]) {
    ks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.level.cmp(&b.level))
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
}

/// Kernels at every positive cell of the center targets, scored by the
/// current heatmaps, capped at `cap` in (level, row, col) order. Errors if
/// no cell is positive.
pub fn select_kernels_gt(
    t: &Tape,
    heatmaps: &[Var],
    targets: &[Vec<u8>],
    cap: usize,
) -> Result<Vec<SelectedKernel>, String> {
    assert_eq!(heatmaps.len(), targets.len());
    let mut out = Vec::new();
    for (li, (&hm, target)) in heatmaps.iter().zip(targets).enumerate() {
        let d = t.data(hm);
        let shape = d.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        assert_eq!(target.len(), h * w);
        let ds = d.as_slice().unwrap();
        for r in 0..h {
            for c in 0..w {
                if target[r * w + c] == 1 {
                    out.push(SelectedKernel { level: li, row: r, col: c, score: ds[r * w + c] });
                }
            }
        }
    }
    if out.is_empty() {
        return Err("position targets contain no positive cell".into());
    }
    out.truncate(cap);
    Ok(out)
}

/// Kernel at the single highest-scoring heatmap cell, the fallback when
/// thresholding selects nothing.
pub fn argmax_kernel(t: &Tape, heatmaps: &[Var]) -> SelectedKernel {
    let mut best = SelectedKernel { level: 0, row: 0, col: 0, score: f64::NEG_INFINITY };
    for (li, &hm) in heatmaps.iter().enumerate() {
        let d = t.data(hm);
        let shape = d.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let ds = d.as_slice().unwrap();
        for r in 0..h {
            for c in 0..w {
                if ds[r * w + c] > best.score {
                    best = SelectedKernel { level: li, row: r, col: c, score: ds[r * w + c] };
                }
            }
        }
    }
    best
}

/// Stacks the kernel vectors at the selected positions into `[k, c]`.
pub fn gather_kernels(t: &mut Tape, pools: &[Var], selected: &[SelectedKernel]) -> Var {
    assert!(!selected.is_empty());
    let rows: Vec<Var> = selected
        .iter()
        .map(|k| t.gather_pos(pools[k.level], k.row, k.col))
        .collect();
    t.stack_rows(&rows)
}

/// Per-kernel mask logits `[k, h/4, w/4]` by 1x1 dynamic convolution.
pub fn predict_mask_logits(t: &mut Tape, mask_feature: Var, kernels: Var) -> Var {
    t.dynamic_conv(mask_feature, kernels)
}

/// Sigmoid-squashed candidate masks, one per kernel.
pub fn predict_masks(t: &mut Tape, mask_feature: Var, kernels: Var) -> Var {
    let logits = predict_mask_logits(t, mask_feature, kernels);
    t.sigmoid(logits)
}

/// Single-channel mask probabilities from the fused features, the
/// decoder-only pathway used as the kernel ablation baseline. `fused_2_up`
/// must hold the fused maps for levels 2..=5.
pub fn predict_direct_mask(t: &mut Tape, p: &Staged, fused_2_up: &[Var]) -> Var {
    let m = decode_mask_feature(t, p, "dir", fused_2_up);
    let logits = conv(t, p, "dir.out", m, 1);
    t.sigmoid(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mode, Pipeline};
    use rand::SeedableRng;

    fn small_cfg() -> RunConfig {
        RunConfig {
            channels: 6,
            text_embed_dim: 5,
            text_hidden: 4,
            fusion_steps: 2,
            image_size: 64,
            level_lo: 1,
            level_hi: 5,
            mode: Mode::Full,
            pipeline: Pipeline::Kernel,
            ..RunConfig::default()
        }
    }

    fn setup(cfg: &RunConfig, seed: u64) -> (ParamStore, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(cfg, &mut rng);
        let n = cfg.image_size;
        let image: Vec<f64> = (0..3 * n * n).map(|i| (i % 97) as f64 / 96.0).collect();
        (params, image)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 1);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        assert_eq!(pyr.len(), 5);
        for (i, &v) in pyr.iter().enumerate() {
            let stride = 1 << (i + 2);
            assert_eq!(t.data(v).shape(), &[6, 64 / stride, 64 / stride]);
        }
    }

    #[test]
    fn indivisible_image_side_is_rejected() {
        let mut cfg = small_cfg();
        cfg.image_size = 96;
        let (params, _) = setup(&small_cfg(), 1);
        let image = vec![0.5; 3 * 96 * 96];
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let err = encode_image(&mut t, &staged, &cfg, &image).unwrap_err();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn encoders_are_deterministic_and_finite() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 2);
        let run = || {
            let mut t = Tape::new();
            let staged = params.stage(&mut t);
            let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
            pyr.iter()
                .flat_map(|&v| t.data(v).iter().copied().collect::<Vec<f64>>())
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn expression_rows_depend_on_whole_sequence() {
        let cfg = small_cfg();
        let (params, _) = setup(&cfg, 3);
        let encode = |tokens: &[usize]| {
            let mut t = Tape::new();
            let staged = params.stage(&mut t);
            let e = encode_expression(&mut t, &staged, &cfg, tokens).unwrap();
            t.data(e).clone()
        };
        let red_circle = encode(&crate::vocab::tokenize("red circle").unwrap());
        let red_square = encode(&crate::vocab::tokenize("red square").unwrap());
        assert_eq!(red_circle.shape(), &[2, 8]);
        // row 0 is "red" in both, but the backward pass sees the second word
        let row0_a: Vec<f64> = red_circle.slice(ndarray::s![0, ..].as_ref()).iter().copied().collect();
        let row0_b: Vec<f64> = red_square.slice(ndarray::s![0, ..].as_ref()).iter().copied().collect();
        assert_ne!(row0_a, row0_b);

        let single = encode(&crate::vocab::tokenize("red").unwrap());
        assert_eq!(single.shape(), &[1, 8]);
        assert_eq!(encode(&crate::vocab::tokenize("red circle").unwrap()), red_circle);
    }

    #[test]
    fn attention_zero_feature_gives_half_weights() {
        let cfg = small_cfg();
        let (params, _) = setup(&cfg, 4);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let text = encode_expression(&mut t, &staged, &cfg, &[4, 4, 4]).unwrap();
        let zeros = t.leaf(ArrayD::zeros(IxDyn(&[6, 4, 4])));
        let step = fuse_step(&mut t, &staged, "fus.l1.s0", text, zeros, FusionStrategy::Attention);
        // att_f bias is zero-initialized, so the projected average is zero
        for (&l, &w) in step.record.logits.iter().zip(&step.record.weights) {
            assert_eq!(l, 0.0);
            assert_eq!(w, 0.5);
        }
        // identical tokens produce identical logits
        assert_eq!(step.record.logits[0], step.record.logits[1]);
        assert_eq!(step.record.logits[1], step.record.logits[2]);
    }

    #[test]
    fn attention_logits_match_matrix_oracle() {
        let cfg = small_cfg();
        let (params, _) = setup(&cfg, 5);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let text = t.leaf(ArrayD::from_shape_vec(
            IxDyn(&[2, 8]),
            (0..16).map(|i| (i as f64) * 0.07 - 0.5).collect(),
        ).unwrap());
        let feat = t.leaf(ArrayD::from_shape_vec(
            IxDyn(&[6, 2, 2]),
            (0..24).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect(),
        ).unwrap());
        let (_s_proj, logits) = attention_logits(&mut t, &staged, "fus.l1.s0", text, feat);

        // independent oracle from raw parameter arrays
        let w = params.get("fus.l1.s0.att_s.w");
        let b = params.get("fus.l1.s0.att_s.b");
        let fw = params.get("fus.l1.s0.att_f.w");
        let fb = params.get("fus.l1.s0.att_f.b");
        let text_d = t.data(text).clone();
        let feat_d = t.data(feat).clone();
        let mut avg = vec![0.0; 6];
        for co in 0..6 {
            let mut s = 0.0;
            for pos in 0..4 {
                let mut v = fb[[co]];
                for ci in 0..6 {
                    v += fw[[co, ci, 0, 0]] * feat_d[[ci, pos / 2, pos % 2]];
                }
                s += v;
            }
            avg[co] = s / 4.0;
        }
        for word in 0..2 {
            let mut proj = vec![0.0; 6];
            for cc in 0..6 {
                let mut v = b[[cc]];
                for d in 0..8 {
                    v += text_d[[word, d]] * w[[d, cc]];
                }
                proj[cc] = v;
            }
            let expect: f64 = proj.iter().zip(&avg).map(|(a, b)| a * b).sum();
            let got = t.data(logits).as_slice().unwrap()[word];
            assert!((got - expect).abs() < 1e-10, "word {word}: {got} vs {expect}");
        }
    }

    #[test]
    fn forced_zero_attention_annihilates_output() {
        let cfg = small_cfg();
        let (mut params, _) = setup(&cfg, 6);
        // bias-free language mixing for the annihilation identity
        params.insert("fus.l1.s0.mix_s.b".into(), ArrayD::zeros(IxDyn(&[6])));
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let text = t.leaf(ArrayD::from_elem(IxDyn(&[2, 8]), 0.3));
        let feat = t.leaf(ArrayD::from_elem(IxDyn(&[6, 3, 3]), 0.7));
        let (s_proj, _) = attention_logits(&mut t, &staged, "fus.l1.s0", text, feat);
        let zero_w = t.leaf(ArrayD::zeros(IxDyn(&[2])));
        let out = fuse_with_attention(
            &mut t,
            &staged,
            "fus.l1.s0",
            feat,
            s_proj,
            zero_w,
            FusionStrategy::Attention,
        );
        for v in t.data(out).iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn scalar_fusion_matches_closed_form() {
        // c=1, one word, all projections identity: out = sigmoid(xs*f)*xs*f
        let cfg = RunConfig {
            channels: 1,
            text_hidden: 1,
            text_embed_dim: 1,
            ..small_cfg()
        };
        let mut params = ParamStore::new();
        let one = |shape: &[usize]| ArrayD::from_elem(IxDyn(shape), 1.0);
        params.insert("fus.l1.s0.att_s.w".into(), one(&[2, 1]));
        params.insert("fus.l1.s0.att_s.b".into(), ArrayD::zeros(IxDyn(&[1])));
        params.insert("fus.l1.s0.att_f.w".into(), one(&[1, 1, 1, 1]));
        params.insert("fus.l1.s0.att_f.b".into(), ArrayD::zeros(IxDyn(&[1])));
        params.insert("fus.l1.s0.mix_s.w".into(), one(&[1, 1]));
        params.insert("fus.l1.s0.mix_s.b".into(), ArrayD::zeros(IxDyn(&[1])));
        params.insert("fus.l1.s0.mix_f.w".into(), one(&[1, 1, 1, 1]));
        params.insert("fus.l1.s0.mix_f.b".into(), ArrayD::zeros(IxDyn(&[1])));
        let _ = &cfg;
        let (xs, f) = (0.8f64, -0.4f64);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        // text row = [xs, 0] so the identity-ish att_s.w [2,1] passes xs through
        let text = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![xs, 0.0]).unwrap());
        let feat = t.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1]), f));
        let step = fuse_step(&mut t, &staged, "fus.l1.s0", text, feat, FusionStrategy::Attention);
        let sig = 1.0 / (1.0 + (-(xs * f)).exp());
        let expect = sig * xs * f;
        let got = t.data(step.feature)[[0, 0, 0]];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn fusion_broadcasts_language_uniformly() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 7);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        let text = encode_expression(&mut t, &staged, &cfg, &[0, 5, 13]).unwrap();
        let step = fuse_step(&mut t, &staged, "fus.l2.s0", text, pyr[1], FusionStrategy::Attention);
        // recompute the feature factor; output / factor must be constant per channel
        let f_mix = conv(&mut t, &staged, "fus.l2.s0.mix_f", pyr[1], 1);
        let out = t.data(step.feature).clone();
        let fm = t.data(f_mix).clone();
        for c in 0..6 {
            for p in 0..64 {
                let lhs = out[[c, p / 8, p % 8]] * fm[[c, 0, 0]];
                let rhs = out[[c, 0, 0]] * fm[[c, p / 8, p % 8]];
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmaps_cover_levels_and_unit_range() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 8);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        let text = encode_expression(&mut t, &staged, &cfg, &[4, 12]).unwrap();
        let out = predict_heatmaps(&mut t, &staged, &cfg, &pyr, text);
        assert_eq!(out.heatmaps.len(), 5);
        for (i, &hm) in out.heatmaps.iter().enumerate() {
            let stride = 1 << (i + 2);
            assert_eq!(t.data(hm).shape(), &[1, 64 / stride, 64 / stride]);
            for v in t.data(hm).iter() {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
        // steps attend differently on random inputs
        let a = &out.attention[0][0].logits;
        let b = &out.attention[0][1].logits;
        let max_diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn alternative_fusion_strategies_run() {
        let cfg = small_cfg();
        let (mut params, image) = setup(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        params.ensure_uniform("fus.l1.s0.cat.w", &[6, 12, 1, 1], 0.2, &mut rng);
        params.ensure_zeros("fus.l1.s0.cat.b", &[6]);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        let text = encode_expression(&mut t, &staged, &cfg, &[4, 12]).unwrap();
        let mut outs = Vec::new();
        for strat in [
            FusionStrategy::Attention,
            FusionStrategy::Concat,
            FusionStrategy::Multiply,
            FusionStrategy::Mean,
        ] {
            let s = fuse_step(&mut t, &staged, "fus.l1.s0", text, pyr[0], strat);
            assert_eq!(t.data(s.feature).shape(), &[6, 16, 16]);
            outs.push(t.data(s.feature).clone());
        }
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[0], outs[2]);
        assert_ne!(outs[0], outs[3]);
    }

    #[test]
    fn coordinates_span_unit_box() {
        let mut t = Tape::new();
        let c = coord_channels(&mut t, 4, 4);
        let d = t.data(c);
        assert_eq!(d[[0, 0, 0]], -1.0);
        assert_eq!(d[[1, 0, 0]], -1.0);
        assert_eq!(d[[0, 3, 3]], 1.0);
        assert_eq!(d[[1, 3, 3]], 1.0);
        let mut t2 = Tape::new();
        let c1 = coord_channels(&mut t2, 1, 1);
        assert_eq!(t2.data(c1)[[0, 0, 0]], 0.0);
        assert_eq!(t2.data(c1)[[1, 0, 0]], 0.0);
    }

    #[test]
    fn kernel_pools_distinguish_positions_by_coordinates() {
        let cfg = small_cfg();
        let (params, _) = setup(&cfg, 10);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        // constant feature map: only coordinates can separate positions
        let pyramid: Vec<Var> = (0..5)
            .map(|i| {
                let s = 16 >> i;
                t.leaf(ArrayD::from_elem(IxDyn(&[6, s.max(1), s.max(1)]), 0.25))
            })
            .collect();
        let pools = build_kernel_pools(&mut t, &staged, &cfg, &pyramid);
        assert_eq!(pools.len(), 5);
        assert_eq!(t.data(pools[0]).shape(), &[6, 16, 16]);
        let a = t.gather_pos(pools[0], 2, 3);
        let b = t.gather_pos(pools[0], 9, 12);
        assert_ne!(t.data(a), t.data(b));
    }

    #[test]
    fn threshold_selection_matches_brute_force_and_is_strict() {
        let mut t = Tape::new();
        let hm = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.2, 0.05, 0.11, 0.1]).unwrap(),
        );
        let sel = select_kernels(&t, &[hm], 0.1);
        assert_eq!(sel.len(), 2);
        assert_eq!((sel[0].row, sel[0].col, sel[0].score), (0, 0, 0.2));
        assert_eq!((sel[1].row, sel[1].col, sel[1].score), (1, 0, 0.11));
        assert!(select_kernels(&t, &[hm], 0.5).is_empty());
    }

    #[test]
    fn gt_selection_needs_positives_and_respects_cap() {
        let mut t = Tape::new();
        let hm = t.leaf(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.3));
        let mut target = vec![0u8; 16];
        for r in 0..3 {
            for c in 0..3 {
                target[r * 4 + c] = 1;
            }
        }
        let sel = select_kernels_gt(&t, &[hm], &[target.clone()], 64).unwrap();
        assert_eq!(sel.len(), 9);
        let capped = select_kernels_gt(&t, &[hm], &[target], 4).unwrap();
        assert_eq!(capped.len(), 4);
        assert!(select_kernels_gt(&t, &[hm], &[vec![0u8; 16]], 64).is_err());
    }

    #[test]
    fn decoder_outputs_quarter_scale_and_ignores_level_one() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 11);
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        let m = decode_mask_feature(&mut t, &staged, "seg", &pyr[1..]);
        assert_eq!(t.data(m).shape(), &[6, 16, 16]);

        // replace level 1 with noise: same mask feature
        let mut t2 = Tape::new();
        let staged2 = params.stage(&mut t2);
        let mut pyr2 = encode_image(&mut t2, &staged2, &cfg, &image).unwrap();
        pyr2[0] = t2.leaf(ArrayD::from_elem(IxDyn(&[6, 16, 16]), 9.9));
        let m2 = decode_mask_feature(&mut t2, &staged2, "seg", &pyr2[1..]);
        assert_eq!(t.data(m), t2.data(m2));
    }

    #[test]
    fn dynamic_masks_follow_dot_product_oracle() {
        let mut t = Tape::new();
        let m = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8])
                .unwrap(),
        );
        let zero_kernel = t.leaf(ArrayD::zeros(IxDyn(&[1, 2])));
        let p0 = predict_masks(&mut t, m, zero_kernel);
        for v in t.data(p0).iter() {
            assert_eq!(*v, 0.5);
        }
        let g = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.5, -2.0, 1.5, -2.0]).unwrap());
        let p = predict_masks(&mut t, m, g);
        let md = t.data(m).clone();
        for y in 0..2 {
            for x in 0..2 {
                let logit = 1.5 * md[[0, y, x]] - 2.0 * md[[1, y, x]];
                let expect = 1.0 / (1.0 + (-logit).exp());
                assert!((t.data(p)[[0, y, x]] - expect).abs() < 1e-12);
                assert_eq!(t.data(p)[[0, y, x]], t.data(p)[[1, y, x]]);
            }
        }
    }

    #[test]
    fn mask_logits_are_linear_in_the_kernel() {
        let mut t = Tape::new();
        let m = t.leaf(ArrayD::from_shape_vec(
            IxDyn(&[3, 2, 2]),
            (0..12).map(|i| i as f64 * 0.11 - 0.6).collect(),
        ).unwrap());
        let g = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.3, -0.7, 0.2]).unwrap());
        let g3 = t.affine(g, 3.0, 0.0);
        let l1 = predict_mask_logits(&mut t, m, g);
        let l3 = predict_mask_logits(&mut t, m, g3);
        for (a, b) in t.data(l1).iter().zip(t.data(l3).iter()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn language_reaches_only_the_fusion_path() {
        let cfg = small_cfg();
        let (params, image) = setup(&cfg, 12);
        let run = |tokens: &[usize]| {
            let mut t = Tape::new();
            let staged = params.stage(&mut t);
            let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
            let text = encode_expression(&mut t, &staged, &cfg, tokens).unwrap();
            let out = predict_heatmaps(&mut t, &staged, &cfg, &pyr, text);
            let pools = build_kernel_pools(&mut t, &staged, &cfg, &pyr);
            let m = decode_mask_feature(&mut t, &staged, "seg", &pyr[1..]);
            (
                t.data(out.heatmaps[0]).clone(),
                t.data(pools[0]).clone(),
                t.data(m).clone(),
            )
        };
        let (hm_a, pool_a, m_a) = run(&[4, 12]);
        let (hm_b, pool_b, m_b) = run(&[7, 13]);
        assert_ne!(hm_a, hm_b, "heatmaps must react to language");
        assert_eq!(pool_a, pool_b, "kernel pools must not see language");
        assert_eq!(m_a, m_b, "mask feature must not see language");
    }

    #[test]
    fn direct_pathway_produces_single_mask() {
        let cfg = RunConfig { pipeline: Pipeline::Direct, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = build_params(&cfg, &mut rng);
        let image: Vec<f64> = (0..3 * 64 * 64).map(|i| (i % 31) as f64 / 30.0).collect();
        let mut t = Tape::new();
        let staged = params.stage(&mut t);
        let pyr = encode_image(&mut t, &staged, &cfg, &image).unwrap();
        let text = encode_expression(&mut t, &staged, &cfg, &[5, 14]).unwrap();
        let out = predict_heatmaps(&mut t, &staged, &cfg, &pyr, text);
        // fused maps for levels 2..=5 drive the direct decoder
        let fused: Vec<Var> = out.fused[1..].to_vec();
        let mask = predict_direct_mask(&mut t, &staged, &fused);
        assert_eq!(t.data(mask).shape(), &[1, 16, 16]);
        for v in t.data(mask).iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }
}
