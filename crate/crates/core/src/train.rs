//! Orchestration: sample preparation, the SGD loop with logging and
//! checkpointing, the full inference pipeline, and split evaluation.

use crate::checkpoint::{self, CheckpointError};
use crate::config::{Mode, Pipeline, RunConfig};
use crate::dataset::{self, DataError, DatasetSample};
use crate::inference::{self, EvalReport, MetricsError, SampleIou, ScoredMask};
use crate::losses::{self, LossError, LossReport};
use crate::model::{self, AttentionRecord};
use crate::params::{ParamStore, Staged};
use crate::tape::{Tape, Var};
use crate::weak::{WEAK_BG, WEAK_FG, WEAK_UNKNOWN};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Token(#[from] crate::vocab::UnknownToken),
    #[error("sample {id} lacks the labels required by mode {mode}")]
    MissingLabels { id: String, mode: &'static str },
    #[error("sample {id} has no ground-truth mask to evaluate against")]
    MissingGroundTruth { id: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("non-finite loss at step {step}; diagnostics written to {path}")]
    NonFinite { step: usize, path: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Everything one sample contributes to training or evaluation, precomputed
/// once so epochs reuse it.
pub struct PreparedSample {
    pub id: String,
    /// Planar `[3, n, n]` image in [0,1].
    pub image: Vec<f64>,
    pub tokens: Vec<usize>,
    /// Center-block maps per active level.
    pub pos_targets: Vec<Vec<u8>>,
    /// Quarter-resolution {0,1} target, full supervision only.
    pub quarter_gt: Option<Vec<f64>>,
    /// Full-resolution ground truth for scoring.
    pub gt_bits: Option<Vec<bool>>,
    /// Quarter-resolution {1,0,-1} labels, weak modes only.
    pub weak_labels: Option<Vec<i8>>,
    /// Planar quarter-resolution image for the pairwise term.
    pub rgb_quarter: Option<Vec<f64>>,
}

/// What the samples will be used for; evaluation insists on ground truth.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Eval,
}

/// Quarter-resolution weak labels for the configured mode.
fn weak_labels_quarter(cfg: &RunConfig, s: &DatasetSample) -> Result<Vec<i8>, PipelineError> {
    let q = cfg.mask_size();
    let mode = cfg.mode.resolved();
    let mut labels = match mode {
        Mode::PointFg => vec![WEAK_UNKNOWN; q * q],
        Mode::PointFgBg => {
            let mut l = vec![WEAK_UNKNOWN; q * q];
            let (tl, br) = (s.clicks.top_left, s.clicks.bottom_right);
            for qr in 0..q {
                for qc in 0..q {
                    // background only where the whole 4x4 block misses the box
                    let outside = qr * 4 + 3 < tl.0
                        || qr * 4 > br.0
                        || qc * 4 + 3 < tl.1
                        || qc * 4 > br.1;
                    if outside {
                        l[qr * q + qc] = WEAK_BG;
                    }
                }
            }
            l
        }
        Mode::Superpixel | Mode::SuperpixelGcrf => {
            let full = s.weak_labels.as_ref().ok_or(PipelineError::MissingLabels {
                id: s.image_id.clone(),
                mode: mode.name(),
            })?;
            crate::weak::downsample_labels_nn(full, cfg.image_size, cfg.image_size, 4)
        }
        Mode::Full | Mode::Weak => unreachable!("resolved weak mode expected"),
    };
    // the click pixel is foreground by definition; guarantee the signal
    // survives downsampling
    let (cr, cc) = s.clicks.center;
    labels[(cr / 4) * q + cc / 4] = WEAK_FG;
    Ok(labels)
}

/// Converts raw dataset records into training- or evaluation-ready tensors.
pub fn prepare_samples(
    cfg: &RunConfig,
    samples: &[DatasetSample],
    purpose: Purpose,
) -> Result<Vec<PreparedSample>, PipelineError> {
    let levels = cfg.active_levels();
    let n = cfg.image_size;
    let mode = cfg.mode.resolved();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let tokens: Vec<usize> = s
            .tokens
            .iter()
            .map(|t| crate::vocab::token_id(t).ok_or_else(|| crate::vocab::UnknownToken(t.clone())))
            .collect::<Result<_, _>>()?;

        let gt_bits = s.mask.as_ref().map(losses::mask_bits);
        if purpose == Purpose::Eval && gt_bits.is_none() {
            return Err(PipelineError::MissingGroundTruth { id: s.image_id.clone() });
        }

        let pos_targets = if mode.is_full() {
            let bits = gt_bits.as_ref().ok_or(PipelineError::MissingLabels {
                id: s.image_id.clone(),
                mode: "full",
            })?;
            losses::make_position_targets(bits, n, n, &levels)?
        } else {
            losses::make_position_targets_from_point(s.clicks.center, &levels)
        };

        let quarter_gt = match &gt_bits {
            Some(bits) if mode.is_full() || purpose == Purpose::Eval => {
                Some(losses::downsample_gt_mask(bits, n, n)?)
            }
            _ => None,
        };

        let (weak_labels, rgb_quarter) = if mode.is_full() || purpose == Purpose::Eval {
            (None, None)
        } else {
            let labels = weak_labels_quarter(cfg, s)?;
            let rgb = mode
                .uses_gcrf()
                .then(|| dataset::downsample_rgb_mean(&s.image, 4));
            (Some(labels), rgb)
        };

        out.push(PreparedSample {
            id: s.image_id.clone(),
            image: s.image.to_planar_f64(),
            tokens,
            pos_targets,
            quarter_gt,
            gt_bits,
            weak_labels,
            rgb_quarter,
        });
    }
    Ok(out)
}

struct ForwardCore {
    pyramid: Vec<Var>,
    heatmaps: Vec<Var>,
    fused: Vec<Var>,
    attention: Vec<Vec<AttentionRecord>>,
}

fn forward_core(
    t: &mut Tape,
    staged: &Staged,
    cfg: &RunConfig,
    image: &[f64],
    tokens: &[usize],
) -> Result<ForwardCore, PipelineError> {
    let pyramid = model::encode_image(t, staged, cfg, image).map_err(PipelineError::Model)?;
    let text = model::encode_expression(t, staged, cfg, tokens).map_err(PipelineError::Model)?;
    let out = model::predict_heatmaps(t, staged, cfg, &pyramid, text);
    Ok(ForwardCore {
        pyramid,
        heatmaps: out.heatmaps,
        fused: out.fused,
        attention: out.attention,
    })
}

/// Decoder inputs for the direct pathway: the fused map where a level is
/// active, the raw pyramid map otherwise (levels 2..=5).
fn direct_inputs(cfg: &RunConfig, pyramid: &[Var], fused: &[Var]) -> Vec<Var> {
    (2..=model::N_LEVELS)
        .map(|i| {
            if (cfg.level_lo..=cfg.level_hi).contains(&i) {
                fused[i - cfg.level_lo]
            } else {
                pyramid[i - 1]
            }
        })
        .collect()
}

/// Candidate mask probabilities for training: kernels picked at the target
/// centers, or the direct decoder's single map.
fn training_mask_probs(
    t: &mut Tape,
    staged: &Staged,
    cfg: &RunConfig,
    core: &ForwardCore,
    pos_targets: &[Vec<u8>],
) -> Result<Var, PipelineError> {
    match cfg.pipeline {
        Pipeline::Kernel => {
            let selected =
                model::select_kernels_gt(t, &core.heatmaps, pos_targets, cfg.max_kernels)
                    .map_err(PipelineError::Model)?;
            let pools = model::build_kernel_pools(t, staged, cfg, &core.pyramid);
            let kernels = model::gather_kernels(t, &pools, &selected);
            let mfeat = model::decode_mask_feature(t, staged, "seg", &core.pyramid[1..]);
            Ok(model::predict_masks(t, mfeat, kernels))
        }
        Pipeline::Direct => {
            let inputs = direct_inputs(cfg, &core.pyramid, &core.fused);
            Ok(model::predict_direct_mask(t, staged, &inputs))
        }
    }
}

/// Builds one sample's complete objective on the tape.
fn sample_loss(
    t: &mut Tape,
    staged: &Staged,
    cfg: &RunConfig,
    s: &PreparedSample,
) -> Result<(Var, LossReport), PipelineError> {
    let core = forward_core(t, staged, cfg, &s.image, &s.tokens)?;
    let pos = losses::focal_position_loss(
        t,
        &core.heatmaps,
        &s.pos_targets,
        cfg.focal_alpha,
        cfg.focal_gamma,
    );
    let probs = training_mask_probs(t, staged, cfg, &core, &s.pos_targets)?;

    if cfg.mode.is_full() {
        let target = s.quarter_gt.as_ref().ok_or(PipelineError::MissingLabels {
            id: s.id.clone(),
            mode: "full",
        })?;
        let seg = losses::dice_loss(t, probs, target, cfg.dice_eps)?;
        Ok(losses::total_loss_full(t, pos, seg))
    } else {
        let labels = s.weak_labels.as_ref().ok_or(PipelineError::MissingLabels {
            id: s.id.clone(),
            mode: cfg.mode.resolved().name(),
        })?;
        let (seg, _no_labels) = losses::partial_ce_loss(t, probs, labels);
        if cfg.mode.uses_gcrf() {
            let rgb = s.rgb_quarter.as_ref().expect("gcrf mode prepares the quarter image");
            let gate = vec![true; cfg.mask_size() * cfg.mask_size()];
            let crf = losses::gated_crf_loss(t, probs, rgb, &gate, cfg);
            Ok(losses::total_loss_weak(t, pos, seg, crf, cfg.crf_loss_weight))
        } else {
            Ok(losses::total_loss_full(t, pos, seg))
        }
    }
}

/// Final artifacts of one inference pass.
pub struct InferenceOutput {
    /// Full-resolution binary mask.
    pub mask: Vec<bool>,
    /// Quarter-resolution binary mask it was upsampled from.
    pub quarter: Vec<bool>,
    /// (level index, grid size, values) per active level.
    pub heatmaps: Vec<(usize, usize, Vec<f64>)>,
    /// attention[level][step]
    pub attention: Vec<Vec<AttentionRecord>>,
    pub n_candidates: usize,
}

/// Runs the full pipeline on one image/expression pair: heatmaps, kernel
/// selection with argmax fallback, candidate masks, suppression, merge.
/// `gt_targets` substitutes target-center selection when configured.
pub fn infer_sample(
    params: &ParamStore,
    cfg: &RunConfig,
    image: &[f64],
    tokens: &[usize],
    gt_targets: Option<&[Vec<u8>]>,
) -> Result<InferenceOutput, PipelineError> {
    let mut t = Tape::new();
    let staged = params.stage(&mut t);
    let core = forward_core(&mut t, &staged, cfg, image, tokens)?;
    let q = cfg.mask_size();

    let levels = cfg.active_levels();
    let heatmaps: Vec<(usize, usize, Vec<f64>)> = core
        .heatmaps
        .iter()
        .zip(&levels)
        .map(|(&hm, spec)| {
            (spec.index, spec.size, t.data(hm).iter().copied().collect::<Vec<f64>>())
        })
        .collect();

    let (quarter, n_candidates) = match cfg.pipeline {
        Pipeline::Kernel => {
            let mut selected = match (cfg.use_gt_position, gt_targets) {
                (true, Some(targets)) => {
                    model::select_kernels_gt(&t, &core.heatmaps, targets, cfg.max_kernels)
                        .map_err(PipelineError::Model)?
                }
                _ => model::select_kernels(&t, &core.heatmaps, cfg.kernel_threshold),
            };
            if selected.is_empty() {
                selected = vec![model::argmax_kernel(&t, &core.heatmaps)];
            }
            let pools = model::build_kernel_pools(&mut t, &staged, cfg, &core.pyramid);
            let kernels = model::gather_kernels(&mut t, &pools, &selected);
            let mfeat = model::decode_mask_feature(&mut t, &staged, "seg", &core.pyramid[1..]);
            let probs = model::predict_masks(&mut t, mfeat, kernels);
            let data = t.data(probs).as_slice().unwrap().to_vec();

            let candidates: Vec<ScoredMask> = selected
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    ScoredMask::new(
                        data[i * q * q..(i + 1) * q * q].to_vec(),
                        q,
                        q,
                        k.score,
                        cfg.mask_threshold,
                    )
                })
                .collect();
            let decayed = inference::matrix_nms(&candidates, cfg.nms_sigma);
            let merged = inference::merge_masks(&candidates, &decayed, 1)
                .expect("selection guarantees at least one candidate");
            (merged.quarter, candidates.len())
        }
        Pipeline::Direct => {
            let inputs = direct_inputs(cfg, &core.pyramid, &core.fused);
            let probs = model::predict_direct_mask(&mut t, &staged, &inputs);
            let mask: Vec<bool> = t
                .data(probs)
                .iter()
                .map(|&p| p >= cfg.mask_threshold)
                .collect();
            (mask, 1)
        }
    };

    Ok(InferenceOutput {
        mask: inference::upsample_mask_nn(&quarter, q, q, 4),
        quarter,
        heatmaps,
        attention: core.attention,
        n_candidates,
    })
}

/// Scores the model over prepared samples that carry ground truth.
///
/// IoU is computed at the mask lattice (stride 4), against the downsampled
/// target the segmentation loss optimizes. At this image scale the x4
/// upsampling quantization alone would dominate a full-resolution score.
pub fn evaluate_samples(
    params: &ParamStore,
    cfg: &RunConfig,
    samples: &[PreparedSample],
) -> Result<EvalReport, PipelineError> {
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s
            .quarter_gt
            .as_ref()
            .ok_or_else(|| PipelineError::MissingGroundTruth { id: s.id.clone() })?;
        let gt_bits: Vec<bool> = gt.iter().map(|&v| v >= 0.5).collect();
        let out = infer_sample(
            params,
            cfg,
            &s.image,
            &s.tokens,
            cfg.use_gt_position.then_some(s.pos_targets.as_slice()),
        )?;
        scored.push(SampleIou { id: s.id.clone(), iou: inference::iou(&out.quarter, &gt_bits) });
    }
    Ok(inference::evaluate(scored)?)
}

/// One CSV row of the training log.
fn log_row(
    step: usize,
    epoch: usize,
    report: &LossReport,
    val_miou: Option<f64>,
) -> String {
    let crf = report.crf.map(|v| format!("{v:.6}")).unwrap_or_default();
    let val = val_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{step},{epoch},{:.6},{:.6},{:.6},{crf},{val}\n",
        report.total, report.pos, report.seg
    )
}

/// Outcome of a training run.
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: LossReport,
    pub last_val: Option<EvalReport>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Rescales all gradients so their joint L2 norm is at most `limit`.
/// A nonpositive limit disables clipping.
fn clip_global_norm(grads: &mut BTreeMap<String, ArrayD<f64>>, limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let sq: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > limit {
        let s = limit / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let crf_count = reports.iter().filter(|r| r.crf.is_some()).count();
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        pos: reports.iter().map(|r| r.pos).sum::<f64>() / n,
        seg: reports.iter().map(|r| r.seg).sum::<f64>() / n,
        crf: (crf_count > 0).then(|| {
            reports.iter().filter_map(|r| r.crf).sum::<f64>() / crf_count as f64
        }),
    }
}

fn dump_diagnostics(
    cfg: &RunConfig,
    step: usize,
    sample_id: &str,
    report: &LossReport,
    params: &ParamStore,
) -> Result<String, PipelineError> {
    let path = cfg.out_dir.join("diagnostics.json");
    let body = serde_json::json!({
        "step": step,
        "sample": sample_id,
        "loss": report,
        "param_max_abs": params.max_abs(),
        "mode": cfg.mode.name(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap())
        .map_err(io_err(&path))?;
    Ok(path.display().to_string())
}

/// Full SGD run from the configured dataset: builds parameters from the
/// seed, loops epochs (optionally capped by `steps`), logs a CSV row every
/// `log_every` steps, evaluates the validation split periodically, and
/// writes the final checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let train_raw = dataset::read_split(&cfg.data_root, "train")?;
    let train_set = prepare_samples(cfg, &train_raw, Purpose::Train)?;
    drop(train_raw);
    let val_set = match dataset::read_split(&cfg.data_root, "val") {
        Ok(raw) => prepare_samples(cfg, &raw, Purpose::Eval)?,
        Err(DataError::Io { .. }) => Vec::new(),
        Err(e) => return Err(e.into()),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::build_params(cfg, &mut rng);

    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    log.write_all(b"step,epoch,loss_total,loss_pos,loss_seg,loss_crf,val_miou\n")
        .map_err(io_err(&log_path))?;

    // a step cap overrides the epoch budget: cycle passes until it is hit
    let step_cap = cfg.steps.unwrap_or(usize::MAX);
    let n_epochs = if cfg.steps.is_some() { usize::MAX } else { cfg.epochs };
    let mut step = 0usize;
    let mut window: Vec<LossReport> = Vec::new();
    let mut last_report = LossReport { total: 0.0, pos: 0.0, seg: 0.0, crf: None };
    let mut last_val: Option<EvalReport> = None;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..n_epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            let mut reports = Vec::with_capacity(batch.len());
            for &idx in batch {
                let s = &train_set[idx];
                let mut t = Tape::new();
                let staged = params.stage(&mut t);
                let (total, report) = sample_loss(&mut t, &staged, cfg, s)?;
                if !report.total.is_finite() {
                    let path = dump_diagnostics(cfg, step, &s.id, &report, &params)?;
                    return Err(PipelineError::NonFinite { step, path });
                }
                let mut g = t.backward(total);
                staged.accumulate_into(&mut g, &mut grads);
                reports.push(report);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            params.sgd_step(&grads, cfg.lr, cfg.momentum, cfg.weight_decay);
            step += 1;

            last_report = mean_report(&reports);
            window.push(last_report.clone());
            if step % cfg.log_every.max(1) == 0 {
                let mean = mean_report(&window);
                log.write_all(log_row(step, epoch, &mean, None).as_bytes())
                    .map_err(io_err(&log_path))?;
                window.clear();
            }
            if step >= step_cap {
                break 'epochs;
            }
        }

        let eval_due = cfg.eval_every_epochs > 0
            && (epoch + 1) % cfg.eval_every_epochs == 0
            && !val_set.is_empty();
        if eval_due {
            let report = evaluate_samples(&params, cfg, &val_set)?;
            log.write_all(
                log_row(step, epoch, &mean_report(&window), Some(report.miou)).as_bytes(),
            )
            .map_err(io_err(&log_path))?;
            window.clear();
            last_val = Some(report);
        }
    }

    let checkpoint_path = cfg.out_dir.join("model.ckpt");
    checkpoint::save(&checkpoint_path, cfg, step as u64, &rng, &params)?;
    Ok(TrainSummary {
        steps_run: step,
        final_loss: last_report,
        last_val,
        checkpoint_path,
        log_path,
    })
}
