//! Run configuration: one JSON-serializable struct drives every subcommand.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Supervision mode. `weak` is shorthand for the strongest weak setup
/// (superpixel labels plus the pairwise CRF term).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Weak,
    PointFg,
    PointFgBg,
    Superpixel,
    SuperpixelGcrf,
}

impl Mode {
    /// Canonical mode with the `weak` alias expanded.
    pub fn resolved(self) -> Mode {
        match self {
            Mode::Weak => Mode::SuperpixelGcrf,
            m => m,
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Mode::Full)
    }

    /// Weak modes that place background labels from the box corners.
    pub fn uses_bg_labels(self) -> bool {
        matches!(
            self.resolved(),
            Mode::PointFgBg | Mode::Superpixel | Mode::SuperpixelGcrf
        )
    }

    /// Weak modes whose foreground region comes from a superpixel.
    pub fn uses_superpixels(self) -> bool {
        matches!(self.resolved(), Mode::Superpixel | Mode::SuperpixelGcrf)
    }

    pub fn uses_gcrf(self) -> bool {
        matches!(self.resolved(), Mode::SuperpixelGcrf)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Weak => "weak",
            Mode::PointFg => "point_fg",
            Mode::PointFgBg => "point_fg_bg",
            Mode::Superpixel => "superpixel",
            Mode::SuperpixelGcrf => "superpixel_gcrf",
        }
    }
}

/// Segmentation pathway: the position-kernel pipeline, or a plain decoder
/// over the fused features for ablation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Kernel,
    Direct,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub pipeline: Pipeline,

    // model shape
    pub channels: usize,
    pub text_embed_dim: usize,
    pub text_hidden: usize,
    pub fusion_steps: usize,
    /// Pyramid levels carrying position/kernel heads, inclusive, where
    /// level i has stride 2^(i+1).
    pub level_lo: usize,
    pub level_hi: usize,
    pub image_size: usize,

    // losses
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub crf_loss_weight: f64,
    pub crf_radius: usize,
    pub crf_sigma_xy: f64,
    pub crf_sigma_rgb: f64,
    pub crf_kernel_weight: f64,

    // inference
    pub kernel_threshold: f64,
    pub max_kernels: usize,
    pub nms_sigma: f64,
    pub mask_threshold: f64,
    /// Evaluate with ground-truth kernel selection instead of thresholding.
    pub use_gt_position: bool,

    // optimization
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Optional hard cap on SGD steps across all epochs.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Run validation every this many epochs (0 disables periodic eval).
    pub eval_every_epochs: usize,

    // data
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub train_samples: usize,
    pub val_samples: usize,
    pub superpixels: usize,
    pub slic_compactness: f64,
    pub slic_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Full,
            pipeline: Pipeline::Kernel,
            channels: 64,
            text_embed_dim: 32,
            text_hidden: 32,
            fusion_steps: 4,
            level_lo: 1,
            level_hi: 5,
            image_size: 64,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1e-6,
            crf_loss_weight: 0.01,
            crf_radius: 5,
            crf_sigma_xy: 6.0,
            crf_sigma_rgb: 0.1,
            crf_kernel_weight: 1.0,
            kernel_threshold: 0.1,
            max_kernels: 64,
            nms_sigma: 2.0,
            mask_threshold: 0.5,
            use_gt_position: false,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            epochs: 20,
            steps: None,
            batch_size: 8,
            seed: 0,
            log_every: 10,
            eval_every_epochs: 1,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
            train_samples: 2000,
            val_samples: 200,
            superpixels: 100,
            slic_compactness: 10.0,
            slic_iters: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.kernel_threshold > 0.0 && self.kernel_threshold < 1.0) {
            return Err(format!(
                "kernel_threshold must lie in (0,1), got {}",
                self.kernel_threshold
            ));
        }
        if self.crf_loss_weight < 0.0 {
            return Err(format!(
                "crf_loss_weight must be nonnegative, got {}",
                self.crf_loss_weight
            ));
        }
        if self.fusion_steps < 1 {
            return Err("fusion_steps must be at least 1".into());
        }
        if self.level_lo < 1 || self.level_hi > 5 || self.level_lo > self.level_hi {
            return Err(format!(
                "level range must satisfy 1 <= lo <= hi <= 5, got {}..={}",
                self.level_lo, self.level_hi
            ));
        }
        if self.image_size < 64 || self.image_size % 64 != 0 {
            return Err(format!(
                "image_size must be a multiple of the largest pyramid stride (64), got {}",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.grad_clip < 0.0 {
            return Err(format!("grad_clip must be nonnegative, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("parsing {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Strides and grid sizes of the active pyramid levels, finest first.
    pub fn active_levels(&self) -> Vec<LevelSpec> {
        (self.level_lo..=self.level_hi)
            .map(|i| {
                let stride = 1usize << (i + 1);
                LevelSpec { index: i, stride, size: self.image_size / stride }
            })
            .collect()
    }

    /// Grid size of the mask-resolution lattice (stride 4).
    pub fn mask_size(&self) -> usize {
        self.image_size / 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    /// 1-based pyramid index; stride is 2^(index+1).
    pub index: usize,
    pub stride: usize,
    pub size: usize,
}
