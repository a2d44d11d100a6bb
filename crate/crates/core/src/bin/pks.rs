//! Command-line entry point: dataset generation, weak annotation, training,
//! evaluation, prediction, and log plotting.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pks_core::checkpoint;
use pks_core::config::RunConfig;
use pks_core::dataset;
use pks_core::inference;
use pks_core::pgm::{self, GrayImage};
use pks_core::synth::SceneSpec;
use pks_core::train::{self, Purpose};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pks",
    about = "Referring-expression segmentation on synthetic scenes",
    version
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Renders the train and val splits with annotations.
    GenData {
        /// Overrides the configured training sample count.
        #[arg(long)]
        train_samples: Option<usize>,
        /// Overrides the configured validation sample count.
        #[arg(long)]
        val_samples: Option<usize>,
    },
    /// Derives clicks, superpixels, and weak masks for a split.
    WeakAnnotate {
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Runs the configured SGD loop and writes log plus checkpoint.
    Train,
    /// Scores a checkpoint over a split.
    Eval {
        /// Checkpoint path; defaults to <out_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Segments one image given a referring expression.
    Predict {
        /// Checkpoint path; defaults to <out_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PPM image to segment.
        #[arg(long)]
        image: PathBuf,
        /// Referring expression, e.g. "left red circle".
        #[arg(long)]
        expression: String,
    },
    /// Renders the training log as an SVG chart.
    Plot {
        /// Log path; defaults to <out_dir>/train_log.csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(anyhow::Error::msg)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

/// Fields that fix the parameter shapes; a checkpoint only loads into a
/// matching configuration.
fn check_model_compatible(run: &RunConfig, saved: &RunConfig) -> Result<()> {
    let shape = |c: &RunConfig| {
        (
            c.channels,
            c.text_embed_dim,
            c.text_hidden,
            c.fusion_steps,
            c.level_lo,
            c.level_hi,
            c.image_size,
            c.pipeline,
        )
    };
    if shape(run) != shape(saved) {
        bail!(
            "checkpoint/config mismatch: the checkpoint was trained with a \
             different model shape (channels/text dims/fusion steps/levels/\
             image size/pipeline)"
        );
    }
    Ok(())
}

/// Loads the checkpoint and reconciles its config with the CLI one: model
/// shape must match; data and inference knobs follow the CLI.
fn load_for_inference(
    cli_cfg: &RunConfig,
    explicit_config: bool,
    path: &Path,
) -> Result<(RunConfig, checkpoint::Checkpoint)> {
    let ckpt = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut cfg = if explicit_config {
        check_model_compatible(cli_cfg, &ckpt.config)?;
        cli_cfg.clone()
    } else {
        ckpt.config.clone()
    };
    cfg.data_root = cli_cfg.data_root.clone();
    cfg.out_dir = cli_cfg.out_dir.clone();
    Ok((cfg, ckpt))
}

fn cmd_gen_data(
    cfg: &RunConfig,
    train_samples: Option<usize>,
    val_samples: Option<usize>,
) -> Result<()> {
    let scene = SceneSpec { image_size: cfg.image_size, seed: cfg.seed, ..SceneSpec::default() };
    let n_train = train_samples.unwrap_or(cfg.train_samples);
    let n_val = val_samples.unwrap_or(cfg.val_samples);
    dataset::generate_split(&cfg.data_root, "train", &scene, n_train, 0)?;
    // a large offset keeps validation scenes disjoint from any train size
    dataset::generate_split(&cfg.data_root, "val", &scene, n_val, 1_000_000)?;
    println!(
        "wrote {n_train} train and {n_val} val samples under {}",
        cfg.data_root.display()
    );
    Ok(())
}

fn cmd_weak_annotate(cfg: &RunConfig, split: &str) -> Result<()> {
    let skipped = dataset::annotate_split_weak(
        &cfg.data_root,
        split,
        cfg.superpixels,
        cfg.slic_compactness,
        cfg.slic_iters,
    )?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} record(s) with empty masks");
    }
    println!(
        "annotated split {split} under {} ({skipped} skipped)",
        cfg.data_root.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let echo = cfg.out_dir.join("config.json");
    std::fs::write(&echo, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", echo.display()))?;

    let summary = train::train(cfg)?;
    println!(
        "trained {} steps; final loss {:.4} (pos {:.4}, seg {:.4})",
        summary.steps_run, summary.final_loss.total, summary.final_loss.pos, summary.final_loss.seg
    );
    if let Some(val) = &summary.last_val {
        println!("last val mIoU {:.4}", val.miou);
    }
    println!(
        "checkpoint: {}\nlog: {}",
        summary.checkpoint_path.display(),
        summary.log_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cli_cfg: &RunConfig,
    explicit_config: bool,
    checkpoint_path: Option<PathBuf>,
    split: &str,
) -> Result<()> {
    let path = checkpoint_path.unwrap_or_else(|| cli_cfg.out_dir.join("model.ckpt"));
    let (cfg, ckpt) = load_for_inference(cli_cfg, explicit_config, &path)?;

    let raw = dataset::read_split(&cfg.data_root, split)?;
    let prepared = train::prepare_samples(&cfg, &raw, Purpose::Eval)?;
    let report = train::evaluate_samples(&ckpt.params, &cfg, &prepared)?;

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let json_path = cfg.out_dir.join(format!("eval_{split}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let csv_path = cfg.out_dir.join(format!("eval_{split}_samples.csv"));
    inference::write_iou_csv(&csv_path, &report.samples)?;

    let p = report.prec_values();
    println!(
        "split {split}: mIoU {:.4} | prec@0.5 {:.4} @0.6 {:.4} @0.7 {:.4} @0.8 {:.4} @0.9 {:.4}",
        report.miou, p[0], p[1], p[2], p[3], p[4]
    );
    println!("report: {}\nper-sample: {}", json_path.display(), csv_path.display());
    Ok(())
}

fn probabilities_to_gray(values: &[f64], size: usize) -> GrayImage {
    let mut img = GrayImage::new(size, size);
    for (i, &v) in values.iter().enumerate() {
        img.pixels[i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img
}

fn cmd_predict(
    cli_cfg: &RunConfig,
    explicit_config: bool,
    checkpoint_path: Option<PathBuf>,
    image_path: &Path,
    expression: &str,
) -> Result<()> {
    let path = checkpoint_path.unwrap_or_else(|| cli_cfg.out_dir.join("model.ckpt"));
    let (cfg, ckpt) = load_for_inference(cli_cfg, explicit_config, &path)?;

    let image = pgm::read_ppm(image_path)
        .with_context(|| format!("reading {}", image_path.display()))?;
    if image.width != cfg.image_size || image.height != cfg.image_size {
        bail!(
            "image is {}x{}, the model expects {}x{}",
            image.width,
            image.height,
            cfg.image_size,
            cfg.image_size
        );
    }
    let tokens = pks_core::vocab::tokenize(expression)?;
    let planar = image.to_planar_f64();
    let out = train::infer_sample(&ckpt.params, &cfg, &planar, &tokens, None)?;

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mask_path = cfg.out_dir.join("mask.pgm");
    let mut mask_img = GrayImage::new(cfg.image_size, cfg.image_size);
    for (i, &on) in out.mask.iter().enumerate() {
        mask_img.pixels[i] = if on { 255 } else { 0 };
    }
    pgm::write_pgm(&mask_path, &mask_img)?;
    println!("mask: {}", mask_path.display());

    for (level, size, values) in &out.heatmaps {
        let hm_path = cfg.out_dir.join(format!("heatmap_l{level}.pgm"));
        pgm::write_pgm(&hm_path, &probabilities_to_gray(values, *size))?;
        println!("heatmap level {level}: {}", hm_path.display());
    }

    let att_path = cfg.out_dir.join("attention.json");
    let att: Vec<serde_json::Value> = out
        .attention
        .iter()
        .zip(cfg.active_levels())
        .map(|(steps, spec)| {
            serde_json::json!({ "level": spec.index, "steps": steps })
        })
        .collect();
    std::fs::write(&att_path, serde_json::to_string_pretty(&att)?)
        .with_context(|| format!("writing {}", att_path.display()))?;
    println!("attention: {}", att_path.display());
    Ok(())
}

struct LogRow {
    step: f64,
    loss_total: f64,
    val_miou: Option<f64>,
}

fn parse_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            bail!("{}:{}: expected 7 columns", path.display(), i + 1);
        }
        rows.push(LogRow {
            step: fields[0].parse().with_context(|| format!("bad step on line {}", i + 1))?,
            loss_total: fields[2]
                .parse()
                .with_context(|| format!("bad loss on line {}", i + 1))?,
            val_miou: if fields[6].is_empty() { None } else { Some(fields[6].parse()?) },
        });
    }
    if rows.is_empty() {
        bail!("{} holds no data rows", path.display());
    }
    Ok(rows)
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn cmd_plot(cfg: &RunConfig, log: Option<PathBuf>) -> Result<()> {
    let log_path = log.unwrap_or_else(|| cfg.out_dir.join("train_log.csv"));
    let rows = parse_log(&log_path)?;

    let (w, h, ml, mb) = (640.0, 400.0, 50.0, 30.0);
    let (pw, ph) = (w - ml - 10.0, h - mb - 10.0);
    let max_step = rows.iter().map(|r| r.step).fold(1.0f64, f64::max);
    let max_loss = rows.iter().map(|r| r.loss_total).fold(1e-9f64, f64::max);
    let x = |s: f64| ml + pw * s / max_step;
    let y_loss = |l: f64| 10.0 + ph * (1.0 - l / max_loss);
    let y_unit = |v: f64| 10.0 + ph * (1.0 - v);

    let loss_pts: Vec<(f64, f64)> =
        rows.iter().map(|r| (x(r.step), y_loss(r.loss_total))).collect();
    let val_pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.val_miou.map(|v| (x(r.step), y_unit(v))))
        .collect();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"10\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - 10.0
    ));
    svg.push_str(&polyline(&loss_pts, "#c0392b"));
    if val_pts.len() > 1 {
        svg.push_str(&polyline(&val_pts, "#27ae60"));
    }
    for (px, py) in &val_pts {
        svg.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#27ae60\"/>\n"
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" font-size=\"12\">steps (max {max_step:.0})</text>\n",
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"4\" y=\"20\" font-size=\"12\" fill=\"#c0392b\">loss (max {max_loss:.3})</text>\n"
    ));
    svg.push_str(
        "<text x=\"4\" y=\"36\" font-size=\"12\" fill=\"#27ae60\">val mIoU (0-1)</text>\n",
    );
    svg.push_str("</svg>\n");

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let svg_path = cfg.out_dir.join("training.svg");
    std::fs::write(&svg_path, svg).with_context(|| format!("writing {}", svg_path.display()))?;
    println!("plot: {}", svg_path.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let explicit_config = cli.config.is_some();
    let result = effective_config(&cli).and_then(|cfg| match &cli.command {
        Command::GenData { train_samples, val_samples } => {
            cmd_gen_data(&cfg, *train_samples, *val_samples)
        }
        Command::WeakAnnotate { split } => cmd_weak_annotate(&cfg, split),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, split } => {
            cmd_eval(&cfg, explicit_config, checkpoint.clone(), split)
        }
        Command::Predict { checkpoint, image, expression } => {
            cmd_predict(&cfg, explicit_config, checkpoint.clone(), image, expression)
        }
        Command::Plot { log } => cmd_plot(&cfg, log.clone()),
    });
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
