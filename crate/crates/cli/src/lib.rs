//! Command-line pipeline driver: dataset synthesis, training, rendering,
//! reenactment, evaluation, and gradient verification.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric abort
//! (checkpoint preserved), 5 verification failure.

use gatnerf_core::dataio::{
    generate_synthetic, load_dataset, Dataset, Image, SyntheticSceneSpec,
};
use gatnerf_core::error::Error as CoreError;
use gatnerf_core::field::{Ablation, FieldConfig, Model};
use gatnerf_core::metrics::{self, FrameMetrics};
use gatnerf_core::renderer::{render_image, DepthSampler, RenderConfig, RenderedFrame};
use gatnerf_core::trainer::{
    format_log_row, load_checkpoint, save_checkpoint, TrainConfig, Trainer, METRIC_LOG_HEADER,
};
use gatnerf_core::verify;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub mod args;
pub use args::{Cli, Command};

/// Full resolved configuration, printed at startup of every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSceneSpec,
}

impl AppConfig {
    pub fn paper() -> Self {
        AppConfig {
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticSceneSpec { image_size: 512, ..Default::default() },
        }
    }

    pub fn desk() -> Self {
        AppConfig {
            field: FieldConfig::desk(),
            render: RenderConfig::desk(),
            train: TrainConfig::desk(),
            synth: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 2,
    Io = 3,
    Numeric = 4,
    CheckFailed = 5,
}

pub fn exit_code_for(err: &CoreError) -> ExitCode {
    match err {
        CoreError::Config(_) | CoreError::Shape { .. } | CoreError::InvalidValue { .. } => ExitCode::Config,
        CoreError::Io { .. } | CoreError::Data(_) | CoreError::Image(_) | CoreError::Json(_)
        | CoreError::Checkpoint(_) => ExitCode::Io,
        CoreError::Numeric { .. } => ExitCode::Numeric,
        CoreError::CheckFailed(_) => ExitCode::CheckFailed,
        _ => ExitCode::Config,
    }
}

/// Resolution order: preset defaults < config file < dotted-key overrides.
/// The merged document must type-check before any work starts.
pub fn resolve_config(
    preset: &str,
    config_path: Option<&Path>,
    overrides: &[String],
) -> Result<AppConfig, CoreError> {
    let base = match preset {
        "paper" => AppConfig::paper(),
        "desk" => AppConfig::desk(),
        other => return Err(CoreError::Config(format!("unknown preset {other:?} (paper|desk)"))),
    };
    let mut doc = serde_json::to_value(&base)?;
    if let Some(path) = config_path {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let file_doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("config file: {e}")))?;
        merge_json(&mut doc, &file_doc);
    }
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let mut cfg: AppConfig = serde_json::from_value(doc)
        .map_err(|e| CoreError::Config(format!("configuration does not type-check: {e}")))?;
    // the fused-input width is structural: PE(p) + delta + gamma
    cfg.field.gat.d_in = cfg.field.d_in();
    cfg.field.validate()?;
    cfg.render.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Apply one `dotted.key=value` override; the value parses as JSON first,
/// falling back to a bare string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), CoreError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override {spec:?} is not key=value")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CoreError::Config(format!("override path {path:?}: {part:?} is not an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CoreError::Config(format!("override path {path:?}: unknown key {part:?}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CoreError::Config(format!("override path {path:?}: unknown key {part:?}")))?;
    }
    Ok(())
}

pub fn threads_from(opt: Option<usize>) -> usize {
    opt.or_else(|| std::env::var("GATNERF_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

fn print_config(cfg: &AppConfig) {
    match serde_json::to_string_pretty(cfg) {
        Ok(s) => println!("resolved configuration:\n{s}"),
        Err(_) => println!("resolved configuration: <unprintable>"),
    }
}

/// Align the field configuration with a loaded dataset (expression dim can
/// differ from the default 76).
fn align_field_config(mut field: FieldConfig, ds: &Dataset) -> FieldConfig {
    field.delta_dim = ds.manifest.delta_dim;
    field.gat.d_in = field.d_in();
    field
}

fn ensure_dir(path: &Path) -> Result<(), CoreError> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CoreError> {
    fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

// ── synth ───────────────────────────────────────────────────────────────

pub fn cmd_synth(cfg: &AppConfig, out: &Path) -> Result<(), CoreError> {
    print_config(cfg);
    cfg.synth.validate()?;
    ensure_dir(out)?;
    let manifest = generate_synthetic(&cfg.synth, out)?;
    let train = manifest.frames.iter().filter(|f| f.split == "train").count();
    println!(
        "wrote {} frames ({} train / {} test) at {}x{} to {}",
        manifest.frames.len(),
        train,
        manifest.frames.len() - train,
        cfg.synth.image_size,
        cfg.synth.image_size,
        out.display()
    );
    println!(
        "scene bounds [{:.2},{:.2}]^3, depth range [{:.2}, {:.2}], delta dim {}",
        manifest.bounds_min[0],
        manifest.bounds_max[0],
        manifest.t_near,
        manifest.t_far,
        manifest.delta_dim
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    cfg: &AppConfig,
    data_dir: &Path,
    out: &Path,
    ablation: Ablation,
    resume: Option<&Path>,
    checkpoint_every: u64,
) -> Result<TrainOutcome, CoreError> {
    print_config(cfg);
    let ds = load_dataset(data_dir)?;
    ensure_dir(out)?;
    let ck_latest = out.join("checkpoint.bin");
    let log_path = out.join("metrics.csv");

    let mut trainer = match resume {
        Some(path) => {
            let t = load_checkpoint(path)?;
            println!("resumed from {} at iteration {}", path.display(), t.iteration);
            t
        }
        None => {
            let field = align_field_config(cfg.field, &ds);
            let model = Model::init(&field, ds.train_indices().len(), ablation, cfg.train.seed)?;
            println!(
                "initialized {} model: {} tensors, {} scalars, ablation {}",
                <f32 as gatnerf_core::diffcore::Real>::NAME,
                model.params.len(),
                model.params.scalar_count(),
                ablation.label()
            );
            Trainer::new(model, cfg.render, cfg.train.clone())?
        }
    };

    let mut log = String::new();
    let append_existing = resume.is_some() && log_path.exists();
    if !append_existing {
        log.push_str(METRIC_LOG_HEADER);
        log.push('\n');
    }

    let total = trainer.tcfg.iterations;
    println!("training to {total} iterations (batch {}, lr {})", trainer.tcfg.ray_batch, trainer.tcfg.lr);
    let started = std::time::Instant::now();
    let mut empty_box_warned = false;
    let result = loop {
        if trainer.iteration >= total {
            break Ok(());
        }
        match trainer.step(&ds) {
            Ok(stats) => {
                if stats.empty_box_fallback && !empty_box_warned {
                    eprintln!("warning: frame {} has an empty foreground box; sampling the full image", stats.frame);
                    empty_box_warned = true;
                }
                let it = trainer.iteration;
                let evaluate = trainer.tcfg.eval_every > 0 && (it % trainer.tcfg.eval_every == 0 || it == total);
                let row = if evaluate {
                    let m = trainer.evaluate(&ds)?;
                    gatnerf_core::trainer::LogRow {
                        iter: it,
                        loss: stats.loss,
                        psnr: Some(m.psnr),
                        ssim: Some(m.ssim),
                        l1: Some(m.l1),
                    }
                } else {
                    gatnerf_core::trainer::LogRow { iter: it, loss: stats.loss, psnr: None, ssim: None, l1: None }
                };
                if evaluate {
                    println!(
                        "iter {:>7}/{total}  loss {:.5}  psnr {:.2}  ssim {:.4}  l1 {:.4}  [{:.0}s]",
                        it,
                        row.loss,
                        row.psnr.unwrap(),
                        row.ssim.unwrap(),
                        row.l1.unwrap(),
                        started.elapsed().as_secs_f64()
                    );
                }
                log.push_str(&format_log_row(&row));
                log.push('\n');
                if checkpoint_every > 0 && it % checkpoint_every == 0 {
                    save_checkpoint(&trainer, &out.join(format!("checkpoint_{it:07}.bin")))?;
                    save_checkpoint(&trainer, &ck_latest)?;
                }
            }
            Err(e) => break Err(e),
        }
    };

    // flush the log and final checkpoint even on oabort
    let mut existing = if append_existing {
        fs::read_to_string(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    existing.push_str(&log);
    write_text(&log_path, &existing)?;

    match result {
        Ok(()) => {
            save_checkpoint(&trainer, &ck_latest)?;
            let final_loss = existing
                .lines()
                .last()
                .and_then(|l| l.split(',').nth(1))
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::NAN);
            println!("done: checkpoint {} log {}", ck_latest.display(), log_path.display());
            Ok(TrainOutcome { checkpoint: ck_latest, log: log_path, final_loss })
        }
        Err(e) => {
            eprintln!("training aborted: {e}");
            if ck_latest.exists() {
                eprintln!("last checkpoint retained at {}", ck_latest.display());
            }
            Err(e)
        }
    }
}

// ── render / reenact ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// Trained per-frame code for training frames, mean otherwise.
    Trained,
    Mean,
    Zero,
}

impl std::str::FromStr for GammaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trained" => Ok(GammaMode::Trained),
            "mean" => Ok(GammaMode::Mean),
            "zero" => Ok(GammaMode::Zero),
            other => Err(format!("unknown gamma mode {other:?} (trained|mean|zero)")),
        }
    }
}

pub struct RenderPlanFrame {
    /// Frame whose camera is used.
    pub camera_frame: usize,
    /// Frame whose expression drives the field (before --delta-set edits).
    pub delta_frame: usize,
    pub label: String,
}

fn gamma_for(model: &Model<f32>, ds: &Dataset, frame: usize, mode: GammaMode) -> Vec<f32> {
    match mode {
        GammaMode::Zero => vec![0.0; model.cfg.latent_dim],
        GammaMode::Mean => model.gamma_eval(None),
        GammaMode::Trained => {
            let train = ds.train_indices();
            model.gamma_eval(train.iter().position(|&i| i == frame))
        }
    }
}

fn apply_delta_edits(delta: &mut [f64], edits: &[(usize, f64)]) -> Result<(), CoreError> {
    for &(i, v) in edits {
        if i >= delta.len() {
            return Err(CoreError::Config(format!(
                "delta component {i} out of range (dim {})",
                delta.len()
            )));
        }
        delta[i] = v;
    }
    Ok(())
}

pub fn parse_delta_edits(spec: &str) -> Result<Vec<(usize, f64)>, CoreError> {
    spec.split(',')
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (i, v) = pair
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("delta edit {pair:?} is not index=value")))?;
            Ok((
                i.trim().parse::<usize>().map_err(|e| CoreError::Config(format!("delta index: {e}")))?,
                v.trim().parse::<f64>().map_err(|e| CoreError::Config(format!("delta value: {e}")))?,
            ))
        })
        .collect()
}

pub struct RenderedOutput {
    pub frame: RenderedFrame,
    pub label: String,
}

/// Render a plan of (camera, expression) pairs with the trained model.
#[allow(clippy::too_many_arguments)]
pub fn render_plan(
    model: &Model<f32>,
    ds: &Dataset,
    plan: &[RenderPlanFrame],
    delta_edits: &[(usize, f64)],
    gamma_mode: GammaMode,
    rcfg: &RenderConfig,
    threads: usize,
) -> Result<Vec<RenderedOutput>, CoreError> {
    let geom = ds.manifest.geometry();
    let mut outs = Vec::with_capacity(plan.len());
    for p in plan {
        let cam = &ds.frame(p.camera_frame).camera;
        let mut delta = ds.frame(p.delta_frame).delta.clone();
        if delta.len() != model.cfg.delta_dim {
            return Err(CoreError::shape(
                "render",
                format!("delta dim {} does not match the model's {}", delta.len(), model.cfg.delta_dim),
            ));
        }
        apply_delta_edits(&mut delta, delta_edits)?;
        let gamma = gamma_for(model, ds, p.delta_frame, gamma_mode);
        let frame = render_image(cam, &delta, &gamma, model, rcfg, &geom, &DepthSampler::Deterministic, threads)?;
        outs.push(RenderedOutput { frame, label: p.label.clone() });
    }
    Ok(outs)
}

pub fn save_outputs(outs: &[RenderedOutput], out_dir: &Path) -> Result<(), CoreError> {
    ensure_dir(out_dir)?;
    for o in outs {
        o.frame.image.quantized().save_png(&out_dir.join(format!("render_{}.png", o.label)))?;
        let (w, h) = (o.frame.image.width, o.frame.image.height);
        let mut acc_img = Image::new(w, h);
        for (i, &a) in o.frame.acc.iter().enumerate() {
            let v = a.clamp(0.0, 1.0);
            acc_img.data[i * 3] = v;
            acc_img.data[i * 3 + 1] = v;
            acc_img.data[i * 3 + 2] = v;
        }
        acc_img.save_png(&out_dir.join(format!("acc_{}.png", o.label)))?;
    }
    Ok(())
}

pub fn frames_for_selection(ds: &Dataset, frames: Option<&[usize]>, split: &str) -> Result<Vec<usize>, CoreError> {
    if let Some(list) = frames {
        for &f in list {
            if f >= ds.frames.len() {
                return Err(CoreError::Config(format!("frame {f} out of range ({} frames)", ds.frames.len())));
            }
        }
        return Ok(list.to_vec());
    }
    Ok(match split {
        "train" => ds.train_indices(),
        "test" => ds.test_indices(),
        "all" => (0..ds.frames.len()).collect(),
        other => return Err(CoreError::Config(format!("unknown split {other:?} (train|test|all)"))),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_render(
    cfg: &AppConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    frames: Option<&[usize]>,
    split: &str,
    novel_expression_frame: Option<usize>,
    novel_pose_frame: Option<usize>,
    delta_edits: &[(usize, f64)],
    gamma_mode: GammaMode,
    threads: usize,
) -> Result<Vec<RenderedOutput>, CoreError> {
    print_config(cfg);
    let ds = load_dataset(data_dir)?;
    let trainer = load_checkpoint(checkpoint)?;
    let model = trainer.model;
    let selection = frames_for_selection(&ds, frames, split)?;
    let plan: Vec<RenderPlanFrame> = selection
        .iter()
        .map(|&f| {
            let camera_frame = novel_pose_frame.unwrap_or(f);
            let delta_frame = novel_expression_frame.unwrap_or(f);
            RenderPlanFrame { camera_frame, delta_frame, label: format!("{f:05}") }
        })
        .collect();
    let mut rcfg = trainer.rcfg;
    rcfg.stratified = false;
    let outs = render_plan(&model, &ds, &plan, delta_edits, gamma_mode, &rcfg, threads)?;
    save_outputs(&outs, out)?;
    println!("rendered {} frames to {}", outs.len(), out.display());
    Ok(outs)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reenact(
    cfg: &AppConfig,
    data_dir: &Path,
    checkpoint: &Path,
    driver_dir: &Path,
    out: &Path,
    camera_frame: Option<usize>,
    threads: usize,
) -> Result<Vec<RenderedOutput>, CoreError> {
    print_config(cfg);
    let ds = load_dataset(data_dir)?;
    let driver = load_dataset(driver_dir)?;
    let trainer = load_checkpoint(checkpoint)?;
    let model = trainer.model;
    if driver.manifest.delta_dim != model.cfg.delta_dim {
        return Err(CoreError::shape(
            "reenact",
            format!(
                "driver delta dim {} does not match the model's {}",
                driver.manifest.delta_dim, model.cfg.delta_dim
            ),
        ));
    }
    let geom = ds.manifest.geometry();
    let gamma = model.gamma_eval(None);
    let mut rcfg = trainer.rcfg;
    rcfg.stratified = false;
    let mut outs = Vec::new();
    for (i, dframe) in driver.frames.iter().enumerate() {
        let cam_idx = camera_frame.unwrap_or(i % ds.frames.len());
        let cam = &ds.frame(cam_idx).camera;
        let frame =
            render_image(cam, &dframe.delta, &gamma, &model, &rcfg, &geom, &DepthSampler::Deterministic, threads)?;
        outs.push(RenderedOutput { frame, label: format!("{i:05}") });
    }
    save_outputs(&outs, out)?;
    println!("reenacted {} driver frames to {}", outs.len(), out.display());
    Ok(outs)
}

// ── eval ────────────────────────────────────────────────────────────────

/// Clamp-and-pad a foreground box so both crops are at least the SSIM
/// window on each side.
fn usable_box(bbox: [u32; 4], w: usize, h: usize) -> (usize, usize, usize, usize) {
    let min_side = metrics::SSIM_WINDOW;
    let (mut x0, mut y0, mut x1, mut y1) =
        (bbox[0] as usize, bbox[1] as usize, (bbox[2] as usize).min(w), (bbox[3] as usize).min(h));
    while x1 - x0 < min_side {
        if x0 > 0 {
            x0 -= 1;
        } else if x1 < w {
            x1 += 1;
        } else {
            break;
        }
    }
    while y1 - y0 < min_side {
        if y0 > 0 {
            y0 -= 1;
        } else if y1 < h {
            y1 += 1;
        } else {
            break;
        }
    }
    (x0, y0, x1, y1)
}

fn crop(img: &Image, rect: (usize, usize, usize, usize)) -> Image {
    let (x0, y0, x1, y1) = rect;
    let mut out = Image::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set_pixel(x - x0, y - y0, img.pixel(x, y));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub frame: usize,
    pub full: FrameMetrics,
    pub cropped: FrameMetrics,
}

pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_full: FrameMetrics,
    pub mean_cropped: FrameMetrics,
}

/// Render the chosen frames and compare against stored ground truth, both
/// full-frame and within the foreground box.
pub fn evaluate_model(
    model: &Model<f32>,
    ds: &Dataset,
    frames: &[usize],
    rcfg: &RenderConfig,
    gamma_mode: GammaMode,
    threads: usize,
) -> Result<EvalReport, CoreError> {
    let geom = ds.manifest.geometry();
    let mut rcfg = *rcfg;
    rcfg.stratified = false;
    let mut rows = Vec::with_capacity(frames.len());
    for &fi in frames {
        let frame = ds.frame(fi);
        let gamma = gamma_for(model, ds, fi, gamma_mode);
        let out = render_image(
            &frame.camera,
            &frame.delta,
            &gamma,
            model,
            &rcfg,
            &geom,
            &DepthSampler::Deterministic,
            threads,
        )?;
        let rendered = out.image.quantized();
        let full = metrics::compare(&rendered, &frame.image)?;
        let rect = usable_box(frame.bbox, frame.image.width, frame.image.height);
        let cropped = metrics::compare(&crop(&rendered, rect), &crop(&frame.image, rect))?;
        rows.push(EvalRow { frame: fi, full, cropped });
    }
    let mean_full =
        metrics::MetricReport::from_frames(rows.iter().map(|r| r.full).collect()).mean;
    let mean_cropped =
        metrics::MetricReport::from_frames(rows.iter().map(|r| r.cropped).collect()).mean;
    Ok(EvalReport { rows, mean_full, mean_cropped })
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("frame,scope,l1,psnr,ssim\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},full,{},{},{}", r.frame, r.full.l1, r.full.psnr, r.full.ssim);
        let _ = writeln!(s, "{},cropped,{},{},{}", r.frame, r.cropped.l1, r.cropped.psnr, r.cropped.ssim);
    }
    let _ = writeln!(s, "mean,full,{},{},{}", report.mean_full.l1, report.mean_full.psnr, report.mean_full.ssim);
    let _ = writeln!(
        s,
        "mean,cropped,{},{},{}",
        report.mean_cropped.l1, report.mean_cropped.psnr, report.mean_cropped.ssim
    );
    s
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &AppConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    frames: Option<&[usize]>,
    split: &str,
    compare: &[PathBuf],
    threads: usize,
) -> Result<EvalReport, CoreError> {
    print_config(cfg);
    let ds = load_dataset(data_dir)?;
    ensure_dir(out)?;
    let trainer = load_checkpoint(checkpoint)?;
    let selection = frames_for_selection(&ds, frames, split)?;
    let report = evaluate_model(&trainer.model, &ds, &selection, &trainer.rcfg, GammaMode::Trained, threads)?;

    println!("evaluation over {} frames (split {split}); LPIPS: n/a (out of scope)", selection.len());
    println!("{:<10} {:>10} {:>10} {:>10}", "scope", "L1", "PSNR", "SSIM");
    println!(
        "{:<10} {:>10.5} {:>10.3} {:>10.4}",
        "full", report.mean_full.l1, report.mean_full.psnr, report.mean_full.ssim
    );
    println!(
        "{:<10} {:>10.5} {:>10.3} {:>10.4}",
        "cropped", report.mean_cropped.l1, report.mean_cropped.psnr, report.mean_cropped.ssim
    );
    write_text(&out.join("eval.csv"), &eval_csv(&report))?;

    if !compare.is_empty() {
        let mut table = String::from("model,l1,psnr,ssim,lpips\n");
        let mut pretty = format!(
            "{:<16} {:>10} {:>10} {:>10} {:>8}\n",
            "model", "L1", "PSNR", "SSIM", "LPIPS"
        );
        let mut all: Vec<(&Path, String)> = vec![];
        for path in compare {
            let t = load_checkpoint(path)?;
            all.push((path.as_path(), t.model.ablation.label().to_string()));
            let rep = evaluate_model(&t.model, &ds, &selection, &t.rcfg, GammaMode::Trained, threads)?;
            let _ = writeln!(
                table,
                "{},{},{},{},n/a",
                t.model.ablation.label(),
                rep.mean_full.l1,
                rep.mean_full.psnr,
                rep.mean_full.ssim
            );
            let _ = writeln!(
                pretty,
                "{:<16} {:>10.5} {:>10.3} {:>10.4} {:>8}",
                t.model.ablation.label(),
                rep.mean_full.l1,
                rep.mean_full.psnr,
                rep.mean_full.ssim,
                "n/a"
            );
        }
        write_text(&out.join("ablation.csv"), &table)?;
        println!("ablation comparison ({} models):\n{pretty}", all.len());
    }
    Ok(report)
}

// ── gradcheck ───────────────────────────────────────────────────────────

pub fn cmd_gradcheck(corrupt: Option<&str>) -> Result<Vec<verify::CheckReport>, CoreError> {
    let reports = verify::run_suite(corrupt)?;
    println!("{:<22} {:>14} {:>10} {:>8}  result", "check", "max rel err", "tol", "coords");
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<22} {:>14.3e} {:>10.0e} {:>8}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.coords,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CoreError::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(reports)
}
