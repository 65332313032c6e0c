//! Joint optimization of the coarse network, fine network, and per-frame
//! latent codes under the photometric + latent-regularization objective.
//!
//! Per iteration: pick a training frame, sample a ray batch biased into its
//! foreground box, render both passes, take the summed squared error of both
//! against the ground truth plus lambda * ||gamma_i||^2, backpropagate, and
//! apply one Adam step to every parameter jointly. Only the picked frame's
//! latent row receives photometric gradient.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, Moments};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, INIT_SCHEME, MAGIC, VERSION};

use crate::dataio::{Dataset, FrameRecord, SceneGeometry};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{Ablation, Model};
use crate::metrics;
use crate::renderer::{generate_ray, render_image, render_ray_batch_on_tape, DepthSampler, Ray, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ray_batch: usize,
    pub lr: f64,
    pub iterations: u64,
    pub lambda_gamma: f64,
    /// Fraction of rays drawn inside the frame's foreground box.
    pub foreground_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Metric evaluation cadence (iterations); 0 disables.
    pub eval_every: u64,
    /// Frames evaluated per cadence point.
    pub eval_frames: usize,
    /// Rays processed per tape sub-batch inside one step. Purely an
    /// execution-granularity knob (cache friendliness); the objective sums
    /// over the full ray batch either way.
    #[serde(default = "default_microbatch")]
    pub microbatch: usize,
}

fn default_microbatch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ray_batch: 1024,
            lr: 3e-4,
            iterations: 300_000,
            lambda_gamma: 0.05,
            foreground_fraction: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 500,
            eval_frames: 2,
            microbatch: 64,
        }
    }
}

impl TrainConfig {
    /// Desk preset: reduced batch and iterations; the learning rate follows
    /// the batch-size rescale lr * 256/1024.
    pub fn desk() -> Self {
        TrainConfig {
            ray_batch: 256,
            lr: 3e-4 * 256.0 / 1024.0,
            iterations: 5_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::Config(format!(
                "foreground_fraction must lie in [0,1], got {}",
                self.foreground_fraction
            )));
        }
        if self.ray_batch == 0 {
            return Err(Error::Config("ray_batch must be positive".into()));
        }
        if self.microbatch == 0 {
            return Err(Error::Config("microbatch must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled ray batch with its supervision targets.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f32; 3]>,
    /// Set when the frame had an empty foreground box and sampling fell back
    /// to the whole image.
    pub empty_box_fallback: bool,
}

/// Draw `config.ray_batch` pixels: ceil(fraction * batch) uniform inside the
/// foreground box, the rest uniform over the full image.
pub fn sample_ray_batch(
    frame: &FrameRecord,
    geom: &SceneGeometry,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RayBatch> {
    let b = config.ray_batch;
    let (w, h) = (frame.image.width, frame.image.height);
    let [x0, y0, x1, y1] = frame.bbox;
    let box_valid = x1 > x0 && y1 > y0 && (x1 as usize) <= w && (y1 as usize) <= h;
    let n_fg = if box_valid {
        (config.foreground_fraction * b as f64).ceil() as usize
    } else {
        0
    };
    let mut rays = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for i in 0..b {
        let (x, y) = if i < n_fg {
            (rng.gen_range(x0..x1) as usize, rng.gen_range(y0..y1) as usize)
        } else {
            (rng.gen_range(0..w), rng.gen_range(0..h))
        };
        rays.push(generate_ray(&frame.camera, x as f64 + 0.5, y as f64 + 0.5, geom.t_near, geom.t_far)?);
        targets.push(frame.image.pixel(x, y));
    }
    Ok(RayBatch { rays, targets, empty_box_fallback: !box_valid })
}

/// Eq. 8-9 objective on an existing tape: summed squared error of both
/// passes plus lambda * ||gamma||^2. `gamma_row` is skipped when absent
/// (latent-free ablation drops the regularizer).
pub fn loss_on_tape(
    tape: &mut Tape<f32>,
    c_coarse: Tensor,
    c_fine: Tensor,
    targets: &[[f32; 3]],
    gamma_row: Option<Tensor>,
    lambda_gamma: f64,
) -> Result<Tensor> {
    let flat: Vec<f32> = targets.iter().flatten().copied().collect();
    let tgt = tape.constant(flat, &[targets.len(), 3])?;
    let dc = tape.sub(c_coarse, tgt)?;
    let dc2 = tape.mul(dc, dc)?;
    let lc = tape.sum(dc2);
    let df = tape.sub(c_fine, tgt)?;
    let df2 = tape.mul(df, df)?;
    let lf = tape.sum(df2);
    let photo = tape.add(lc, lf)?;
    match gamma_row {
        Some(g) if lambda_gamma > 0.0 => {
            let g2 = tape.mul(g, g)?;
            let gs = tape.sum(g2);
            let reg = tape.affine(gs, lambda_gamma as f32, 0.0);
            tape.add(photo, reg)
        }
        _ => Ok(photo),
    }
}

/// One row of the metric log. Quality metrics are present only at
/// evaluation cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
}

pub const METRIC_LOG_HEADER: &str = "iter,loss,psnr,ssim,l1";

pub fn format_log_row(row: &LogRow) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    format!("{},{},{},{},{}", row.iter, row.loss, opt(row.psnr), opt(row.ssim), opt(row.l1))
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub rcfg: RenderConfig,
    pub tcfg: TrainConfig,
    pub iteration: u64,
    /// Master stream: frame picks and pixel draws. Depth jitter and
    /// importance draws use per-ray streams keyed by (seed, iteration, ray).
    pub rng: ChaCha8Rng,
}

pub struct StepStats {
    pub loss: f64,
    pub frame: usize,
    pub empty_box_fallback: bool,
}

impl Trainer {
    pub fn new(model: Model<f32>, rcfg: RenderConfig, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        rcfg.validate()?;
        crate::diffcore::tune_allocator();
        let n_params = model.params.len();
        let mut sizes: Vec<usize> = (0..n_params).map(|i| model.params.by_index(i).1.numel()).collect();
        sizes.push(model.latent.codes.numel());
        let rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        Ok(Trainer { model, adam: AdamState::new(&sizes), rcfg, tcfg, iteration: 0, rng })
    }

    /// One optimization step on a uniformly chosen training frame.
    pub fn step(&mut self, ds: &Dataset) -> Result<StepStats> {
        let train = ds.train_indices();
        if train.is_empty() {
            return Err(Error::Data("dataset has no training frames".into()));
        }
        let geom = ds.manifest.geometry();
        let pick = train[self.rng.gen_range(0..train.len())];
        let frame = ds.frame(pick);
        // latent rows are indexed by position within the train split
        let latent_row = train.iter().position(|&i| i == pick).unwrap();
        let batch = sample_ray_batch(frame, &geom, &self.tcfg, &mut self.rng)?;

        let mut tape = Tape::<f32>::new();
        let (reg, coarse_h, fine_h) = self.model.register(&mut tape, true)?;
        let param_tensors: Vec<Tensor> = reg.tensors.clone();
        drop(reg);
        let delta_row = tape.constant(
            frame.delta.iter().map(|&v| v as f32).collect(),
            &[1, self.model.cfg.delta_dim],
        )?;
        let use_latent = self.model.ablation != Ablation::NoLatent;
        let (gamma_row, latent_leaf) = if use_latent {
            let leaf = tape.leaf(self.model.latent.codes.data.clone(), &self.model.latent.codes.shape)?;
            let row = tape.slice(leaf, 0, latent_row, 1)?;
            (row, Some(leaf))
        } else {
            (tape.constant(vec![0.0; self.model.cfg.latent_dim], &[1, self.model.cfg.latent_dim])?, None)
        };

        let sampler = DepthSampler::from_config(&self.rcfg, self.tcfg.seed, self.iteration);
        let mut photo: Option<Tensor> = None;
        for start in (0..batch.rays.len()).step_by(self.tcfg.microbatch) {
            let end = (start + self.tcfg.microbatch).min(batch.rays.len());
            let out = render_ray_batch_on_tape(
                &mut tape,
                &batch.rays[start..end],
                delta_row,
                gamma_row,
                &coarse_h,
                &fine_h,
                &self.model.cfg,
                &self.rcfg,
                &geom,
                &sampler,
                start as u64,
            )?;
            let part = loss_on_tape(&mut tape, out.c_coarse, out.c_fine, &batch.targets[start..end], None, 0.0)?;
            photo = Some(match photo {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let photo = photo.expect("non-empty ray batch");
        let loss = if use_latent && self.tcfg.lambda_gamma > 0.0 {
            let g2 = tape.mul(gamma_row, gamma_row)?;
            let gs = tape.sum(g2);
            let reg = tape.affine(gs, self.tcfg.lambda_gamma as f32, 0.0);
            tape.add(photo, reg)?
        } else {
            photo
        };
        let loss_v = tape.item(loss) as f64;
        if !loss_v.is_finite() {
            return Err(Error::Numeric { iter: self.iteration, msg: format!("loss = {loss_v}") });
        }
        tape.backward(loss)?;

        // gradient-finite guard before any parameter moves
        for (i, &t) in param_tensors.iter().enumerate() {
            if let Some(g) = tape.grad(t) {
                if g.iter().any(|v| !v.is_finite()) {
                    let (name, _) = self.model.params.by_index(i);
                    return Err(Error::Numeric {
                        iter: self.iteration,
                        msg: format!("non-finite gradient in {name}"),
                    });
                }
            }
        }

        let step = self.adam.begin_step();
        let (lr, b1, b2, eps) =
            (self.tcfg.lr as f32, self.tcfg.beta1 as f32, self.tcfg.beta2 as f32, self.tcfg.eps as f32);
        let n_params = self.model.params.len();
        for i in 0..n_params {
            let grad = tape.grad(param_tensors[i]);
            adam_step(
                self.model.params.by_index_mut(i),
                grad,
                &mut self.adam.entries[i],
                step,
                lr,
                b1,
                b2,
                eps,
            );
        }
        if let Some(leaf) = latent_leaf {
            let grad = tape.grad(leaf);
            if grad.map(|g| g.iter().any(|v| !v.is_finite())).unwrap_or(false) {
                return Err(Error::Numeric { iter: self.iteration, msg: "non-finite latent gradient".into() });
            }
            adam_step(
                &mut self.model.latent.codes,
                grad,
                &mut self.adam.entries[n_params],
                step,
                lr,
                b1,
                b2,
                eps,
            );
        }
        self.iteration += 1;
        Ok(StepStats { loss: loss_v, frame: pick, empty_box_fallback: batch.empty_box_fallback })
    }

    /// Metrics over up to `tcfg.eval_frames` held-out frames (test split,
    /// falling back to the last training frame), rendered jitter-free.
    pub fn evaluate(&self, ds: &Dataset) -> Result<metrics::FrameMetrics> {
        let test = ds.test_indices();
        let train = ds.train_indices();
        let frames: Vec<usize> = if test.is_empty() {
            train.iter().rev().take(self.tcfg.eval_frames).copied().collect()
        } else {
            test.iter().take(self.tcfg.eval_frames).copied().collect()
        };
        let geom = ds.manifest.geometry();
        let mut per = Vec::with_capacity(frames.len());
        for &fi in &frames {
            let frame = ds.frame(fi);
            let row = train.iter().position(|&i| i == fi);
            let gamma = self.model.gamma_eval(row);
            let out = render_image(
                &frame.camera,
                &frame.delta,
                &gamma,
                &self.model,
                &self.rcfg,
                &geom,
                &DepthSampler::Deterministic,
                1,
            )?;
            per.push(metrics::compare(&out.image.quantized(), &frame.image)?);
        }
        Ok(metrics::MetricReport::from_frames(per).mean)
    }

    /// Run until `tcfg.iterations`, appending one log row per iteration.
    /// `on_row` observes every row (for streaming to a CSV file).
    pub fn train(
        &mut self,
        ds: &Dataset,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.tcfg.iterations {
            let stats = self.step(ds)?;
            let evaluate = self.tcfg.eval_every > 0
                && (self.iteration % self.tcfg.eval_every == 0 || self.iteration == self.tcfg.iterations);
            let row = if evaluate {
                let m = self.evaluate(ds)?;
                LogRow {
                    iter: self.iteration,
                    loss: stats.loss,
                    psnr: Some(m.psnr),
                    ssim: Some(m.ssim),
                    l1: Some(m.l1),
                }
            } else {
                LogRow { iter: self.iteration, loss: stats.loss, psnr: None, ssim: None, l1: None }
            };
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}
