//! Two-pass hierarchical rendering: a coarse stratified pass guides
//! importance sampling for the fine pass, which re-evaluates the sorted
//! union of all depths. Both passes run their own network instance.

use super::camera::{generate_ray, Camera, Ray};
use super::composite::composite_batch;
use super::sampling::{importance_sample, ray_rng, stratified_sample, DrawMode};
use crate::dataio::{Image, SceneGeometry};
use crate::diffcore::{Real, Tape, Tensor};
use crate::encoding::{positional_encode_into, PeConfig};
use crate::error::{Error, Result};
use crate::field::{query_encoded, FieldConfig, FieldHandles, Model};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Jittered stratified bins (training); midpoints otherwise.
    pub stratified: bool,
    pub background: [f64; 3],
    /// Rays per batch when rendering images.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { n_coarse: 64, n_fine: 64, stratified: true, background: [1.0; 3], chunk: 128 }
    }
}

impl RenderConfig {
    pub fn desk() -> Self {
        RenderConfig { n_coarse: 32, n_fine: 32, stratified: true, background: [1.0; 3], chunk: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 1 || self.n_fine < 1 {
            return Err(Error::Config("n_coarse and n_fine must be at least 1".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Where depth randomness comes from. Deterministic mode uses bin midpoints
/// and CDF quantiles; jittered mode derives an independent stream per ray
/// from (seed, salt, ray index), so results never depend on batch layout.
#[derive(Debug, Clone, Copy)]
pub enum DepthSampler {
    Deterministic,
    Jittered { seed: u64, salt: u64 },
}

impl DepthSampler {
    /// Resolve the configured mode: jitter only when the config asks for it.
    pub fn from_config(cfg: &RenderConfig, seed: u64, salt: u64) -> Self {
        if cfg.stratified {
            DepthSampler::Jittered { seed, salt }
        } else {
            DepthSampler::Deterministic
        }
    }

    fn coarse(&self, ray_idx: u64, t_near: f64, t_far: f64, n: usize) -> Vec<f64> {
        match self {
            DepthSampler::Deterministic => {
                let mut none = ray_rng(0, 0, 0);
                stratified_sample(t_near, t_far, n, false, &mut none)
            }
            DepthSampler::Jittered { seed, salt } => {
                let mut rng = ray_rng(*seed, *salt, ray_idx * 2);
                stratified_sample(t_near, t_far, n, true, &mut rng)
            }
        }
    }

    fn fine(&self, ray_idx: u64, weights: &[f64], t_coarse: &[f64], n_fine: usize) -> Result<Vec<f64>> {
        match self {
            DepthSampler::Deterministic => {
                importance_sample::<rand_chacha::ChaCha8Rng>(weights, t_coarse, n_fine, DrawMode::Midpoints)
            }
            DepthSampler::Jittered { seed, salt } => {
                let mut rng = ray_rng(*seed, *salt, ray_idx * 2 + 1);
                importance_sample(weights, t_coarse, n_fine, DrawMode::Rng(&mut rng))
            }
        }
    }
}

/// Encoded point/direction constants for a set of rays with per-ray depths.
fn encode_inputs<T: Real>(
    tape: &mut Tape<T>,
    rays: &[Ray],
    depths: &[Vec<f64>],
    geom: &SceneGeometry,
    pe: &PeConfig,
    view_dependent: bool,
) -> Result<(Tensor, Option<Tensor>, Vec<f64>)> {
    let per_ray = depths[0].len();
    let total = rays.len() * per_ray;
    let p_len = pe.position_len();
    let mut pe_points = vec![T::zero(); total * p_len];
    let mut flat_t = Vec::with_capacity(total);
    let mut row = 0usize;
    for (ray, ts) in rays.iter().zip(depths.iter()) {
        debug_assert_eq!(ts.len(), per_ray);
        for &t in ts {
            let p = geom.normalize(ray.at(t));
            let p_t = [T::from_f64(p[0]), T::from_f64(p[1]), T::from_f64(p[2])];
            positional_encode_into(&p_t, pe.bands_position, pe.include_input, &mut pe_points[row * p_len..(row + 1) * p_len])?;
            flat_t.push(t);
            row += 1;
        }
    }
    let pe_points = tape.constant(pe_points, &[total, p_len])?;

    let pe_dirs = if view_dependent {
        let d_len = pe.direction_len();
        let mut enc = vec![T::zero(); total * d_len];
        let mut one = vec![T::zero(); d_len];
        for (r, ray) in rays.iter().enumerate() {
            let d = [T::from_f64(ray.dir[0]), T::from_f64(ray.dir[1]), T::from_f64(ray.dir[2])];
            positional_encode_into(&d, pe.bands_direction, pe.include_input, &mut one)?;
            for s in 0..per_ray {
                let at = (r * per_ray + s) * d_len;
                enc[at..at + d_len].copy_from_slice(&one);
            }
        }
        Some(tape.constant(enc, &[total, d_len])?)
    } else {
        None
    };
    Ok((pe_points, pe_dirs, flat_t))
}

/// Both passes of one ray batch, on an existing tape. `delta_row` and
/// `gamma_row` are [1, dim] tape tensors (gamma may be a trainable slice of
/// the latent table). Importance sampling reads the coarse weights as plain
/// values only — no gradient flows into the fine depths.
pub struct BatchRender {
    /// [rays, 3] coarse-pass colors.
    pub c_coarse: Tensor,
    /// [rays, 3] fine-pass colors.
    pub c_fine: Tensor,
    /// Accumulated fine-pass opacity per ray (plain values).
    pub fine_acc: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn render_ray_batch_on_tape<T: Real>(
    tape: &mut Tape<T>,
    rays: &[Ray],
    delta_row: Tensor,
    gamma_row: Tensor,
    coarse_h: &FieldHandles,
    fine_h: &FieldHandles,
    fcfg: &FieldConfig,
    rcfg: &RenderConfig,
    geom: &SceneGeometry,
    sampler: &DepthSampler,
    ray_base: u64,
) -> Result<BatchRender> {
    if rays.is_empty() {
        return Err(Error::invalid("render", "empty ray batch"));
    }
    let n_rays = rays.len();

    // coarse pass
    let t_coarse: Vec<Vec<f64>> = (0..n_rays)
        .map(|r| sampler.coarse(ray_base + r as u64, geom.t_near, geom.t_far, rcfg.n_coarse))
        .collect();
    let (pe_p, pe_d, flat_t) = encode_inputs(tape, rays, &t_coarse, geom, &fcfg.pe, fcfg.view_dependent)?;
    let out_c = query_encoded(tape, pe_p, pe_d, delta_row, gamma_row, coarse_h, fcfg)?;
    let sigma_c = tape.reshape(out_c.density, &[n_rays, rcfg.n_coarse])?;
    let comp_c = composite_batch(tape, sigma_c, out_c.color, &flat_t, geom.t_far, rcfg.background)?;

    // detach the coarse weights before importance sampling
    let w_data: Vec<f64> = tape.data(comp_c.weights).iter().map(|v| v.as_f64()).collect();
    let t_fine: Vec<Vec<f64>> = (0..n_rays)
        .map(|r| {
            let w = &w_data[r * rcfg.n_coarse..(r + 1) * rcfg.n_coarse];
            sampler.fine(ray_base + r as u64, w, &t_coarse[r], rcfg.n_fine)
        })
        .collect::<Result<_>>()?;

    // fine pass over the sorted union of depths
    let (pe_pf, pe_df, flat_tf) = encode_inputs(tape, rays, &t_fine, geom, &fcfg.pe, fcfg.view_dependent)?;
    let out_f = query_encoded(tape, pe_pf, pe_df, delta_row, gamma_row, fine_h, fcfg)?;
    let n_union = rcfg.n_coarse + rcfg.n_fine;
    let sigma_f = tape.reshape(out_f.density, &[n_rays, n_union])?;
    let comp_f = composite_batch(tape, sigma_f, out_f.color, &flat_tf, geom.t_far, rcfg.background)?;

    let fw = tape.data(comp_f.weights);
    let fine_acc = (0..n_rays)
        .map(|r| fw[r * n_union..(r + 1) * n_union].iter().map(|v| v.as_f64()).sum())
        .collect();

    Ok(BatchRender { c_coarse: comp_c.pixels, c_fine: comp_f.pixels, fine_acc })
}

/// Plain-value batch render with frozen parameters.
pub struct RayColors {
    pub coarse: Vec<[f64; 3]>,
    pub fine: Vec<[f64; 3]>,
    pub fine_acc: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    rays: &[Ray],
    delta: &[f64],
    gamma: &[T],
    model: &Model<T>,
    rcfg: &RenderConfig,
    geom: &SceneGeometry,
    sampler: &DepthSampler,
    ray_base: u64,
) -> Result<RayColors> {
    crate::diffcore::tune_allocator();
    let mut coarse = Vec::with_capacity(rays.len());
    let mut fine = Vec::with_capacity(rays.len());
    let mut acc = Vec::with_capacity(rays.len());
    for (start, chunk) in rays.chunks(rcfg.chunk).enumerate().map(|(i, c)| (i * rcfg.chunk, c)) {
        let mut tape = Tape::<T>::new();
        let (_reg, coarse_h, fine_h) = model.register(&mut tape, false)?;
        let delta_row = tape.constant(delta.iter().map(|&v| T::from_f64(v)).collect(), &[1, model.cfg.delta_dim])?;
        let gamma_row = tape.constant(gamma.to_vec(), &[1, model.cfg.latent_dim])?;
        let out = render_ray_batch_on_tape(
            &mut tape,
            chunk,
            delta_row,
            gamma_row,
            &coarse_h,
            &fine_h,
            &model.cfg,
            rcfg,
            geom,
            sampler,
            ray_base + start as u64,
        )?;
        let cc = tape.data(out.c_coarse);
        let cf = tape.data(out.c_fine);
        for r in 0..chunk.len() {
            coarse.push([cc[r * 3].as_f64(), cc[r * 3 + 1].as_f64(), cc[r * 3 + 2].as_f64()]);
            fine.push([cf[r * 3].as_f64(), cf[r * 3 + 1].as_f64(), cf[r * 3 + 2].as_f64()]);
        }
        acc.extend(out.fine_acc);
    }
    Ok(RayColors { coarse, fine, fine_acc: acc })
}

/// One ray through both passes.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<T: Real>(
    ray: &Ray,
    delta: &[f64],
    gamma: &[T],
    model: &Model<T>,
    rcfg: &RenderConfig,
    geom: &SceneGeometry,
    sampler: &DepthSampler,
    ray_idx: u64,
) -> Result<([f64; 3], [f64; 3])> {
    let out = render_rays(std::slice::from_ref(ray), delta, gamma, model, rcfg, geom, sampler, ray_idx)?;
    Ok((out.coarse[0], out.fine[0]))
}

/// A rendered frame: fine-pass image plus per-pixel accumulated opacity.
pub struct RenderedFrame {
    pub image: Image,
    pub acc: Vec<f32>,
}

/// Render a full image (fine-pass colors). Chunk boundaries are fixed by the
/// config, so the result is independent of `threads`; with jitter off it is
/// fully deterministic.
#[allow(clippy::too_many_arguments)]
pub fn render_image<T: Real>(
    camera: &Camera,
    delta: &[f64],
    gamma: &[T],
    model: &Model<T>,
    rcfg: &RenderConfig,
    geom: &SceneGeometry,
    sampler: &DepthSampler,
    threads: usize,
) -> Result<RenderedFrame> {
    let (w, h) = (camera.width, camera.height);
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            rays.push(generate_ray(camera, x as f64 + 0.5, y as f64 + 0.5, geom.t_near, geom.t_far)?);
        }
    }
    let chunks: Vec<(usize, &[Ray])> = rays
        .chunks(rcfg.chunk)
        .enumerate()
        .map(|(i, c)| (i * rcfg.chunk, c))
        .collect();

    let run_chunk = |(start, chunk): &(usize, &[Ray])| -> Result<RayColors> {
        render_rays(chunk, delta, gamma, model, rcfg, geom, sampler, *start as u64)
    };

    let results: Vec<Result<RayColors>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            chunks.par_iter().map(run_chunk).collect()
        })
    } else {
        chunks.iter().map(run_chunk).collect()
    };

    let mut image = Image::new(w, h);
    let mut acc = vec![0.0f32; w * h];
    let mut at = 0usize;
    for res in results {
        let out = res?;
        for (i, px) in out.fine.iter().enumerate() {
            let idx = (at + i) * 3;
            image.data[idx] = px[0] as f32;
            image.data[idx + 1] = px[1] as f32;
            image.data[idx + 2] = px[2] as f32;
            acc[at + i] = out.fine_acc[i] as f32;
        }
        at += out.fine.len();
    }
    Ok(RenderedFrame { image, acc })
}
