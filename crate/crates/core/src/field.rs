//! The complete radiance-field network: point-wise transformer block, five
//! backbone layers with a skip connection, density head, and view-conditioned
//! color branch.
//!
//! Pipeline per sample point:
//!   PE(p) -> fuse [PE(p) || delta || gamma] -> transformer block
//!   -> backbone layers 1-2 -> concat with the raw fused input (skip)
//!   -> layers 3-5 -> feature projection -> feat
//!   density = relu(density_head(feat))
//!   color   = sigmoid(color_mlp(feat || PE(v)))      (view-dependent)
//!   color   = sigmoid(color_mlp(feat))               (view-independent)
//!
//! The skip consumes the *pre-projection* fused input, not the transformer
//! output; `skip_concat` guards that with a width check.

use crate::diffcore::{PTensor, ParamSet, Real, RegisteredParams, Tape, Tensor};
use crate::encoding::{encode_batch, PeConfig};
use crate::error::{Error, Result};
use crate::gat::{self, FuseDims, GatConfig, GatHandles, Linear};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const BACKBONE_LAYERS: usize = 5;
/// Zero-based index of the backbone layer whose input is widened by the skip.
pub const SKIP_LAYER: usize = 2;
/// Number of linear layers in the color branch (three relu + one linear out).
pub const COLOR_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub pe: PeConfig,
    pub gat: GatConfig,
    pub delta_dim: usize,
    pub latent_dim: usize,
    pub color_width: usize,
    pub view_dependent: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pe: PeConfig::default(),
            gat: GatConfig::default(),
            delta_dim: 76,
            latent_dim: 32,
            color_width: 128,
            view_dependent: true,
        }
    }
}

impl FieldConfig {
    /// Reduced widths for commodity-CPU runs; structure unchanged.
    pub fn desk() -> Self {
        FieldConfig {
            pe: PeConfig::default(),
            gat: GatConfig::desk(),
            delta_dim: 76,
            latent_dim: 32,
            color_width: 32,
            view_dependent: true,
        }
    }

    /// Fused input width: PE(p) + delta + gamma.
    pub fn d_in(&self) -> usize {
        self.pe.position_len() + self.delta_dim + self.latent_dim
    }

    pub fn fuse_dims(&self) -> FuseDims {
        FuseDims { pe: self.pe.position_len(), delta: self.delta_dim, gamma: self.latent_dim }
    }

    pub fn validate(&self) -> Result<()> {
        self.gat.validate()?;
        if self.gat.d_in != self.d_in() {
            return Err(Error::Config(format!(
                "gat.d_in {} does not match PE+delta+gamma = {}",
                self.gat.d_in,
                self.d_in()
            )));
        }
        if self.color_width == 0 || self.delta_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("zero width in field config".into()));
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

fn insert_linear<T: Real>(
    set: &mut ParamSet<T>,
    name: String,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    set.insert(format!("{name}.w"), PTensor::uniform_fan_in(&[d_in, d_out], d_in, rng));
    set.insert(format!("{name}.b"), PTensor::zeros(&[1, d_out]));
}

/// Insert one full network's parameters under `prefix` ("coarse"/"fine").
/// `with_gat_layers = false` builds the ablated variant whose enhancer is the
/// bare input projection.
pub fn init_params<T: Real>(
    set: &mut ParamSet<T>,
    prefix: &str,
    cfg: &FieldConfig,
    with_gat_layers: bool,
    rng: &mut impl Rng,
) {
    let d = cfg.gat.d_model;
    let d_in = cfg.d_in();
    gat::init_params(set, &format!("{prefix}.gat"), &cfg.gat, with_gat_layers, rng);
    for l in 0..BACKBONE_LAYERS {
        let in_w = if l == SKIP_LAYER { d + d_in } else { d };
        insert_linear(set, format!("{prefix}.backbone.{l}"), in_w, d, rng);
    }
    insert_linear(set, format!("{prefix}.feat_proj"), d, d, rng);
    insert_linear(set, format!("{prefix}.density"), d, 1, rng);
    let color_in = if cfg.view_dependent { d + cfg.pe.direction_len() } else { d };
    insert_linear(set, format!("{prefix}.color.0"), color_in, cfg.color_width, rng);
    insert_linear(set, format!("{prefix}.color.1"), cfg.color_width, cfg.color_width, rng);
    insert_linear(set, format!("{prefix}.color.2"), cfg.color_width, cfg.color_width, rng);
    insert_linear(set, format!("{prefix}.color.3"), cfg.color_width, 3, rng);
}

pub struct FieldHandles {
    pub gat: GatHandles,
    pub backbone: Vec<Linear>,
    pub feat_proj: Linear,
    pub density: Linear,
    pub color: Vec<Linear>,
}

fn linear_handles<T: Real>(reg: &RegisteredParams<T>, name: &str) -> Result<Linear> {
    Ok(Linear { w: reg.tensor(&format!("{name}.w"))?, b: Some(reg.tensor(&format!("{name}.b"))?) })
}

pub fn handles<T: Real>(reg: &RegisteredParams<T>, prefix: &str, cfg: &FieldConfig) -> Result<FieldHandles> {
    Ok(FieldHandles {
        gat: gat::handles(reg, &format!("{prefix}.gat"), &cfg.gat)?,
        backbone: (0..BACKBONE_LAYERS)
            .map(|l| linear_handles(reg, &format!("{prefix}.backbone.{l}")))
            .collect::<Result<_>>()?,
        feat_proj: linear_handles(reg, &format!("{prefix}.feat_proj"))?,
        density: linear_handles(reg, &format!("{prefix}.density"))?,
        color: (0..COLOR_LAYERS)
            .map(|l| linear_handles(reg, &format!("{prefix}.color.{l}")))
            .collect::<Result<_>>()?,
    })
}

// ── Latent codes ────────────────────────────────────────────────────────

pub const LATENT_INIT_STD: f64 = 0.01;

/// Per-frame learnable codes, one row per training frame.
#[derive(Debug, Clone)]
pub struct LatentTable<T> {
    pub codes: PTensor<T>,
}

impl<T: Real> LatentTable<T> {
    pub fn init(frames: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, LATENT_INIT_STD).unwrap();
        let data = (0..frames * dim).map(|_| T::from_f64(normal.sample(rng))).collect();
        LatentTable { codes: PTensor::new(data, &[frames, dim]) }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        LatentTable { codes: PTensor::zeros(&[frames, dim]) }
    }

    pub fn frames(&self) -> usize {
        self.codes.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.codes.data[i * d..(i + 1) * d]
    }

    /// Evaluation default for frames without a trained row: mean of the
    /// trained codes.
    pub fn mean_code(&self) -> Vec<T> {
        let (k, d) = (self.frames(), self.dim());
        let mut out = vec![T::zero(); d];
        for i in 0..k {
            for j in 0..d {
                out[j] = out[j] + self.codes.data[i * d + j];
            }
        }
        let inv = T::one() / T::from_usize(k.max(1));
        out.iter_mut().for_each(|v| *v = *v * inv);
        out
    }
}

// ── Query ───────────────────────────────────────────────────────────────

/// One batch of field queries sharing a frame context.
pub struct FieldQueryBatch<'a, T> {
    /// Scene points, already normalized into [-1,1]^3.
    pub points: &'a [[T; 3]],
    /// Unit view directions, one per point.
    pub dirs: &'a [[T; 3]],
    /// Frame expression vector.
    pub delta: &'a [T],
    /// Frame latent code.
    pub gamma: &'a [T],
}

impl<'a, T: Real> FieldQueryBatch<'a, T> {
    pub fn validate(&self, cfg: &FieldConfig) -> Result<()> {
        if self.delta.len() != cfg.delta_dim {
            return Err(Error::shape(
                "query",
                format!("delta has dim {}, expected {}", self.delta.len(), cfg.delta_dim),
            ));
        }
        if self.gamma.len() != cfg.latent_dim {
            return Err(Error::shape(
                "query",
                format!("gamma has dim {}, expected {}", self.gamma.len(), cfg.latent_dim),
            ));
        }
        if self.dirs.len() != self.points.len() {
            return Err(Error::shape(
                "query",
                format!("{} dirs for {} points", self.dirs.len(), self.points.len()),
            ));
        }
        let tol = T::from_f64(1e-6);
        for (i, d) in self.dirs.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - T::one()).abs() > tol {
                return Err(Error::invalid(
                    "query",
                    format!("direction {i} has norm {}, expected unit", n.as_f64()),
                ));
            }
        }
        let bound = T::from_f64(1.0 + 1e-6);
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| v.abs() > bound) {
                return Err(Error::invalid(
                    "query",
                    format!("point {i} outside the normalized scene bounds"),
                ));
            }
        }
        Ok(())
    }
}

pub struct FieldOutput {
    /// [batch, 3] in (0,1).
    pub color: Tensor,
    /// [batch, 1], non-negative.
    pub density: Tensor,
}

/// Concatenate backbone features with the raw fused input (skip connection).
/// Passing the projected/enhanced vector here is a contract violation caught
/// by the width check (d_model differs from the fused width).
pub fn skip_concat<T: Real>(
    tape: &mut Tape<T>,
    h2: Tensor,
    x_concat: Tensor,
    cfg: &FieldConfig,
) -> Result<Tensor> {
    let hs = tape.shape(h2).to_vec();
    let xs = tape.shape(x_concat).to_vec();
    if hs.len() != 2 || hs[1] != cfg.gat.d_model {
        return Err(Error::shape(
            "skip_concat",
            format!("features have shape {hs:?}, expected [batch, {}]", cfg.gat.d_model),
        ));
    }
    if xs.len() != 2 || xs[1] != cfg.d_in() {
        return Err(Error::shape(
            "skip_concat",
            format!(
                "skip input has shape {xs:?}, expected the pre-projection fused input [batch, {}]",
                cfg.d_in()
            ),
        ));
    }
    tape.concat(&[h2, x_concat], 1)
}

/// Core forward pass over already-encoded inputs. `delta_row` and `gamma_row`
/// are [1, dim] tensors shared by the whole batch (gamma may be a slice of
/// the latent-table leaf so its gradient reaches the table).
pub fn query_encoded<T: Real>(
    tape: &mut Tape<T>,
    pe_points: Tensor,
    pe_dirs: Option<Tensor>,
    delta_row: Tensor,
    gamma_row: Tensor,
    h: &FieldHandles,
    cfg: &FieldConfig,
) -> Result<FieldOutput> {
    let batch = tape.shape(pe_points)[0];
    let delta_b = tape.repeat_rows(delta_row, batch)?;
    let gamma_b = tape.repeat_rows(gamma_row, batch)?;
    let x_concat = gat::fuse_inputs(tape, pe_points, delta_b, gamma_b, &cfg.fuse_dims())?;
    let enhanced = gat::gat_forward(tape, x_concat, &h.gat)?;

    let mut cur = enhanced;
    for (l, layer) in h.backbone.iter().enumerate() {
        if l == SKIP_LAYER {
            cur = skip_concat(tape, cur, x_concat, cfg)?;
        }
        cur = layer.apply(tape, cur)?;
        cur = tape.relu(cur);
    }
    let feat = h.feat_proj.apply(tape, cur)?;

    let raw_density = h.density.apply(tape, feat)?;
    let density = tape.relu(raw_density);

    let color_in = match (cfg.view_dependent, pe_dirs) {
        (true, Some(pd)) => tape.concat(&[feat, pd], 1)?,
        (true, None) => {
            return Err(Error::shape(
                "query",
                "view-dependent color requires encoded directions".to_string(),
            ))
        }
        (false, _) => feat,
    };
    let mut c = color_in;
    for (l, layer) in h.color.iter().enumerate() {
        c = layer.apply(tape, c)?;
        if l + 1 < h.color.len() {
            c = tape.relu(c);
        }
    }
    let color = tape.sigmoid(c);
    Ok(FieldOutput { color, density })
}

/// Validate a raw query batch, encode it, and run the network.
pub fn query<T: Real>(
    tape: &mut Tape<T>,
    batch: &FieldQueryBatch<T>,
    h: &FieldHandles,
    cfg: &FieldConfig,
) -> Result<FieldOutput> {
    batch.validate(cfg)?;
    let pe_p = encode_batch(batch.points, cfg.pe.bands_position, cfg.pe.include_input)?;
    let pe_t = tape.constant(pe_p, &[batch.points.len(), cfg.pe.position_len()])?;
    let pe_d = if cfg.view_dependent {
        let enc = encode_batch(batch.dirs, cfg.pe.bands_direction, cfg.pe.include_input)?;
        Some(tape.constant(enc, &[batch.dirs.len(), cfg.pe.direction_len()])?)
    } else {
        None
    };
    let delta_row = tape.constant(batch.delta.to_vec(), &[1, cfg.delta_dim])?;
    let gamma_row = tape.constant(batch.gamma.to_vec(), &[1, cfg.latent_dim])?;
    query_encoded(tape, pe_t, pe_d, delta_row, gamma_row, h, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_check, CheckInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tiny but structurally complete configuration.
    fn tiny_cfg() -> FieldConfig {
        FieldConfig {
            pe: PeConfig { bands_position: 2, bands_direction: 1, include_input: true },
            gat: GatConfig { d_in: 15 + 6 + 4, d_model: 8, n_head: 2, d_ffn: 12, num_layers: 1 },
            delta_dim: 6,
            latent_dim: 4,
            color_width: 6,
            view_dependent: true,
        }
    }

    fn build_set(cfg: &FieldConfig, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        init_params(&mut set, "net", cfg, true, &mut rng);
        set
    }

    fn sample_batch(cfg: &FieldConfig, n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)])
            .collect();
        let dirs: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let delta: Vec<f64> = (0..cfg.delta_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        (points, dirs, delta, gamma)
    }

    fn run_query(
        cfg: &FieldConfig,
        set: &ParamSet<f64>,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
        delta: &[f64],
        gamma: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(set, &mut tape).unwrap();
        let h = handles(&reg, "net", cfg).unwrap();
        let batch = FieldQueryBatch { points, dirs, delta, gamma };
        let out = query(&mut tape, &batch, &h, cfg).unwrap();
        (tape.data(out.color).to_vec(), tape.data(out.density).to_vec())
    }

    #[test]
    fn density_relu_clamps_negative_head() {
        let cfg = tiny_cfg();
        let mut set = build_set(&cfg, 1);
        // rig the head to produce a fixed negative raw value
        set.get_mut("net.density.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        set.get_mut("net.density.b").unwrap().data[0] = -3.2;
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 5, 2);
        let (_, density) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma);
        assert!(density.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn color_in_unit_interval_density_nonnegative() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 3);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 16, 4);
        let (color, density) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma);
        assert!(color.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(density.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gamma_changes_output() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 5);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 4, 6);
        let mut gamma2 = gamma.clone();
        gamma2[0] += 0.7;
        let (c1, d1) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma);
        let (c2, d2) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma2);
        let diff: f64 = c1.iter().zip(&c2).map(|(a, b)| (a - b).abs()).sum::<f64>()
            + d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(diff > 0.0, "latent code must influence the output");
    }

    #[test]
    fn skip_concat_widths_and_layout() {
        let cfg = FieldConfig::default();
        assert_eq!(cfg.d_in(), 171);
        assert_eq!(cfg.gat.d_model + cfg.d_in(), 427);

        let tiny = tiny_cfg();
        let mut tape = Tape::<f64>::new();
        let h2 = tape.constant(vec![0.0; 2 * tiny.gat.d_model], &[2, tiny.gat.d_model]).unwrap();
        let xv: Vec<f64> = (0..2 * tiny.d_in()).map(|i| i as f64).collect();
        let x = tape.constant(xv.clone(), &[2, tiny.d_in()]).unwrap();
        let cat = skip_concat(&mut tape, h2, x, &tiny).unwrap();
        assert_eq!(tape.shape(cat), &[2, tiny.gat.d_model + tiny.d_in()]);
        let row0 = &tape.data(cat)[..tiny.gat.d_model + tiny.d_in()];
        assert!(row0[..tiny.gat.d_model].iter().all(|&v| v == 0.0));
        assert_eq!(&row0[tiny.gat.d_model..], &xv[..tiny.d_in()]);
    }

    #[test]
    fn skip_concat_rejects_enhanced_vector() {
        let tiny = tiny_cfg();
        let mut tape = Tape::<f64>::new();
        let h2 = tape.constant(vec![0.0; 2 * tiny.gat.d_model], &[2, tiny.gat.d_model]).unwrap();
        // a d_model-wide tensor in the skip slot is the projected/enhanced
        // vector, not the fused input
        let wrong = tape.constant(vec![0.0; 2 * tiny.gat.d_model], &[2, tiny.gat.d_model]).unwrap();
        let err = skip_concat(&mut tape, h2, wrong, &tiny).unwrap_err().to_string();
        assert!(err.contains("pre-projection"), "{err}");
    }

    #[test]
    fn density_invariant_to_view_direction() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 7);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 6, 8);
        let dirs2: Vec<[f64; 3]> = dirs.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
        let (_, d1) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma);
        let (_, d2) = run_query(&cfg, &set, &points, &dirs2, &delta, &gamma);
        let bits1: Vec<u64> = d1.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = d2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2, "density must not depend on v");
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 9);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 5, 10);
        let (c, d) = run_query(&cfg, &set, &points, &dirs, &delta, &gamma);
        let perm = [3usize, 0, 4, 1, 2];
        let pp: Vec<[f64; 3]> = perm.iter().map(|&i| points[i]).collect();
        let pd: Vec<[f64; 3]> = perm.iter().map(|&i| dirs[i]).collect();
        let (c2, d2) = run_query(&cfg, &set, &pp, &pd, &delta, &gamma);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(&c2[k * 3..k * 3 + 3], &c[i * 3..i * 3 + 3]);
            assert_eq!(d2[k], d[i]);
        }
    }

    #[test]
    fn query_rejects_non_unit_direction() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 11);
        let (points, mut dirs, delta, gamma) = sample_batch(&cfg, 3, 12);
        dirs[1] = [0.5, 0.5, 0.5];
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "net", &cfg).unwrap();
        let batch = FieldQueryBatch { points: &points, dirs: &dirs, delta: &delta, gamma: &gamma };
        assert!(query(&mut tape, &batch, &h, &cfg).is_err());
    }

    /// Gradient reaches gamma through both the enhancer path and the skip
    /// path: killing either leaves a gradient, killing both kills it.
    #[test]
    fn gamma_gradient_flows_through_both_paths() {
        let cfg = tiny_cfg();
        let base = build_set(&cfg, 13);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 3, 14);

        let gamma_grad = |set: &ParamSet<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let reg = RegisteredParams::constants(set, &mut tape).unwrap();
            let h = handles(&reg, "net", &cfg).unwrap();
            let pe_p = encode_batch(&points, cfg.pe.bands_position, true).unwrap();
            let pe_pt = tape.constant(pe_p, &[points.len(), cfg.pe.position_len()]).unwrap();
            let pe_d = encode_batch(&dirs, cfg.pe.bands_direction, true).unwrap();
            let pe_dt = tape.constant(pe_d, &[dirs.len(), cfg.pe.direction_len()]).unwrap();
            let dt = tape.constant(delta.clone(), &[1, cfg.delta_dim]).unwrap();
            let gt = tape.leaf(gamma.clone(), &[1, cfg.latent_dim]).unwrap();
            let out = query_encoded(&mut tape, pe_pt, Some(pe_dt), dt, gt, &h, &cfg).unwrap();
            let csum = tape.sum(out.color);
            let dsum = tape.sum(out.density);
            let loss = tape.add(csum, dsum).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(gt).unwrap().to_vec()
        };

        let kill_gat_path = |set: &mut ParamSet<f64>| {
            set.get_mut("net.gat.w_p").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        };
        let kill_skip_path = |set: &mut ParamSet<f64>| {
            // zero the rows of backbone layer 3 that consume the fused input
            let d = cfg.gat.d_model;
            let d_in = cfg.d_in();
            let w = set.get_mut(&format!("net.backbone.{SKIP_LAYER}.w")).unwrap();
            let cols = w.shape[1];
            for r in d..d + d_in {
                for c in 0..cols {
                    w.data[r * cols + c] = 0.0;
                }
            }
        };

        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();

        let full = gamma_grad(&base);
        assert!(norm(&full) > 0.0);

        let mut no_gat = base.clone();
        kill_gat_path(&mut no_gat);
        let g_skip_only = gamma_grad(&no_gat);
        assert!(norm(&g_skip_only) > 0.0, "skip path must carry gradient");

        let mut no_skip = base.clone();
        kill_skip_path(&mut no_skip);
        let g_gat_only = gamma_grad(&no_skip);
        assert!(norm(&g_gat_only) > 0.0, "enhancer path must carry gradient");

        let mut neither = base.clone();
        kill_gat_path(&mut neither);
        kill_skip_path(&mut neither);
        let g_none = gamma_grad(&neither);
        assert_eq!(norm(&g_none), 0.0, "no path left, no gradient");
    }

    #[test]
    fn full_query_gradient_check() {
        let cfg = tiny_cfg();
        let set = build_set(&cfg, 15);
        let (points, dirs, delta, gamma) = sample_batch(&cfg, 2, 16);
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();

        // leaf 0 is the latent code; the rest are every network tensor
        let inputs: Vec<CheckInput> = std::iter::once(CheckInput::new(gamma.clone(), &[1, cfg.latent_dim]))
            .chain(set.iter().map(|(_, t)| CheckInput::new(t.data.clone(), &t.shape)))
            .collect();

        let pe_p = encode_batch(&points, cfg.pe.bands_position, true).unwrap();
        let pe_d = encode_batch(&dirs, cfg.pe.bands_direction, true).unwrap();
        let err = gradient_check(
            |tape, leaves| {
                let mut set2 = ParamSet::<f64>::new();
                for (name, &leaf) in names.iter().zip(&leaves[1..]) {
                    let shape = tape.shape(leaf).to_vec();
                    set2.insert(name.clone(), PTensor::new(tape.data(leaf).to_vec(), &shape));
                }
                let reg = RegisteredParams::from_parts(&set2, leaves[1..].to_vec());
                let h = handles(&reg, "net", &cfg)?;
                let pe_pt = tape.constant(pe_p.clone(), &[points.len(), cfg.pe.position_len()])?;
                let pe_dt = tape.constant(pe_d.clone(), &[dirs.len(), cfg.pe.direction_len()])?;
                let dt = tape.constant(delta.clone(), &[1, cfg.delta_dim])?;
                let out = query_encoded(tape, pe_pt, Some(pe_dt), dt, leaves[0], &h, &cfg)?;
                let c2 = tape.mul(out.color, out.color)?;
                let csum = tape.sum(c2);
                let dsum = tape.sum(out.density);
                let loss = tape.add(csum, dsum)?;
                Ok(loss)
            },
            &inputs,
            1e-5,
            4,
            17,
        )
        .unwrap();
        assert!(err < 1e-4, "field gradient error {err}");
    }

    #[test]
    fn latent_table_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let t = LatentTable::<f32>::init(6, 4, &mut rng);
        assert_eq!(t.frames(), 6);
        assert_eq!(t.dim(), 4);
        assert!(t.codes.data.iter().all(|v| v.abs() < 0.1), "small init");
        let mean = t.mean_code();
        for j in 0..4 {
            let want: f32 = (0..6).map(|i| t.row(i)[j]).sum::<f32>() / 6.0;
            assert!((mean[j] - want).abs() < 1e-7);
        }
    }
}

// ── Model: both networks plus the latent table ──────────────────────────

/// Ablation configurations studied by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Feature enhancer reduced to the bare input projection.
    NoGat,
    /// Latent codes frozen at zero, regularizer dropped.
    NoLatent,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGat => "w/o-GAT",
            Ablation::NoLatent => "w/o-latent",
        }
    }
}

/// The coarse and fine networks (independent weights, identical structure)
/// plus the per-frame latent codes.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: FieldConfig,
    pub ablation: Ablation,
    /// Network tensors under the "coarse." and "fine." prefixes.
    pub params: ParamSet<T>,
    pub latent: LatentTable<T>,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &FieldConfig, train_frames: usize, ablation: Ablation, seed: u64) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let with_gat = ablation != Ablation::NoGat;
        let mut params = ParamSet::new();
        init_params(&mut params, "coarse", cfg, with_gat, &mut rng);
        init_params(&mut params, "fine", cfg, with_gat, &mut rng);
        let latent = if ablation == Ablation::NoLatent {
            LatentTable::zeros(train_frames, cfg.latent_dim)
        } else {
            LatentTable::init(train_frames, cfg.latent_dim, &mut rng)
        };
        Ok(Model { cfg: *cfg, ablation, params, latent })
    }

    /// Register both networks on a tape (constants for frozen rendering,
    /// leaves for training) and resolve their handles.
    pub fn register<'a>(
        &'a self,
        tape: &mut Tape<T>,
        trainable: bool,
    ) -> Result<(RegisteredParams<'a, T>, FieldHandles, FieldHandles)> {
        let reg = if trainable {
            RegisteredParams::leaves(&self.params, tape)?
        } else {
            RegisteredParams::constants(&self.params, tape)?
        };
        let coarse = handles(&reg, "coarse", &self.cfg)?;
        let fine = handles(&reg, "fine", &self.cfg)?;
        Ok((reg, coarse, fine))
    }

    /// Latent code for evaluation: the trained row for known training
    /// frames, otherwise the mean of trained codes (zeros when ablated).
    pub fn gamma_eval(&self, train_row: Option<usize>) -> Vec<T> {
        if self.ablation == Ablation::NoLatent {
            return vec![T::zero(); self.cfg.latent_dim];
        }
        match train_row {
            Some(i) if i < self.latent.frames() => self.latent.row(i).to_vec(),
            _ => self.latent.mean_code(),
        }
    }
}
