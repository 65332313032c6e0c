//! Point-wise transformer feature enhancer.
//!
//! A standard post-norm transformer encoder layer applied to each sample
//! point independently — the per-point feature is treated as a sequence of
//! length one. The fused input [PE(p) || delta || gamma] (171-dim at the
//! reference dimensions) is linearly projected into the model width, then
//! passed through multi-head self-attention and a position-wise feed-forward
//! network, each wrapped in residual + layer norm:
//!
//!   o_attn = x_proj + MHSA(x_proj)
//!   o_n1   = LN(o_attn)
//!   o_ffn  = o_n1 + FFN(o_n1)
//!   out    = LN(o_ffn)
//!
//! With one key per query the attention softmax weight is exactly 1, so the
//! block must reduce to out_proj(value_proj(x)); that collapse is a
//! structural test, while the general softmax path stays in place.

use crate::diffcore::{PTensor, ParamSet, Real, RegisteredParams, Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub d_ffn: usize,
    pub num_layers: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig { d_in: 171, d_model: 256, n_head: 8, d_ffn: 2048, num_layers: 1 }
    }
}

impl GatConfig {
    /// Reduced dimensions preserving every structural feature; runs on a
    /// commodity CPU in minutes.
    pub fn desk() -> Self {
        GatConfig { d_in: 171, d_model: 64, n_head: 4, d_ffn: 128, num_layers: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config(format!("num_layers must be >= 1, got {}", self.num_layers)));
        }
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.d_in == 0 || self.d_ffn == 0 {
            return Err(Error::Config("d_in and d_ffn must be positive".into()));
        }
        Ok(())
    }
}

/// Width of each fused-input segment; `fuse_inputs` validates against this.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuseDims {
    pub pe: usize,
    pub delta: usize,
    pub gamma: usize,
}

impl FuseDims {
    pub fn total(&self) -> usize {
        self.pe + self.delta + self.gamma
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

fn init_linear<T: Real>(
    set: &mut ParamSet<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    set.insert(format!("{prefix}.w"), PTensor::uniform_fan_in(&[d_in, d_out], d_in, rng));
    set.insert(format!("{prefix}.b"), PTensor::zeros(&[1, d_out]));
}

/// Insert all block parameters into `set` under `prefix`. With
/// `with_encoder_layers = false` only the input projection is created (the
/// ablation that reduces the block to a bare linear map).
pub fn init_params<T: Real>(
    set: &mut ParamSet<T>,
    prefix: &str,
    cfg: &GatConfig,
    with_encoder_layers: bool,
    rng: &mut impl Rng,
) {
    // the projection carries no bias; the attention/FFN linear maps do
    set.insert(format!("{prefix}.w_p"), PTensor::uniform_fan_in(&[cfg.d_in, cfg.d_model], cfg.d_in, rng));
    if !with_encoder_layers {
        return;
    }
    for l in 0..cfg.num_layers {
        let lp = format!("{prefix}.l{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            init_linear(set, &format!("{lp}.{name}"), cfg.d_model, cfg.d_model, rng);
        }
        init_linear(set, &format!("{lp}.ffn1"), cfg.d_model, cfg.d_ffn, rng);
        init_linear(set, &format!("{lp}.ffn2"), cfg.d_ffn, cfg.d_model, rng);
        set.insert(format!("{lp}.ln1.g"), PTensor::full(&[cfg.d_model], T::one()));
        set.insert(format!("{lp}.ln1.b"), PTensor::zeros(&[cfg.d_model]));
        set.insert(format!("{lp}.ln2.g"), PTensor::full(&[cfg.d_model], T::one()));
        set.insert(format!("{lp}.ln2.b"), PTensor::zeros(&[cfg.d_model]));
    }
}

/// Tape handles for one linear map.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

/// Tape handles for one encoder layer.
pub struct EncoderLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

/// Tape handles for the whole block.
pub struct GatHandles {
    pub w_p: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub n_head: usize,
}

fn linear_handles<T: Real>(reg: &RegisteredParams<T>, prefix: &str) -> Result<Linear> {
    Ok(Linear {
        w: reg.tensor(&format!("{prefix}.w"))?,
        b: Some(reg.tensor(&format!("{prefix}.b"))?),
    })
}

/// Resolve tape handles for a block registered under `prefix`. Layers absent
/// from the set (the ablated block) simply yield no encoder layers.
pub fn handles<T: Real>(reg: &RegisteredParams<T>, prefix: &str, cfg: &GatConfig) -> Result<GatHandles> {
    let w_p = reg.tensor(&format!("{prefix}.w_p"))?;
    let mut layers = Vec::new();
    for l in 0..cfg.num_layers {
        let lp = format!("{prefix}.l{l}");
        if reg.tensor(&format!("{lp}.wq.w")).is_err() {
            break;
        }
        layers.push(EncoderLayer {
            wq: linear_handles(reg, &format!("{lp}.wq"))?,
            wk: linear_handles(reg, &format!("{lp}.wk"))?,
            wv: linear_handles(reg, &format!("{lp}.wv"))?,
            wo: linear_handles(reg, &format!("{lp}.wo"))?,
            ffn1: linear_handles(reg, &format!("{lp}.ffn1"))?,
            ffn2: linear_handles(reg, &format!("{lp}.ffn2"))?,
            ln1_g: reg.tensor(&format!("{lp}.ln1.g"))?,
            ln1_b: reg.tensor(&format!("{lp}.ln1.b"))?,
            ln2_g: reg.tensor(&format!("{lp}.ln2.g"))?,
            ln2_b: reg.tensor(&format!("{lp}.ln2.b"))?,
        });
    }
    Ok(GatHandles { w_p, layers, n_head: cfg.n_head })
}

// ── Forward operations ──────────────────────────────────────────────────

/// Concatenate [PE(p) || delta || gamma] along the feature axis. All three
/// must be [batch, dim] with matching batch and the configured segment dims.
pub fn fuse_inputs<T: Real>(
    tape: &mut Tape<T>,
    pe_p: Tensor,
    delta: Tensor,
    gamma: Tensor,
    dims: &FuseDims,
) -> Result<Tensor> {
    let checks = [
        ("positional-encoding", pe_p, dims.pe),
        ("expression", delta, dims.delta),
        ("latent", gamma, dims.gamma),
    ];
    let batch = tape.shape(pe_p).first().copied().unwrap_or(0);
    for (seg, t, want) in checks {
        let s = tape.shape(t);
        if s.len() != 2 || s[1] != want {
            return Err(Error::shape(
                "fuse_inputs",
                format!("{seg} segment has shape {s:?}, expected [batch, {want}]"),
            ));
        }
        if s[0] != batch {
            return Err(Error::shape(
                "fuse_inputs",
                format!("{seg} segment has {} rows, expected {batch}", s[0]),
            ));
        }
    }
    tape.concat(&[pe_p, delta, gamma], 1)
}

/// Linear projection of the fused input into the model width (no bias).
pub fn project<T: Real>(tape: &mut Tape<T>, x: Tensor, w_p: Tensor) -> Result<Tensor> {
    tape.matmul(x, w_p)
}

/// Multi-head self-attention over a length-one sequence, returning the
/// output and the attention weights ([batch, n_head], necessarily all ones).
///
/// `x` is [batch, d_model] or [batch, 1, d_model]; longer sequences are
/// rejected — the block operates point-wise.
pub fn mhsa_with_weights<T: Real>(
    tape: &mut Tape<T>,
    x: Tensor,
    layer: &EncoderLayer,
    n_head: usize,
) -> Result<(Tensor, Tensor)> {
    let shape = tape.shape(x).to_vec();
    let x2 = match shape.len() {
        2 => x,
        3 if shape[1] == 1 => tape.reshape(x, &[shape[0], shape[2]])?,
        3 => {
            return Err(Error::invalid(
                "mhsa",
                format!("sequence length must be exactly 1, got {}", shape[1]),
            ))
        }
        _ => {
            return Err(Error::shape(
                "mhsa",
                format!("expected [batch, d] or [batch, 1, d], got {shape:?}"),
            ))
        }
    };
    let (batch, d) = (tape.shape(x2)[0], tape.shape(x2)[1]);
    if d % n_head != 0 {
        return Err(Error::shape("mhsa", format!("d_model {d} not divisible by n_head {n_head}")));
    }
    let dk = d / n_head;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());

    let q = layer.wq.apply(tape, x2)?;
    let k = layer.wk.apply(tape, x2)?;
    let v = layer.wv.apply(tape, x2)?;

    let mut head_outs = Vec::with_capacity(n_head);
    let mut head_weights = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(k, 1, h * dk, dk)?;
        let vh = tape.slice(v, 1, h * dk, dk)?;
        // scaled dot-product scores over the single key position
        let qk = tape.mul(qh, kh)?;
        let dot = tape.sum_axis(qk, 1)?;
        let dot = tape.reshape(dot, &[batch, 1])?;
        let score = tape.affine(dot, scale, T::zero());
        let attn = tape.softmax(score, 1)?;
        let out_h = tape.mul(vh, attn)?;
        head_outs.push(out_h);
        head_weights.push(attn);
    }
    let concat = tape.concat(&head_outs, 1)?;
    let out = layer.wo.apply(tape, concat)?;
    let weights = tape.concat(&head_weights, 1)?;
    Ok((out, weights))
}

/// Multi-head self-attention output alone.
pub fn mhsa<T: Real>(tape: &mut Tape<T>, x: Tensor, layer: &EncoderLayer, n_head: usize) -> Result<Tensor> {
    mhsa_with_weights(tape, x, layer, n_head).map(|(o, _)| o)
}

/// Position-wise feed-forward network: relu(x W1 + b1) W2 + b2.
pub fn ffn<T: Real>(tape: &mut Tape<T>, x: Tensor, layer: &EncoderLayer) -> Result<Tensor> {
    let h = layer.ffn1.apply(tape, x)?;
    let h = tape.relu(h);
    layer.ffn2.apply(tape, h)
}

fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    x_proj: Tensor,
    layer: &EncoderLayer,
    n_head: usize,
) -> Result<Tensor> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let attn = mhsa(tape, x_proj, layer, n_head)?;
    let o_attn = tape.add(x_proj, attn)?;
    let o_n1 = tape.layernorm(o_attn, layer.ln1_g, layer.ln1_b, eps)?;
    let f = ffn(tape, o_n1, layer)?;
    let o_ffn = tape.add(o_n1, f)?;
    tape.layernorm(o_ffn, layer.ln2_g, layer.ln2_b, eps)
}

/// Full block: projection followed by the encoder layers. With no layers
/// (ablated block) this is the bare projection.
pub fn gat_forward<T: Real>(tape: &mut Tape<T>, x_concat: Tensor, h: &GatHandles) -> Result<Tensor> {
    let mut cur = project(tape, x_concat, h.w_p)?;
    for layer in &h.layers {
        cur = encoder_layer(tape, cur, layer, h.n_head)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_check, CheckInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GatConfig {
        GatConfig { d_in: 171, d_model: 16, n_head: 4, d_ffn: 24, num_layers: 1 }
    }

    fn build_set(cfg: &GatConfig, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        init_params(&mut set, "gat", cfg, true, &mut rng);
        set
    }

    #[test]
    fn fuse_zeros_and_dims() {
        let dims = FuseDims { pe: 63, delta: 76, gamma: 32 };
        assert_eq!(dims.total(), 171);
        let mut tape = Tape::<f64>::new();
        let pe = tape.constant(vec![0.0; 63], &[1, 63]).unwrap();
        let d = tape.constant(vec![0.0; 76], &[1, 76]).unwrap();
        let g = tape.constant(vec![0.0; 32], &[1, 32]).unwrap();
        let fused = fuse_inputs(&mut tape, pe, d, g, &dims).unwrap();
        assert_eq!(tape.shape(fused), &[1, 171]);
        assert!(tape.data(fused).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_gamma_basis_offset() {
        let dims = FuseDims { pe: 63, delta: 76, gamma: 32 };
        let mut tape = Tape::<f64>::new();
        let pe = tape.constant(vec![0.0; 63], &[1, 63]).unwrap();
        let d = tape.constant(vec![0.0; 76], &[1, 76]).unwrap();
        for j in [0usize, 5, 31] {
            let mut gv = vec![0.0; 32];
            gv[j] = 1.0;
            let g = tape.constant(gv, &[1, 32]).unwrap();
            let fused = fuse_inputs(&mut tape, pe, d, g, &dims).unwrap();
            let data = tape.data(fused);
            assert_eq!(data[139 + j], 1.0);
            assert_eq!(data.iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn fuse_rejects_wrong_segment() {
        let dims = FuseDims { pe: 63, delta: 76, gamma: 32 };
        let mut tape = Tape::<f64>::new();
        let pe = tape.constant(vec![0.0; 63], &[1, 63]).unwrap();
        let d_bad = tape.constant(vec![0.0; 75], &[1, 75]).unwrap();
        let g = tape.constant(vec![0.0; 32], &[1, 32]).unwrap();
        let err = fuse_inputs(&mut tape, pe, d_bad, g, &dims).unwrap_err().to_string();
        assert!(err.contains("expression"), "{err}");
    }

    #[test]
    fn project_zero_and_block_identity() {
        let mut tape = Tape::<f64>::new();
        let x0 = tape.constant(vec![0.0; 171], &[1, 171]).unwrap();
        let w = tape.constant(vec![0.25; 171 * 8], &[171, 8]).unwrap();
        let y = project(&mut tape, x0, w).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));

        // block-identity fixture: W_p embeds the 4 inputs into the first 4
        // of 6 output dims, rest zero-padded
        let mut wid = vec![0.0; 4 * 6];
        for i in 0..4 {
            wid[i * 6 + i] = 1.0;
        }
        let x = tape.constant(vec![1.5, -2.5, 3.5, 4.5], &[1, 4]).unwrap();
        let wt = tape.constant(wid, &[4, 6]).unwrap();
        let y = project(&mut tape, x, wt).unwrap();
        assert_eq!(tape.data(y), &[1.5, -2.5, 3.5, 4.5, 0.0, 0.0]);
    }

    #[test]
    fn project_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let x: Vec<f64> = (0..171).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..171 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let xt = tape.constant(x.clone(), &[1, 171]).unwrap();
        let wt = tape.constant(w.clone(), &[171, 8]).unwrap();
        let y = project(&mut tape, xt, wt).unwrap();
        for j in 0..8 {
            let want: f64 = (0..171).map(|i| x[i] * w[i * 8 + j]).sum();
            assert!((tape.data(y)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_zero_input_zero_bias() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 5); // biases init to zero
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let x = tape.constant(vec![0.0; 3 * cfg.d_model], &[3, cfg.d_model]).unwrap();
        let y = mhsa(&mut tape, x, &h.layers[0], cfg.n_head).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mhsa_collapses_to_value_out_projection() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 17);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        use rand::Rng;
        let xv: Vec<f64> = (0..5 * cfg.d_model).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.constant(xv, &[5, cfg.d_model]).unwrap();
        let got = mhsa(&mut tape, x, &h.layers[0], cfg.n_head).unwrap();
        // independent route: out projection of the value projection
        let l = &h.layers[0];
        let v = l.wv.apply(&mut tape, x).unwrap();
        let want = l.wo.apply(&mut tape, v).unwrap();
        for (a, b) in tape.data(got).iter().zip(tape.data(want)) {
            assert!((a - b).abs() <= 1e-12, "collapse violated: {a} vs {b}");
        }
    }

    #[test]
    fn mhsa_attention_weights_all_ones() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 3);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let x = tape.constant(vec![0.7; 4 * cfg.d_model], &[4, cfg.d_model]).unwrap();
        let (_, w) = mhsa_with_weights(&mut tape, x, &h.layers[0], cfg.n_head).unwrap();
        assert_eq!(tape.shape(w), &[4, cfg.n_head]);
        assert!(tape.data(w).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mhsa_rejects_longer_sequences() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 3);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let x = tape.constant(vec![0.0; 2 * 3 * cfg.d_model], &[2, 3, cfg.d_model]).unwrap();
        assert!(mhsa(&mut tape, x, &h.layers[0], cfg.n_head).is_err());
    }

    #[test]
    fn ffn_relu_dead_gives_bias() {
        let cfg = small_cfg();
        let mut set = build_set(&cfg, 9);
        // force all first-layer pre-activations negative
        set.get_mut("gat.l0.ffn1.b").unwrap().data.iter_mut().for_each(|v| *v = -100.0);
        let b2_vals: Vec<f64> = (0..cfg.d_model).map(|i| i as f64 * 0.5).collect();
        set.get_mut("gat.l0.ffn2.b").unwrap().data = b2_vals.clone();
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let x = tape.constant(vec![0.1; cfg.d_model], &[1, cfg.d_model]).unwrap();
        let y = ffn(&mut tape, x, &h.layers[0]).unwrap();
        assert_eq!(tape.data(y), &b2_vals[..]);
    }

    #[test]
    fn ffn_zero_weights_constant_bias() {
        let cfg = small_cfg();
        let mut set = build_set(&cfg, 13);
        set.get_mut("gat.l0.ffn1.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        set.get_mut("gat.l0.ffn1.b").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        set.get_mut("gat.l0.ffn2.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        set.get_mut("gat.l0.ffn2.b").unwrap().data.iter_mut().for_each(|v| *v = 2.25);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let x = tape.constant(vec![3.3; 2 * cfg.d_model], &[2, cfg.d_model]).unwrap();
        let y = ffn(&mut tape, x, &h.layers[0]).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 2.25));
    }

    #[test]
    fn ffn_matches_composition_oracle() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 31);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        use rand::Rng;
        let xv: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(xv.clone(), &[1, cfg.d_model]).unwrap();
        let y = ffn(&mut tape, x, &h.layers[0]).unwrap();

        // direct dense-loop oracle
        let w1 = set.get("gat.l0.ffn1.w").unwrap();
        let b1 = set.get("gat.l0.ffn1.b").unwrap();
        let w2 = set.get("gat.l0.ffn2.w").unwrap();
        let b2 = set.get("gat.l0.ffn2.b").unwrap();
        let mut hid = vec![0.0; cfg.d_ffn];
        for j in 0..cfg.d_ffn {
            let mut acc = b1.data[j];
            for i in 0..cfg.d_model {
                acc += xv[i] * w1.data[i * cfg.d_ffn + j];
            }
            hid[j] = acc.max(0.0);
        }
        for j in 0..cfg.d_model {
            let mut acc = b2.data[j];
            for i in 0..cfg.d_ffn {
                acc += hid[i] * w2.data[i * cfg.d_model + j];
            }
            assert!((tape.data(y)[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_composition_order_with_dead_ffn() {
        // zero the FFN, leave LN as identity-affine at init: output must
        // equal LN2(LN1(x_proj + mhsa(x_proj)))
        let cfg = small_cfg();
        let mut set = build_set(&cfg, 41);
        for name in ["gat.l0.ffn1.w", "gat.l0.ffn1.b", "gat.l0.ffn2.w", "gat.l0.ffn2.b"] {
            set.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        use rand::Rng;
        let xv: Vec<f64> = (0..3 * cfg.d_in).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x = tape.constant(xv, &[3, cfg.d_in]).unwrap();
        let got = gat_forward(&mut tape, x, &h).unwrap();

        let eps = LAYER_NORM_EPS;
        let l = &h.layers[0];
        let xp = project(&mut tape, x, h.w_p).unwrap();
        let at = mhsa(&mut tape, xp, l, cfg.n_head).unwrap();
        let s = tape.add(xp, at).unwrap();
        let n1 = tape.layernorm(s, l.ln1_g, l.ln1_b, eps).unwrap();
        let want = tape.layernorm(n1, l.ln2_g, l.ln2_b, eps).unwrap();
        assert_eq!(tape.data(got), tape.data(want));
    }

    #[test]
    fn forward_output_dim_and_ln_statistics() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 47);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        use rand::Rng;
        let xv: Vec<f64> = (0..4 * cfg.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(xv, &[4, cfg.d_in]).unwrap();
        let y = gat_forward(&mut tape, x, &h).unwrap();
        assert_eq!(tape.shape(y), &[4, cfg.d_model]);
        // gain=1, bias=0 at init: rows are standardized pre-affine
        let d = cfg.d_model as f64;
        for row in tape.data(y).chunks(cfg.d_model) {
            let mean: f64 = row.iter().sum::<f64>() / d;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn forward_batch_equivariance() {
        let cfg = small_cfg();
        let set = build_set(&cfg, 59);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..cfg.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let run = |batch: &[Vec<f64>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
            let h = handles(&reg, "gat", &cfg).unwrap();
            let flat: Vec<f64> = batch.concat();
            let x = tape.constant(flat, &[batch.len(), cfg.d_in]).unwrap();
            let y = gat_forward(&mut tape, x, &h).unwrap();
            tape.data(y).to_vec()
        };

        let batched = run(&rows);
        for (i, row) in rows.iter().enumerate() {
            let single = run(std::slice::from_ref(row));
            assert_eq!(&batched[i * cfg.d_model..(i + 1) * cfg.d_model], &single[..]);
        }
    }

    #[test]
    fn ablated_block_is_bare_projection() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut set = ParamSet::<f64>::new();
        init_params(&mut set, "gat", &cfg, false, &mut rng);
        assert_eq!(set.len(), 1);
        let mut tape = Tape::new();
        let reg = RegisteredParams::constants(&set, &mut tape).unwrap();
        let h = handles(&reg, "gat", &cfg).unwrap();
        assert!(h.layers.is_empty());
        use rand::Rng;
        let xv: Vec<f64> = (0..cfg.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(xv, &[1, cfg.d_in]).unwrap();
        let got = gat_forward(&mut tape, x, &h).unwrap();
        let want = project(&mut tape, x, h.w_p).unwrap();
        assert_eq!(tape.data(got), tape.data(want));
    }

    #[test]
    fn full_block_gradient_check() {
        let cfg = GatConfig { d_in: 10, d_model: 8, n_head: 2, d_ffn: 12, num_layers: 1 };
        let set = build_set(&cfg, 67);
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<CheckInput> = std::iter::once(CheckInput::new(
            vec![0.3, -0.5, 0.8, 0.1, -0.9, 0.2, 0.7, -0.3, 0.5, -0.1],
            &[1, 10],
        ))
        .chain(set.iter().map(|(_, t)| CheckInput::new(t.data.clone(), &t.shape)))
        .collect();

        let err = gradient_check(
            |tape, leaves| {
                let mut set2 = ParamSet::<f64>::new();
                for (name, &leaf) in names.iter().zip(&leaves[1..]) {
                    let shape = tape.shape(leaf).to_vec();
                    set2.insert(name.clone(), PTensor::new(tape.data(leaf).to_vec(), &shape));
                }
                let reg = RegisteredParams::from_parts(&set2, leaves[1..].to_vec());
                let h = handles(&reg, "gat", &cfg)?;
                let y = gat_forward(tape, leaves[0], &h)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
            6,
            71,
        )
        .unwrap();
        assert!(err < 1e-4, "gat block gradient error {err}");
    }
}
