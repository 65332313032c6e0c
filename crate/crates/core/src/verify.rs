//! Finite-difference verification suite: every differentiable operation plus
//! the full field network, all in f64 at step 1e-5.
//!
//! The corruption hook (`corrupt = Some(op)`) scales that check's loss in
//! the analytic pass only, which is indistinguishable from a wrong adjoint;
//! the suite must then flag exactly that operation. Tests use it as a
//! negative control.

use crate::diffcore::{gradient_check, CheckInput, ParamSet, PTensor, RegisteredParams, Tape, Tensor};
use crate::encoding::PeConfig;
use crate::error::Result;
use crate::field::{self, FieldConfig};
use crate::gat::GatConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Coordinates probed by the check.
    pub coords: usize,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Keep relu inputs away from the kink at zero.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Corruption: scale the loss in the analytic pass only (leaves are
/// gradient leaves there, constants in the FD passes).
fn maybe_corrupt(tape: &mut Tape<f64>, leaves: &[Tensor], loss: Tensor, corrupt: bool) -> Tensor {
    if corrupt && leaves.iter().any(|&l| tape.requires_grad(l)) {
        tape.affine(loss, 1.001, 0.0)
    } else {
        loss
    }
}

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Tensor], bool) -> Result<Tensor>>;

fn op_checks() -> Vec<(&'static str, Vec<CheckInput>, BuildFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checks: Vec<(&'static str, Vec<CheckInput>, BuildFn)> = Vec::new();

    let a34 = rand_vec(&mut rng, 12, -1.0, 1.0);
    let b42 = rand_vec(&mut rng, 8, -1.0, 1.0);
    checks.push((
        "matmul",
        vec![CheckInput::new(a34, &[3, 4]), CheckInput::new(b42, &[4, 2])],
        Box::new(|t, l, c| {
            let p = t.matmul(l[0], l[1])?;
            let sq = t.mul(p, p)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let x23 = rand_vec(&mut rng, 6, -1.0, 1.0);
    let bias = rand_vec(&mut rng, 3, -1.0, 1.0);
    checks.push((
        "add",
        vec![CheckInput::new(x23, &[2, 3]), CheckInput::new(bias, &[1, 3])],
        Box::new(|t, l, c| {
            let s = t.add(l[0], l[1])?;
            let sq = t.mul(s, s)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let m1 = rand_vec(&mut rng, 6, -1.0, 1.0);
    let m2 = rand_vec(&mut rng, 2, -1.0, 1.0);
    checks.push((
        "mul",
        vec![CheckInput::new(m1, &[2, 3]), CheckInput::new(m2, &[2, 1])],
        Box::new(|t, l, c| {
            let p = t.mul(l[0], l[1])?;
            let sq = t.mul(p, p)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let s1 = rand_vec(&mut rng, 6, -1.0, 1.0);
    let s2 = rand_vec(&mut rng, 6, -1.0, 1.0);
    checks.push((
        "sub",
        vec![CheckInput::new(s1, &[2, 3]), CheckInput::new(s2, &[2, 3])],
        Box::new(|t, l, c| {
            let d = t.sub(l[0], l[1])?;
            let sq = t.mul(d, d)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let c1 = rand_vec(&mut rng, 4, -1.0, 1.0);
    let c2 = rand_vec(&mut rng, 6, -1.0, 1.0);
    checks.push((
        "concat_slice",
        vec![CheckInput::new(c1, &[2, 2]), CheckInput::new(c2, &[2, 3])],
        Box::new(|t, l, c| {
            let cat = t.concat(&[l[0], l[1]], 1)?;
            let sl = t.slice(cat, 1, 1, 3)?;
            let sq = t.mul(sl, sl)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let r1 = rand_vec(&mut rng, 8, -1.0, 1.0);
    checks.push((
        "sum_mean_axis",
        vec![CheckInput::new(r1, &[2, 4])],
        Box::new(|t, l, c| {
            let per_row = t.sum_axis(l[0], 1)?;
            let sq = t.mul(per_row, per_row)?;
            let m = t.mean(sq);
            let s = t.sum(sq);
            let loss = t.add(m, s)?;
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let e1 = rand_vec(&mut rng, 6, -1.0, 1.0);
    checks.push((
        "exp",
        vec![CheckInput::new(e1, &[2, 3])],
        Box::new(|t, l, c| {
            let e = t.exp(l[0]);
            let loss = t.sum(e);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let rl = rand_vec_off_zero(&mut rng, 8, 1e-3);
    checks.push((
        "relu",
        vec![CheckInput::new(rl, &[2, 4])],
        Box::new(|t, l, c| {
            let r = t.relu(l[0]);
            let sq = t.mul(r, r)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let sg = rand_vec(&mut rng, 6, -2.0, 2.0);
    checks.push((
        "sigmoid",
        vec![CheckInput::new(sg, &[2, 3])],
        Box::new(|t, l, c| {
            let s = t.sigmoid(l[0]);
            let sq = t.mul(s, s)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let sm = rand_vec(&mut rng, 8, -1.5, 1.5);
    checks.push((
        "softmax",
        vec![CheckInput::new(sm, &[2, 4])],
        Box::new(|t, l, c| {
            let s = t.softmax(l[0], 1)?;
            let sq = t.mul(s, s)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let ln = rand_vec(&mut rng, 12, -1.5, 1.5);
    let g = rand_vec(&mut rng, 6, 0.5, 1.5);
    let b = rand_vec(&mut rng, 6, -0.5, 0.5);
    checks.push((
        "layernorm",
        vec![CheckInput::new(ln, &[2, 6]), CheckInput::new(g, &[6]), CheckInput::new(b, &[6])],
        Box::new(|t, l, c| {
            let y = t.layernorm(l[0], l[1], l[2], 1e-5)?;
            let sq = t.mul(y, y)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let cu = rand_vec(&mut rng, 8, -1.0, 1.0);
    checks.push((
        "cumsum_exclusive",
        vec![CheckInput::new(cu, &[2, 4])],
        Box::new(|t, l, c| {
            let s = t.cumsum_exclusive(l[0])?;
            let e = t.exp(s);
            let loss = t.sum(e);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    let rr = rand_vec(&mut rng, 4, -1.0, 1.0);
    checks.push((
        "repeat_rows_affine",
        vec![CheckInput::new(rr, &[1, 4])],
        Box::new(|t, l, c| {
            let rep = t.repeat_rows(l[0], 5)?;
            let af = t.affine(rep, 1.7, -0.3);
            let sq = t.mul(af, af)?;
            let loss = t.sum(sq);
            Ok(maybe_corrupt(t, l, loss, c))
        }),
    ));

    checks
}

/// Small-but-complete network configuration for the end-to-end check.
fn check_field_config() -> FieldConfig {
    FieldConfig {
        pe: PeConfig { bands_position: 3, bands_direction: 2, include_input: true },
        gat: GatConfig { d_in: 21 + 12 + 8, d_model: 16, n_head: 4, d_ffn: 24, num_layers: 1 },
        delta_dim: 12,
        latent_dim: 8,
        color_width: 10,
        view_dependent: true,
    }
}

/// Gradient check of the full network (both heads through a scalar loss),
/// probing several coordinates of every parameter tensor and the latent
/// code. `min_coords` bounds the total probes from below.
pub fn full_network_check(corrupt: bool, min_coords: usize) -> Result<(f64, usize)> {
    let cfg = check_field_config();
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let mut set = ParamSet::<f64>::new();
    field::init_params(&mut set, "net", &cfg, true, &mut rng);

    let n_points = 2usize;
    let points: Vec<[f64; 3]> = (0..n_points)
        .map(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)])
        .collect();
    let dirs: Vec<[f64; 3]> = (0..n_points)
        .map(|_| {
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let delta = rand_vec(&mut rng, cfg.delta_dim, -1.0, 1.0);
    let gamma = rand_vec(&mut rng, cfg.latent_dim, -0.5, 0.5);

    let pe_p = crate::encoding::encode_batch(&points, cfg.pe.bands_position, true)?;
    let pe_d = crate::encoding::encode_batch(&dirs, cfg.pe.bands_direction, true)?;

    let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<CheckInput> = std::iter::once(CheckInput::new(gamma, &[1, cfg.latent_dim]))
        .chain(set.iter().map(|(_, t)| CheckInput::new(t.data.clone(), &t.shape)))
        .collect();
    let per_tensor = min_coords.div_ceil(inputs.len()).max(2);
    let coords: usize = inputs.iter().map(|i| i.data.len().min(per_tensor)).sum();

    let err = gradient_check(
        move |tape, leaves| {
            let mut set2 = ParamSet::<f64>::new();
            for (name, &leaf) in names.iter().zip(&leaves[1..]) {
                let shape = tape.shape(leaf).to_vec();
                set2.insert(name.clone(), PTensor::new(tape.data(leaf).to_vec(), &shape));
            }
            let reg = RegisteredParams::from_parts(&set2, leaves[1..].to_vec());
            let h = field::handles(&reg, "net", &cfg)?;
            let pe_pt = tape.constant(pe_p.clone(), &[n_points, cfg.pe.position_len()])?;
            let pe_dt = tape.constant(pe_d.clone(), &[n_points, cfg.pe.direction_len()])?;
            let dt = tape.constant(delta.clone(), &[1, cfg.delta_dim])?;
            let out = field::query_encoded(tape, pe_pt, Some(pe_dt), dt, leaves[0], &h, &cfg)?;
            let c2 = tape.mul(out.color, out.color)?;
            let cs = tape.sum(c2);
            let ds = tape.sum(out.density);
            let loss = tape.add(cs, ds)?;
            Ok(maybe_corrupt(tape, leaves, loss, corrupt))
        },
        &inputs,
        FD_STEP,
        per_tensor,
        1234,
    )?;
    Ok((err, coords))
}

/// Run the whole suite. `corrupt` names one check whose analytic gradient is
/// deliberately wrong (negative control).
pub fn run_suite(corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (name, inputs, build) in op_checks() {
        let bad = corrupt == Some(name);
        let coords: usize = inputs.iter().map(|i| i.data.len()).sum();
        let err = gradient_check(
            |t, l| build(t, l, bad),
            &inputs,
            FD_STEP,
            usize::MAX,
            42,
        )?;
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: GRADCHECK_TOLERANCE,
            pass: err < GRADCHECK_TOLERANCE,
            coords,
        });
    }
    let bad = corrupt == Some("full_network");
    let (err, coords) = full_network_check(bad, 100)?;
    reports.push(CheckReport {
        name: "full_network".to_string(),
        max_rel_err: err,
        tolerance: GRADCHECK_TOLERANCE,
        pass: err < GRADCHECK_TOLERANCE,
        coords,
    });
    Ok(reports)
}
