//! Quadrature compositing of densities and colors along rays.
//!
//! With depths t_1 < ... < t_N inside [t_near, t_far]:
//!   delta_i = t_{i+1} - t_i      (last interval runs to t_far)
//!   alpha_i = 1 - exp(-sigma_i * delta_i)
//!   T_i     = exp(-sum_{j<i} sigma_j delta_j)
//!   pixel   = sum_i T_i alpha_i c_i + (1 - sum_i T_i alpha_i) * background
//!
//! The background residual is 1 minus the weight sum by construction, so
//! weights plus residual always telescope to exactly one.

use crate::diffcore::{Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Per-ray compositing result (plain values).
#[derive(Debug, Clone)]
pub struct Composited {
    pub pixel: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Interval lengths for a sorted depth vector; the final interval extends to
/// `t_far` (clamped non-negative).
pub fn intervals(t: &[f64], t_far: f64) -> Vec<f64> {
    let n = t.len();
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { t_far };
        d.push((next - t[i]).max(0.0));
    }
    d
}

/// Composite one ray (reference implementation, f64).
pub fn composite(
    densities: &[f64],
    colors: &[[f64; 3]],
    t: &[f64],
    t_far: f64,
    background: [f64; 3],
) -> Result<Composited> {
    if densities.len() != t.len() || colors.len() != t.len() {
        return Err(Error::shape(
            "composite",
            format!("{} densities, {} colors, {} depths", densities.len(), colors.len(), t.len()),
        ));
    }
    if t.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::invalid("composite", "depths must be strictly ascending"));
    }
    if densities.iter().any(|&s| s < 0.0 || s.is_nan()) {
        return Err(Error::invalid("composite", "negative density"));
    }
    let deltas = intervals(t, t_far);
    let mut transmittance = Vec::with_capacity(t.len());
    let mut weights = Vec::with_capacity(t.len());
    let mut pixel = [0.0f64; 3];
    let mut accum: f64 = 0.0; // optical depth so far
    let mut wsum = 0.0;
    for i in 0..t.len() {
        let tr = (-accum).exp();
        transmittance.push(tr);
        let alpha = 1.0 - (-densities[i] * deltas[i]).exp();
        let w = tr * alpha;
        weights.push(w);
        wsum += w;
        for c in 0..3 {
            pixel[c] += w * colors[i][c];
        }
        accum += densities[i] * deltas[i];
    }
    let residual = 1.0 - wsum;
    for c in 0..3 {
        pixel[c] += residual * background[c];
    }
    Ok(Composited { pixel, weights, transmittance })
}

/// Batched differentiable compositing on a tape.
pub struct CompositedBatch {
    /// [rays, 3]
    pub pixels: Tensor,
    /// [rays, samples]
    pub weights: Tensor,
}

/// `sigma` is [rays, samples] (non-negative), `colors` [rays*samples, 3],
/// `t` row-major [rays, samples] plain depths.
pub fn composite_batch<T: Real>(
    tape: &mut Tape<T>,
    sigma: Tensor,
    colors: Tensor,
    t: &[f64],
    t_far: f64,
    background: [f64; 3],
) -> Result<CompositedBatch> {
    let shape = tape.shape(sigma).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("composite", format!("sigma must be [rays, samples], got {shape:?}")));
    }
    let (rays, samples) = (shape[0], shape[1]);
    if t.len() != rays * samples {
        return Err(Error::shape(
            "composite",
            format!("{} depths for {} rays x {} samples", t.len(), rays, samples),
        ));
    }
    if tape.shape(colors) != [rays * samples, 3] {
        return Err(Error::shape(
            "composite",
            format!("colors shape {:?}, expected [{}, 3]", tape.shape(colors), rays * samples),
        ));
    }
    // interval lengths per ray
    let mut deltas = Vec::with_capacity(t.len());
    for r in 0..rays {
        let row = &t[r * samples..(r + 1) * samples];
        deltas.extend(intervals(row, t_far).into_iter().map(T::from_f64));
    }
    let delta_t = tape.constant(deltas, &[rays, samples])?;
    let optical = tape.mul(sigma, delta_t)?;
    let accum = tape.cumsum_exclusive(optical)?;
    let neg_accum = tape.neg(accum);
    let transmittance = tape.exp(neg_accum);
    let neg_optical = tape.neg(optical);
    let one_minus_alpha = tape.exp(neg_optical);
    let alpha = tape.affine(one_minus_alpha, -T::one(), T::one());
    let weights = tape.mul(transmittance, alpha)?;

    let w3 = tape.reshape(weights, &[rays, samples, 1])?;
    let c3 = tape.reshape(colors, &[rays, samples, 3])?;
    let weighted = tape.mul(c3, w3)?;
    let fg = tape.sum_axis(weighted, 1)?; // [rays, 3]

    let wsum = tape.sum_axis(weights, 1)?; // [rays]
    let wsum = tape.reshape(wsum, &[rays, 1])?;
    let residual = tape.affine(wsum, -T::one(), T::one());
    let bg = tape.constant(background.iter().map(|&v| T::from_f64(v)).collect(), &[1, 3])?;
    let bg_term = tape.mul(residual, bg)?;
    let pixels = tape.add(fg, bg_term)?;
    Ok(CompositedBatch { pixels, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transparent_gives_background() {
        let t = vec![0.2, 0.4, 0.6, 0.8];
        let out = composite(&[0.0; 4], &[[0.9, 0.1, 0.2]; 4], &t, 1.0, [0.3, 0.6, 0.9]).unwrap();
        assert_eq!(out.pixel, [0.3, 0.6, 0.9]);
        assert!(out.weights.iter().all(|&w| w == 0.0));
        assert!(out.transmittance.iter().all(|&tr| tr == 1.0));
    }

    #[test]
    fn opaque_front_takes_first_color() {
        let t = vec![0.1, 0.5, 0.9];
        let out = composite(
            &[f64::INFINITY, 3.0, 1.0],
            &[[0.2, 0.7, 0.4], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &t,
            1.0,
            [1.0, 1.0, 1.0],
        )
        .unwrap();
        assert_eq!(out.pixel, [0.2, 0.7, 0.4]);
        assert_eq!(out.weights[0], 1.0);
        assert!(out.weights[1] == 0.0 && out.weights[2] == 0.0);
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        // sigma=2 over [0,1], black background: red -> 1 - e^-2
        let want = 1.0 - (-2.0f64).exp();
        let mut prev_err = f64::INFINITY;
        for n in [32usize, 64, 128, 256] {
            let t: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let out = composite(&vec![2.0; n], &vec![[1.0, 0.0, 0.0]; n], &t, 1.0, [0.0; 3]).unwrap();
            let err = (out.pixel[0] - want).abs();
            assert!(err < prev_err, "error must shrink as bins halve: {err} !< {prev_err}");
            prev_err = err;
            if n == 256 {
                assert!(err < 5e-3, "error {err} at n=256");
            }
        }
    }

    #[test]
    fn transmittance_non_increasing_and_t1_is_one() {
        let t = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        let out = composite(
            &[0.5, 2.0, 0.1, 4.0, 1.0],
            &[[0.5; 3]; 5],
            &t,
            1.0,
            [0.0; 3],
        )
        .unwrap();
        assert_eq!(out.transmittance[0], 1.0);
        assert!(out.transmittance.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn weights_plus_residual_telescope_to_one() {
        let t = vec![0.15, 0.42, 0.58, 0.73];
        let out = composite(&[1.3, 0.2, 5.0, 0.9], &[[0.1; 3]; 4], &t, 1.0, [0.0; 3]).unwrap();
        let wsum: f64 = out.weights.iter().sum();
        assert!(wsum <= 1.0 + 1e-12);
        // the residual definition makes w + residual exactly 1
        let residual = 1.0 - wsum;
        assert_eq!(wsum + residual, 1.0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let t_bad = vec![0.5, 0.4];
        assert!(composite(&[1.0, 1.0], &[[0.0; 3]; 2], &t_bad, 1.0, [0.0; 3]).is_err());
        let t = vec![0.4, 0.5];
        assert!(composite(&[1.0, -0.5], &[[0.0; 3]; 2], &t, 1.0, [0.0; 3]).is_err());
    }

    #[test]
    fn batch_matches_reference_per_ray() {
        let rays = 3;
        let samples = 5;
        let mut tdata = Vec::new();
        let mut sig = Vec::new();
        let mut cols = Vec::new();
        for r in 0..rays {
            for i in 0..samples {
                tdata.push(0.1 + i as f64 * 0.2 + r as f64 * 0.01);
                sig.push(0.3 + 0.7 * ((r * samples + i) % 4) as f64);
                let base = (r * samples + i) as f64 * 0.02;
                cols.push([base, 1.0 - base, 0.5]);
            }
        }
        let bg = [0.9, 0.8, 0.7];
        let t_far = 1.5;

        let mut tape = Tape::<f64>::new();
        let sig_t = tape.constant(sig.clone(), &[rays, samples]).unwrap();
        let col_flat: Vec<f64> = cols.iter().flatten().copied().collect();
        let col_t = tape.constant(col_flat, &[rays * samples, 3]).unwrap();
        let out = composite_batch(&mut tape, sig_t, col_t, &tdata, t_far, bg).unwrap();

        for r in 0..rays {
            let lo = r * samples;
            let single = composite(
                &sig[lo..lo + samples],
                &cols[lo..lo + samples],
                &tdata[lo..lo + samples],
                t_far,
                bg,
            )
            .unwrap();
            for c in 0..3 {
                let batch_v = tape.data(out.pixels)[r * 3 + c];
                assert!((batch_v - single.pixel[c]).abs() < 1e-12);
            }
            for i in 0..samples {
                let bw = tape.data(out.weights)[r * samples + i];
                assert!((bw - single.weights[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_composite_gradients() {
        use crate::diffcore::{gradient_check, CheckInput};
        let t = vec![0.1, 0.35, 0.62, 0.9, 0.12, 0.4, 0.55, 0.88];
        let err = gradient_check(
            |tape, l| {
                let out = composite_batch(tape, l[0], l[1], &t, 1.0, [0.2, 0.5, 0.8])?;
                let sq = tape.mul(out.pixels, out.pixels)?;
                Ok(tape.sum(sq))
            },
            &[
                CheckInput::new(vec![0.5, 1.2, 0.3, 2.0, 0.8, 0.05, 1.5, 0.9], &[2, 4]),
                CheckInput::new((0..24).map(|i| 0.04 * i as f64).collect(), &[8, 3]),
            ],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "composite gradient error {err}");
    }
}
