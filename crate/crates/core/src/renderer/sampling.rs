//! Depth sampling along rays: stratified bins and inverse-CDF importance
//! draws from the coarse pass's weight distribution.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Floor added to importance weights so an all-zero distribution degenerates
/// to uniform instead of an empty pdf.
pub const WEIGHT_FLOOR: f64 = 1e-5;

/// Derive an independent per-ray RNG stream from (seed, salt, ray index).
pub fn ray_rng(seed: u64, salt: u64, ray: u64) -> ChaCha8Rng {
    // splitmix-style mixing into a 256-bit seed
    let mut s = [0u8; 32];
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = |v: u64| {
        state = state.wrapping_add(v).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let words = [next(seed), next(salt), next(ray), next(seed ^ salt ^ ray)];
    for (i, w) in words.iter().enumerate() {
        s[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(s)
}

/// N ascending depths over [t_near, t_far]: bin midpoints, or one uniform
/// draw per bin when jittered.
pub fn stratified_sample(
    t_near: f64,
    t_far: f64,
    n: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Vec<f64> {
    debug_assert!(n >= 1 && t_near < t_far);
    let width = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| {
            let lo = t_near + i as f64 * width;
            if jitter {
                lo + rng.gen::<f64>() * width
            } else {
                lo + 0.5 * width
            }
        })
        .collect()
}

/// How fine-sample positions within the CDF are chosen.
pub enum DrawMode<'a, R: Rng> {
    /// Deterministic stratified quantiles (j + 0.5)/n.
    Midpoints,
    Rng(&'a mut R),
}

/// Inverse-CDF draws from the piecewise-constant density over the coarse
/// depth bins. Bin i is centered on coarse depth t[i] (edges are the
/// midpoints between consecutive depths, closed by t[0] and t[n-1]) and has
/// density proportional to weights[i] + floor. Returns `n` ascending depths.
pub fn sample_pdf<R: Rng>(
    weights: &[f64],
    t_coarse: &[f64],
    n: usize,
    mode: DrawMode<R>,
) -> Result<Vec<f64>> {
    if weights.len() != t_coarse.len() {
        return Err(Error::shape(
            "sample_pdf",
            format!("{} weights for {} depths", weights.len(), t_coarse.len()),
        ));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::invalid("sample_pdf", "weights must be finite and non-negative"));
    }
    let m = t_coarse.len();
    if m < 2 {
        let t0 = *t_coarse.first().ok_or_else(|| Error::invalid("sample_pdf", "empty depth vector"))?;
        return Ok(vec![t0; n]);
    }
    // bin edges: [t0, mid(t0,t1), ..., mid(t_{m-2}, t_{m-1}), t_{m-1}]
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(t_coarse[0]);
    for i in 0..m - 1 {
        edges.push(0.5 * (t_coarse[i] + t_coarse[i + 1]));
    }
    edges.push(t_coarse[m - 1]);

    // mass per bin = padded density * bin width, then normalized into a CDF
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut total = 0.0;
    for i in 0..m {
        let width = (edges[i + 1] - edges[i]).max(0.0);
        total += (weights[i] + WEIGHT_FLOOR) * width;
        cdf.push(total);
    }
    if total <= 0.0 {
        return Ok(vec![t_coarse[0]; n]);
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }

    let us: Vec<f64> = match mode {
        DrawMode::Midpoints => (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect(),
        DrawMode::Rng(rng) => (0..n).map(|_| rng.gen::<f64>()).collect(),
    };
    let mut out: Vec<f64> = us
        .into_iter()
        .map(|u| {
            // binary search for the bin containing u
            let mut lo = 0usize;
            let mut hi = m;
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if cdf[mid] <= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let span = cdf[lo + 1] - cdf[lo];
            let frac = if span > 0.0 { (u - cdf[lo]) / span } else { 0.5 };
            edges[lo] + frac * (edges[lo + 1] - edges[lo])
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Fine-pass depths: importance draws merged and sorted with the coarse
/// depths. The weights are plain values — nothing differentiable flows in.
pub fn importance_sample<R: Rng>(
    weights: &[f64],
    t_coarse: &[f64],
    n_fine: usize,
    mode: DrawMode<R>,
) -> Result<Vec<f64>> {
    let fine = sample_pdf(weights, t_coarse, n_fine, mode)?;
    let mut merged = Vec::with_capacity(t_coarse.len() + fine.len());
    merged.extend_from_slice(t_coarse);
    merged.extend_from_slice(&fine);
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(merged)
}
