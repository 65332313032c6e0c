//! Image-quality metrics: mean absolute error, PSNR, and single-scale SSIM.
//!
//! SSIM uses the canonical parameters: luminance weights (0.299, 0.587,
//! 0.114), an 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03,
//! dynamic range 1.0, averaged over window positions fully inside the image.

use crate::dataio::Image;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for bit-identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
}

impl MetricReport {
    pub fn from_frames(per_image: Vec<FrameMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = FrameMetrics {
            l1: per_image.iter().map(|m| m.l1).sum::<f64>() / n,
            psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
        };
        MetricReport { per_image, mean }
    }
}

fn check_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            op,
            format!("image dims {}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_dims("l1", a, b)?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims("mse", a, b)?;
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// 10 log10(1 / MSE) for values in [0,1]; identical images report the cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn luminance(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode convolution with the 1-D Gaussian along x then y.
fn blur_valid(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let half = SSIM_WINDOW / 2;
    let ow = w - 2 * half;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let oh = h - 2 * half;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM on the luminance channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims("ssim", a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.width, a.height),
        ));
    }
    let x = luminance(a);
    let y = luminance(b);
    let (w, h) = (a.width, a.height);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let kernel = gaussian_kernel();
    let (mu_x, ow, oh) = blur_valid(&x, w, h, &kernel);
    let (mu_y, _, _) = blur_valid(&y, w, h, &kernel);
    let (e_xx, _, _) = blur_valid(&xx, w, h, &kernel);
    let (e_yy, _, _) = blur_valid(&yy, w, h, &kernel);
    let (e_xy, _, _) = blur_valid(&xy, w, h, &kernel);

    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        acc += s;
    }
    Ok(acc / (ow * oh) as f64)
}

/// All three metrics for one image pair.
pub fn compare(a: &Image, b: &Image) -> Result<FrameMetrics> {
    Ok(FrameMetrics { l1: l1(a, b)?, psnr: psnr(a, b)?, ssim: ssim(a, b)? })
}
