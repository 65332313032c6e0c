//! High-frequency sinusoidal positional encoding of points and directions.
//!
//! Per component x: [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x),
//! cos(2^{L-1} pi x)], frequencies doubling per band. The raw input is
//! included, so a 3-vector encodes to 3*(1+2L) values (63 at L=10, 27 at
//! L=4).

use crate::diffcore::Real;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub bands_position: usize,
    pub bands_direction: usize,
    pub include_input: bool,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig { bands_position: 10, bands_direction: 4, include_input: true }
    }
}

impl PeConfig {
    /// Encoded length of one 3-vector at `bands` frequency bands.
    pub fn encoded_len(bands: usize, include_input: bool) -> usize {
        if include_input {
            3 * (1 + 2 * bands)
        } else {
            6 * bands
        }
    }

    pub fn position_len(&self) -> usize {
        Self::encoded_len(self.bands_position, self.include_input)
    }

    pub fn direction_len(&self) -> usize {
        Self::encoded_len(self.bands_direction, self.include_input)
    }
}

/// Encode one 3-vector into `out`, which must have the exact encoded length.
/// Layout: per component, identity (when included) then interleaved
/// sin/cos over bands; components are kept contiguous.
pub fn positional_encode_into<T: Real>(
    x: &[T; 3],
    bands: usize,
    include_input: bool,
    out: &mut [T],
) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "positional_encode",
            format!("non-finite input component in {:?}", x.map(|v| v.as_f64())),
        ));
    }
    let per = if include_input { 1 + 2 * bands } else { 2 * bands };
    debug_assert_eq!(out.len(), 3 * per);
    let pi = T::from_f64(std::f64::consts::PI);
    for (c, &v) in x.iter().enumerate() {
        let base = c * per;
        let mut k = base;
        if include_input {
            out[k] = v;
            k += 1;
        }
        let mut freq = pi;
        for _ in 0..bands {
            let phase = freq * v;
            out[k] = phase.sin();
            out[k + 1] = phase.cos();
            k += 2;
            freq = freq + freq;
        }
    }
    Ok(())
}

/// Encode one 3-vector, allocating the output.
pub fn positional_encode<T: Real>(x: &[T; 3], bands: usize, include_input: bool) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); PeConfig::encoded_len(bands, include_input)];
    positional_encode_into(x, bands, include_input, &mut out)?;
    Ok(out)
}

/// Encode a batch of 3-vectors (rows of `points`) into a [batch, encoded]
/// row-major buffer.
pub fn encode_batch<T: Real>(points: &[[T; 3]], bands: usize, include_input: bool) -> Result<Vec<T>> {
    let d = PeConfig::encoded_len(bands, include_input);
    let mut out = vec![T::zero(); points.len() * d];
    for (i, p) in points.iter().enumerate() {
        positional_encode_into(p, bands, include_input, &mut out[i * d..(i + 1) * d])?;
    }
    Ok(out)
}
