//! Central finite-difference verification of tape gradients.
//!
//! Always f64: at step 1e-5 the difference quotient is below f32 resolution.

use super::tape::{Tape, Tensor};
use crate::error::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One differentiable input to the function under test.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        CheckInput { data, shape: shape.to_vec() }
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare tape gradients of a scalar function against central differences.
///
/// `build` reconstructs the computation from leaf tensors (one per input) and
/// returns the scalar loss. At most `max_coords` coordinates per input are
/// probed, chosen by a seeded draw when an input is larger than that.
///
/// Returns max over probed coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn gradient_check<F>(
    build: F,
    inputs: &[CheckInput],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.data.clone(), &inp.shape))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            tape.grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].data.len()])
        })
        .collect();

    // Forward-only evaluation at perturbed inputs.
    let forward = |values: &[Vec<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let lv: Vec<Tensor> = inputs
            .iter()
            .zip(values.iter())
            .map(|(inp, v)| t.constant(v.clone(), &inp.shape))
            .collect::<Result<_>>()?;
        let l = build(&mut t, &lv)?;
        Ok(t.item(l))
    };

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (i, inp) in inputs.iter().enumerate() {
        let n = inp.data.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = values[i][c];
            values[i][c] = orig + step;
            let plus = forward(&values)?;
            values[i][c] = orig - step;
            let minus = forward(&values)?;
            values[i][c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
