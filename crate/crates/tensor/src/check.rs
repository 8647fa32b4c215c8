//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all inputs.
    pub max_rel_err: f64,
    /// Relative error of each input, in argument order.
    pub per_input: Vec<f64>,
}

/// Compare the analytic gradient of `build` against central differences.
///
/// The graph output `y` is reduced to the scalar `sum(r * y)` with fixed
/// random weights `r` in [-1, 1], so every output element contributes. For
/// each input the relative error is `max|g_analytic - g_numeric| /
/// max|g_numeric|` (the absolute error when the numeric gradient vanishes).
/// The finite-difference objective is accumulated in f64 from the f32
/// outputs.
pub fn gradient_check<F>(inputs: &[Tensor], h: f32, seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let forward = |values: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        Ok(g.value(y).clone())
    };

    let y0 = forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(y0.shape(), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
    let objective = |y: &Tensor| -> f64 {
        y.data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let rv = g.input(r.clone());
    let weighted = g.mul(y, rv)?;
    let loss = g.sum(weighted)?;
    g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let plus = objective(&forward(&values)?);
            values[k].data_mut()[i] = orig - h;
            let minus = objective(&forward(&values)?);
            values[k].data_mut()[i] = orig;
            // The realised step can differ from `h` by f32 rounding.
            let step = (orig + h) as f64 - (orig - h) as f64;
            let numeric = (plus - minus) / step;
            max_diff = max_diff.max((analytic.data()[i] as f64 - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        per_input.push(if max_num > 0.0 { max_diff / max_num } else { max_diff });
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_err,
        per_input,
    })
}
