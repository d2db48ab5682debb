//! Central finite-difference checking for tape-built functions.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative gradient error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// for each input, where `f` builds a scalar loss from the recorded inputs.
pub fn relative_errors<F>(inputs: &[Tensor], h: f32, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item() as f64)
    };

    let mut errs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let mut numeric = vec![0.0f64; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = inputs[i].to_vec();
            let mut dm = dp.clone();
            dp[j] += h;
            dm[j] -= h;
            plus[i] = Tensor::new(inputs[i].shape().to_vec(), dp)?;
            minus[i] = Tensor::new(inputs[i].shape().to_vec(), dm)?;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * h as f64);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.l2_norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = na.max(nn);
        errs.push(if denom < 1e-12 { 0.0 } else { diff / denom });
    }
    Ok(errs)
}

/// Reduces an arbitrary-shape output to a scalar through a fixed pseudo-random
/// projection, so every output element contributes to the checked gradient.
pub fn project(tape: &mut Tape, out: Var, salt: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::from_fn(shape, |i| {
        let mut z = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
        z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        ((z >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    });
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}
