//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! with the reverse pass it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::float::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; plain `‖a − n‖` when both are ~0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reduces `out` to a scalar through a fixed random weighting, so every output
/// element contributes a distinct direction to the checked gradient.
pub fn weighted_sum<'t, F: Float>(out: Var<'t, F>, seed: u64) -> Result<Var<'t, F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let w = out.tape().constant(w);
    out.mul(w)?.sum()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest per-input relative error.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Central difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. Truncation error is O(h⁴), so a
    /// larger `h` can be used, which keeps f32 round-off in the forward pass small.
    FourPoint,
}

/// Compares reverse-mode gradients of `build` at `inputs` against two-point central
/// differences with the given `step`.
pub fn check_gradients<F, B>(inputs: &[Tensor<F>], step: f64, build: B) -> Result<GradCheck>
where
    F: Float,
    B: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
{
    check_gradients_with(inputs, step, Stencil::TwoPoint, build)
}

pub fn check_gradients_with<F, B>(inputs: &[Tensor<F>], step: f64, stencil: Stencil, build: B) -> Result<GradCheck>
where
    F: Float,
    B: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |xs: &[Tensor<F>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars)?;
        let v = out.value().data()[0].to_f64_lossy();
        Ok(v)
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut at = |k: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + F::from_f64_lossy(k * step);
                let v = eval(&work);
                work[i].data_mut()[j] = orig;
                v
            };
            // Divide by the realized span: `orig ± h` is rounded to F.
            let span = |k: f64| {
                (orig + F::from_f64_lossy(k * step)).to_f64_lossy() - (orig - F::from_f64_lossy(k * step)).to_f64_lossy()
            };
            let d1 = (at(1.0)? - at(-1.0)?) / span(1.0);
            let d = match stencil {
                Stencil::TwoPoint => d1,
                Stencil::FourPoint => {
                    let d2 = (at(2.0)? - at(-2.0)?) / span(2.0);
                    (4.0 * d1 - d2) / 3.0
                }
            };
            numeric.push(d);
        }
        per_input.push(relative_error(&analytic[i], &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_err, per_input })
}
