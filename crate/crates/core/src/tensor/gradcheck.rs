use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Result, Tape, Tensor, TensorError, Var};

/// A scalar-valued function of several tensors that can be evaluated at
/// any precision, so analytic gradients (at `F`) can be compared with
/// 64-bit central differences.
pub trait ScalarFn {
    fn eval<'t, F: Float>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Same quantity restricted to each input.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

/// Checks every entry of every input.
pub fn grad_check<F: Float>(
    f: &impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check_sampled::<F>(f, inputs, eps, usize::MAX, 0)
}

/// Checks at most `per_input` randomly chosen entries of each input.
pub fn grad_check_sampled<F: Float>(
    f: &impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(TensorError::invalid("grad_check", "eps must be positive"));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::<F>::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.cast())).collect();
        let loss = f.eval(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(|g| g.to_f64_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    };

    let eval64 = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f.eval(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per = vec![0f64; inputs.len()];
    let mut checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let entries: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for j in entries {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval64(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval64(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            per[i] = per[i].max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: per.iter().cloned().fold(0.0, f64::max),
        per_input: per,
        checked,
    })
}
