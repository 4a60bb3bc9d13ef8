use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    Ok(out.item())
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2eps` at one coordinate.
pub fn central_difference<F>(f: &F, inputs: &[Tensor], input: usize, index: usize, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut probe = inputs.to_vec();
    let x0 = inputs[input].data()[index];
    probe[input].data_mut()[index] = x0 + eps;
    let plus = evaluate(f, &probe)?;
    probe[input].data_mut()[index] = x0 - eps;
    let minus = evaluate(f, &probe)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    run(&f, inputs, eps, tol, coords)
}

/// Checks at most `per_input` seeded random coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= per_input {
                (0..n).collect()
            } else {
                let mut picked = sample(&mut rng, n, per_input).into_vec();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    run(&f, inputs, eps, tol, coords)
}

fn run<F>(f: &F, inputs: &[Tensor], eps: f64, tol: f64, coords: Vec<Vec<usize>>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && tol > 0.0) {
        return Err(Error::InvalidArgument("eps and tol must be positive".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol, passed: true };
    for (input, indices) in coords.iter().enumerate() {
        let analytic = grads.get(vars[input]);
        for &index in indices {
            let ad = analytic.map_or(0.0, |g| g.data()[index]);
            let fd = central_difference(f, inputs, input, index, eps)?;
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((input, index, ad, fd));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
