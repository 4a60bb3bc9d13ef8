//! Finite-difference check of the whole differentiable pipeline: graph head,
//! text-alignment maps, cls adapter and training loss.

use rand::Rng;

use crate::autodiff::{grad_check_sampled, GradCheckReport};
use crate::error::Result;
use crate::kahg::{randomize, run_kahg, Dims, KahgParams};
use crate::losses::{total_loss, LossWeights};
use crate::rng;
use crate::scoring::{global_score_s1, text_alignment_map};
use crate::synth::text_stub;
use crate::tensor::Tensor;

pub const PIPELINE_DIMS: Dims = Dims { layers: 4, c_enc: 8, c_prime: 8, c_cls: 8, grid: 4, image: 8 };
pub const PIPELINE_EPS: f64 = 1e-5;
pub const PIPELINE_TOL: f64 = 1e-4;

/// Checks `per_input` sampled coordinates of every parameter and input
/// feature, with all parameters (including the loop-edge scales) randomised.
pub fn pipeline_grad_check(seed: u64, iterations: usize, per_input: usize) -> Result<GradCheckReport> {
    let d = PIPELINE_DIMS;
    let mut r = rng::stream(seed, 0x4752_4144, 0);
    let mut params = KahgParams::init(d, true, seed)?;
    randomize(&mut params, 0.4, &mut r);
    let text = text_stub(seed, d.c_prime)?;
    let mut mask = Tensor::zeros(&[d.grid, d.grid]);
    for v in mask.data_mut() {
        *v = if r.random_bool(0.3) { 1.0 } else { 0.0 };
    }
    let label = usize::from(mask.sum() > 0.0);

    let mut inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    for _ in 0..d.layers {
        inputs.push(Tensor::randn(&[d.c_enc, d.grid, d.grid], 1.0, &mut r));
    }
    inputs.push(Tensor::randn(&[d.c_cls], 1.0, &mut r));

    grad_check_sampled(
        |_, v| {
            let vars = params.wrap(&v[..n_params])?;
            let features = &v[n_params..n_params + d.layers];
            let outputs = run_kahg(features, &vars, iterations)?;
            let (_, per_layer) = text_alignment_map(&outputs, &text, (d.grid, d.grid), (d.image, d.image))?;
            let w = &vars.weights;
            let (logits, _) = global_score_s1(v[n_params + d.layers], w.adapter_weight, w.adapter_bias, &text)?;
            total_loss(logits, label, &per_layer, &mask, LossWeights::default())
        },
        &inputs,
        PIPELINE_EPS,
        PIPELINE_TOL,
        per_input,
        seed,
    )
}
