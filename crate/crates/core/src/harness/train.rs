//! Mini-batch Adam on the full objective with the encoder and text frozen.

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{forward, Experiment};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kahg::KahgParams;
use crate::losses::{downsample_mask, total_loss, LossWeights};
use crate::rng;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_PARAMS: u64 = 100;
const STREAM_SHUFFLE: u64 = 101;

/// First and second moments, aligned with [`KahgParams::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &KahgParams) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam step.
    pub fn update(&mut self, params: &mut KahgParams, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, x) in pd.iter_mut().enumerate() {
                let md = &mut m.data_mut()[i];
                *md = ADAM_BETA1 * *md + (1.0 - ADAM_BETA1) * gd[i];
                let mhat = *md / c1;
                let vd = &mut v.data_mut()[i];
                *vd = ADAM_BETA2 * *vd + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                *x -= lr * mhat / ((*vd / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Seeded parameter initialisation wrapped as an epoch-0 checkpoint.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let params = KahgParams::init(cfg.dims, cfg.kernel_enabled, rng::derive_seed(cfg.seed, STREAM_PARAMS, 0))?;
    let adam = AdamState::new(&params);
    Ok(Checkpoint { config: cfg.clone(), params, adam, epoch: 0, losses: Vec::new() })
}

struct Example<'a> {
    index: usize,
    label: usize,
    mask: Tensor,
    seed: u64,
    exp: &'a Experiment,
}

/// Loss and parameter gradients of one training sample.
fn sample_gradients(params: &KahgParams, ex: &Example<'_>, cfg: &RunConfig) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let f = forward(&tape, &vars, &ex.exp.train[ex.index], &ex.exp.text, cfg.effective_iterations())?;
    let weights = LossWeights::new(cfg.lambda1, cfg.lambda2)?;
    let loss = total_loss(f.logits, ex.label, &f.per_layer, &ex.mask, weights)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let out = vars
        .leaves()
        .iter()
        .map(|&leaf| grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(&leaf.shape())))
        .collect();
    Ok((value, out))
}

/// Trains from the seeded initialisation. Returns the final checkpoint and
/// the mean loss of every epoch.
pub fn train(cfg: &RunConfig) -> Result<(Checkpoint, Vec<f64>)> {
    let exp = Experiment::prepare(cfg)?;
    train_on(&exp, cfg)
}

/// [`train`] on an already prepared experiment.
pub fn train_on(exp: &Experiment, cfg: &RunConfig) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    let mut ckpt = initial_checkpoint(cfg)?;
    let grid = (cfg.dims.grid, cfg.dims.grid);
    let examples = exp
        .dataset
        .train
        .iter()
        .enumerate()
        .map(|(index, s)| {
            Ok(Example { index, label: s.label as usize, mask: downsample_mask(&s.mask, grid)?, seed: s.seed, exp })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = sample_gradients(&ckpt.params, &examples[i], cfg)?;
                if !loss.is_finite() {
                    let seeds = batch.iter().map(|&j| examples[j].seed).collect();
                    return Err(Error::NonFiniteLoss { epoch, seeds });
                }
                total += loss;
                match &mut sum {
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.accumulate(g)),
                    None => sum = Some(grads),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mean: Vec<Tensor> = sum.expect("non-empty batch").iter().map(|g| g.map(|v| v * scale)).collect();
            ckpt.adam.update(&mut ckpt.params, &mean, cfg.lr);
        }
        ckpt.losses.push(total / examples.len() as f64);
        ckpt.epoch = epoch + 1;
    }
    let losses = ckpt.losses.clone();
    Ok((ckpt, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [("n_train", "4"), ("n_test", "2"), ("shots", "1"), ("epochs", "1"), ("T", "1")] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn zero_epochs_return_the_initialisation() {
        let mut c = tiny();
        c.epochs = 0;
        let (ckpt, losses) = train(&c).unwrap();
        assert!(losses.is_empty());
        let init = initial_checkpoint(&c).unwrap();
        for ((_, a), (_, b)) in ckpt.params.named().iter().zip(init.params.named()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(ckpt.epoch, 0);
    }

    #[test]
    fn one_epoch_logs_one_finite_loss() {
        let (ckpt, losses) = train(&tiny()).unwrap();
        assert_eq!(losses.len(), 1);
        assert!(losses[0].is_finite() && losses[0] > 0.0);
        assert_eq!(ckpt.adam.step, 1);
        assert_eq!(ckpt.epoch, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) up to eps.
        let mut p = KahgParams::init(crate::kahg::Dims { layers: 1, c_enc: 2, c_prime: 2, c_cls: 2, grid: 2, image: 2 }, false, 0).unwrap();
        let before: Vec<Tensor> = p.named().iter().map(|(_, t)| (*t).clone()).collect();
        let grads: Vec<Tensor> = before.iter().map(|t| t.map(|_| -0.3)).collect();
        let mut adam = AdamState::new(&p);
        adam.update(&mut p, &grads, 0.01);
        for ((_, after), b) in p.named().iter().zip(&before) {
            for (x, y) in after.data().iter().zip(b.data()) {
                assert!((x - y - 0.01).abs() < 1e-9);
            }
        }
    }
}
