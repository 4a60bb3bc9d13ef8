//! Training objective: cross-entropy on the cls logits plus focal and
//! two-sided dice terms on every per-layer text-alignment map.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::scoring::ClassMap;
use crate::tensor::Tensor;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be >= 0, got {lambda1}, {lambda2}")));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

/// `-log softmax(logits)[label]` for two-class logits.
pub fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    if logits.shape() != [2] {
        return shape_err(format!("expected two logits, got {:?}", logits.shape()));
    }
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {label}")));
    }
    Ok(logits.log_softmax(0)?.select(0, label)?.scale(-1.0))
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("ground-truth mask must be binary".into()));
    }
    Ok(())
}

/// Focal loss of the two-channel map `[1 - M, M]` against a binary mask,
/// averaged over pixels.
pub fn focal_loss<'t>(map: ClassMap<'t>, mask: &Tensor) -> Result<Var<'t>> {
    for channel in [map.normal, map.abnormal] {
        if channel.shape() != mask.shape() {
            return shape_err(format!("map {:?} vs mask {:?}", channel.shape(), mask.shape()));
        }
    }
    check_binary(mask)?;
    let tape = map.abnormal.tape();
    let g = tape.constant(mask.clone());
    let g_inv = tape.constant(mask.map(|v| 1.0 - v));
    // p_t is the probability of the true class, q_t = 1 - p_t the other one.
    let p_t = map.abnormal.mul(g)?.add(map.normal.mul(g_inv)?)?;
    let q_t = map.normal.mul(g)?.add(map.abnormal.mul(g_inv)?)?;
    Ok(q_t.square()?.mul(p_t.ln_clamped(FOCAL_EPS))?.mean().scale(-1.0))
}

/// `1 - (2 sum(M G) + eps) / (sum M + sum G + eps)`
pub fn dice_loss<'t>(map: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    let inter = map.mul(mask)?.sum().affine(2.0, DICE_EPS);
    let total = map.sum().add(mask.sum())?.affine(1.0, DICE_EPS);
    Ok(inter.div(total)?.one_minus())
}

/// Average-pools a `[H, W]` mask to `[h, w]` and thresholds at one half.
pub fn downsample_mask(mask: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    if mask.rank() != 2 || grid.0 == 0 || grid.1 == 0 {
        return shape_err(format!("cannot pool mask {:?} to {grid:?}", mask.shape()));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h % grid.0 != 0 || w % grid.1 != 0 {
        return shape_err(format!("cannot pool mask {:?} to {grid:?}", mask.shape()));
    }
    let (fy, fx) = (h / grid.0, w / grid.1);
    let mut out = Tensor::zeros(&[grid.0, grid.1]);
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let mut s = 0.0;
            for y in gy * fy..(gy + 1) * fy {
                for x in gx * fx..(gx + 1) * fx {
                    s += mask.get(&[y, x]);
                }
            }
            out.set(&[gy, gx], if s / (fy * fx) as f64 >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// `CE + lambda1 * sum_i Focal_i + lambda2 * sum_i (Dice(M_i, G) + Dice(1 - M_i, 1 - G))`
/// with `mask` already at map resolution.
pub fn total_loss<'t>(
    s1_logits: Var<'t>,
    label: usize,
    maps: &[ClassMap<'t>],
    mask: &Tensor,
    weights: LossWeights,
) -> Result<Var<'t>> {
    let tape = s1_logits.tape();
    let g = tape.constant(mask.clone());
    let g_inv = g.one_minus();
    let mut loss = cross_entropy(s1_logits, label)?;
    for &m in maps {
        let focal = focal_loss(m, mask)?;
        let dice = dice_loss(m.abnormal, g)?.add(dice_loss(m.normal, g_inv)?)?;
        loss = loss.add(focal.scale(weights.lambda1))?.add(dice.scale(weights.lambda2))?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: Var<'_>) -> f64 {
        v.value().item()
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let eq = tape.constant(Tensor::from_vec(vec![0.3, 0.3]));
        assert!((scalar(cross_entropy(eq, 1).unwrap()) - 2f64.ln()).abs() < 1e-15);
        let conf = tape.constant(Tensor::from_vec(vec![20.0, -20.0]));
        assert!(scalar(cross_entropy(conf, 0).unwrap()) < 1e-15);
        let hand = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let expected = -(1.0 / (1.0 + 1f64.exp())).ln();
        assert!((scalar(cross_entropy(hand, 1).unwrap()) - expected).abs() < 1e-14);
        assert!((expected - 1.3133).abs() < 1e-4);
        assert!(cross_entropy(hand, 2).is_err());
    }

    #[test]
    fn focal_examples() {
        let tape = Tape::new();
        let g = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let perfect = ClassMap::from_abnormal(tape.constant(g.clone()));
        assert!(scalar(focal_loss(perfect, &g).unwrap()).abs() < 1e-12);
        let half = ClassMap::from_abnormal(tape.constant(Tensor::full(&[2, 2], 0.5)));
        assert!((scalar(focal_loss(half, &g).unwrap()) - 0.25 * 2f64.ln()).abs() < 1e-15);

        let m = Tensor::new(&[2, 2], vec![0.2, 0.7, 0.9, 0.4]).unwrap();
        let a = scalar(focal_loss(ClassMap::from_abnormal(tape.constant(m.clone())), &g).unwrap());
        let flipped = ClassMap::from_abnormal(tape.constant(m.map(|v| 1.0 - v)));
        let b = scalar(focal_loss(flipped, &g.map(|v| 1.0 - v)).unwrap());
        assert!((a - b).abs() < 1e-15);
        assert!(focal_loss(half, &Tensor::full(&[2, 2], 0.5)).is_err());
    }

    #[test]
    fn dice_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::new(&[2, 2], vec![1., 1., 0., 0.]).unwrap());
        assert!(scalar(dice_loss(g, g).unwrap()) < 1e-5);
        assert!((scalar(dice_loss(g.one_minus(), g).unwrap()) - 1.0).abs() < 1e-5);
        let half = tape.constant(Tensor::full(&[2, 2], 0.5));
        let expected = 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS);
        assert!((scalar(dice_loss(half, g).unwrap()) - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-5);
    }

    #[test]
    fn mask_downsampling() {
        let mut g = Tensor::zeros(&[4, 4]);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (2, 2)] {
            g.set(&[y, x], 1.0);
        }
        let d = downsample_mask(&g, (2, 2)).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn total_loss_cases() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![0.4, -0.1]));
        let m = ClassMap::from_abnormal(tape.constant(Tensor::full(&[2, 2], 0.3)));
        let g = Tensor::new(&[2, 2], vec![1., 0., 0., 0.]).unwrap();
        let ce = scalar(cross_entropy(logits, 1).unwrap());
        let zero = scalar(total_loss(logits, 1, &[m, m], &g, LossWeights::new(0.0, 0.0).unwrap()).unwrap());
        assert_eq!(zero, ce);

        let confident = tape.constant(Tensor::from_vec(vec![-30.0, 30.0]));
        let perfect = ClassMap::from_abnormal(tape.constant(g.clone()));
        let l = scalar(total_loss(confident, 1, &[perfect], &g, LossWeights::default()).unwrap());
        assert!(l < 1e-4, "{l}");
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn total_loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[2], 1.0, &mut rng);
        let raw = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let g = Tensor::new(&[3, 3], vec![0., 1., 1., 0., 1., 0., 0., 0., 0.]).unwrap();
        let r = grad_check(
            |_, v| {
                let m = v[1].sigmoid();
                let maps = [ClassMap::from_abnormal(m), ClassMap::from_abnormal(m.scale(0.5))];
                total_loss(v[0], 1, &maps, &g, LossWeights::new(0.7, 1.3).unwrap())
            },
            &[logits, raw],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
