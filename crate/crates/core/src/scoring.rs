//! Multi-information fusion: text-alignment map, memory-bank map, their
//! convex fusion, the adapted cls score and the top-k image score.

use crate::autodiff::kernels;
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Fixed temperature applied to cosine logits.
pub const LOGIT_SCALE: f64 = 10.0;

const UNIT_TOL: f64 = 1e-12;
const BANK_EPS: f64 = 1e-12;

/// Frozen normal/abnormal class embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    normal: Tensor,
    abnormal: Tensor,
    logit_scale: f64,
}

fn unit(v: &Tensor) -> bool {
    (v.data().iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= UNIT_TOL
}

impl TextFeatures {
    pub fn new(normal: Tensor, abnormal: Tensor, logit_scale: f64) -> Result<Self> {
        if normal.rank() != 1 || normal.shape() != abnormal.shape() {
            return shape_err(format!("text features {:?} / {:?}", normal.shape(), abnormal.shape()));
        }
        if !unit(&normal) || !unit(&abnormal) {
            return Err(Error::InvalidArgument("text features must have unit norm".into()));
        }
        if !(logit_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {logit_scale}")));
        }
        Ok(Self { normal, abnormal, logit_scale })
    }

    pub fn normal(&self) -> &Tensor {
        &self.normal
    }

    pub fn abnormal(&self) -> &Tensor {
        &self.abnormal
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn dim(&self) -> usize {
        self.normal.numel()
    }

    /// `[C', 2]` with columns `[F_n, F_a]`, pre-multiplied by the logit scale.
    fn class_matrix(&self) -> Tensor {
        let c = self.dim();
        let mut m = Tensor::zeros(&[c, 2]);
        for k in 0..c {
            m.set(&[k, 0], self.logit_scale * self.normal.data()[k]);
            m.set(&[k, 1], self.logit_scale * self.abnormal.data()[k]);
        }
        m
    }
}

/// Per-position class probabilities of one layer, `[H', W']` each. Both
/// channels come straight from the softmax, so `normal` stays accurate where
/// `abnormal` rounds to one.
#[derive(Clone, Copy, Debug)]
pub struct ClassMap<'t> {
    pub normal: Var<'t>,
    pub abnormal: Var<'t>,
}

impl<'t> ClassMap<'t> {
    /// Builds the pair from the abnormal channel alone.
    pub fn from_abnormal(abnormal: Var<'t>) -> Self {
        Self { normal: abnormal.one_minus(), abnormal }
    }
}

/// Per-layer class maps and the upsampled mean abnormal probability `[H, W]`.
pub fn text_alignment_map<'t>(
    outputs: &[Var<'t>],
    text: &TextFeatures,
    grid: (usize, usize),
    size: (usize, usize),
) -> Result<(Var<'t>, Vec<ClassMap<'t>>)> {
    let first = outputs.first().ok_or(Error::Empty("no graph outputs"))?;
    let tape = first.tape();
    let classes = tape.constant(text.class_matrix());
    let mut per_layer = Vec::with_capacity(outputs.len());
    let mut total: Option<Var<'t>> = None;
    for o in outputs {
        let s = o.shape();
        if s != [grid.0 * grid.1, text.dim()] {
            return shape_err(format!("graph output {s:?} for grid {grid:?} and width {}", text.dim()));
        }
        let probs = o.l2_normalize(1, BANK_EPS)?.matmul(classes)?.softmax(1)?;
        let channel = |k| probs.select(1, k)?.reshape(&[grid.0, grid.1]);
        let map = ClassMap { normal: channel(0)?, abnormal: channel(1)? };
        total = Some(match total {
            Some(t) => t.add(map.abnormal)?,
            None => map.abnormal,
        });
        per_layer.push(map);
    }
    let mean = total.expect("non-empty").scale(1.0 / outputs.len() as f64);
    let up = mean.reshape(&[1, grid.0, grid.1])?.bilinear_upsample(size.0, size.1)?.reshape(&[size.0, size.1])?;
    Ok((up, per_layer))
}

/// Normalised support patches, one `[N, C']` matrix per layer.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    layers: Vec<Tensor>,
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut out = t.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(BANK_EPS);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

impl MemoryBank {
    /// `support[shot][layer]` holds `[H'W', C']` features.
    pub fn build(support: &[Vec<Tensor>]) -> Result<Self> {
        let first = support.first().ok_or(Error::Empty("support set"))?;
        if first.is_empty() {
            return Err(Error::Empty("support features"));
        }
        let mut layers = Vec::with_capacity(first.len());
        for l in 0..first.len() {
            let c = first[l].shape().get(1).copied().unwrap_or(0);
            let mut data = Vec::new();
            let mut rows = 0;
            for shot in support {
                let t = shot.get(l).ok_or_else(|| Error::Shape("support shots differ in layer count".into()))?;
                if t.rank() != 2 || t.shape()[1] != c {
                    return shape_err(format!("support layer {l} has shape {:?}", t.shape()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(normalize_rows(t).data());
            }
            layers.push(Tensor::from_raw(vec![rows, c], data));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Adds one extra row to a layer; used to probe bank monotonicity.
    pub fn push(&mut self, layer: usize, vector: &Tensor) -> Result<()> {
        let bank = &mut self.layers[layer];
        let c = bank.shape()[1];
        if vector.numel() != c {
            return shape_err(format!("vector of {} values for width {c}", vector.numel()));
        }
        let row = normalize_rows(&vector.reshape(&[1, c])?);
        let mut data = std::mem::take(bank).into_data();
        data.extend_from_slice(row.data());
        *bank = Tensor::from_raw(vec![data.len() / c, c], data);
        Ok(())
    }
}

/// Per-layer patch scores `(1 - max cos) / 2` in `[0,1]`, averaged over layers.
pub fn memory_patch_scores(outputs: &[Tensor], bank: &MemoryBank) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::Empty("no graph outputs"));
    }
    if outputs.len() != bank.layers.len() {
        return shape_err(format!("{} query layers vs {} bank layers", outputs.len(), bank.layers.len()));
    }
    let n = outputs[0].shape()[0];
    let mut acc = vec![0.0; n];
    for (o, r) in outputs.iter().zip(&bank.layers) {
        if r.shape()[0] == 0 {
            return Err(Error::Empty("memory bank layer"));
        }
        if o.shape() != [n, r.shape()[1]] {
            return shape_err(format!("query {:?} vs bank {:?}", o.shape(), r.shape()));
        }
        let c = r.shape()[1];
        let q = normalize_rows(o);
        let sims = kernels::matmul_nt(q.data(), r.data(), n, c, r.shape()[0]);
        let m = r.shape()[0];
        for (p, a) in acc.iter_mut().enumerate() {
            let best = sims[p * m..(p + 1) * m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *a += ((1.0 - best) / 2.0).clamp(0.0, 1.0);
        }
    }
    let l = outputs.len() as f64;
    Ok(Tensor::from_vec(acc.into_iter().map(|v| v / l).collect()))
}

/// Bilinear resize of a `[h, w]` map to `[H, W]`.
pub fn resize(map: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    if map.rank() != 2 {
        return shape_err(format!("resize expects a rank-2 map, got {:?}", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let ys = kernels::lerp_table(h, size.0);
    let xs = kernels::lerp_table(w, size.1);
    Ok(Tensor::from_raw(vec![size.0, size.1], kernels::bilinear(map.data(), 1, h, w, &ys, &xs)))
}

/// Memory-bank anomaly map at image resolution.
pub fn memory_map(outputs: &[Tensor], bank: &MemoryBank, grid: (usize, usize), size: (usize, usize)) -> Result<Tensor> {
    let scores = memory_patch_scores(outputs, bank)?;
    resize(&scores.reshape(&[grid.0, grid.1])?, size)
}

/// `gamma * M_p + (1 - gamma) * M_v`
pub fn fuse_maps(text_map: &Tensor, memory_map: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    text_map.zip_map(memory_map, |p, v| gamma * p + (1.0 - gamma) * v)
}

/// Adapted cls token aligned to the text classes: returns the two logits
/// `[2]` and the abnormal probability.
pub fn global_score_s1<'t>(
    cls: Var<'t>,
    adapter_weight: Var<'t>,
    adapter_bias: Var<'t>,
    text: &TextFeatures,
) -> Result<(Var<'t>, f64)> {
    let tape = cls.tape();
    let n = cls.shape().iter().product::<usize>();
    let adapted = cls.reshape(&[1, n])?.matmul(adapter_weight)?.add(adapter_bias)?;
    let logits = adapted
        .l2_normalize(1, BANK_EPS)?
        .matmul(tape.constant(text.class_matrix()))?
        .reshape(&[2])?;
    let s1 = logits.softmax(0)?.value().data()[1];
    Ok((logits, s1))
}

/// Mean of the `k` largest map values (k clamped to the pixel count).
pub fn top_k_mean(map: &Tensor, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    if map.numel() == 0 {
        return Err(Error::Empty("anomaly map"));
    }
    let mut v = map.data().to_vec();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len());
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// `(s_2, s)` with `s = gamma * s_1 + (1 - gamma) * s_2`.
pub fn image_score(s1: f64, map: &Tensor, gamma: f64, k: usize) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let s2 = top_k_mean(map, k)?;
    Ok((s2, gamma * s1 + (1.0 - gamma) * s2))
}

/// Everything scored for one query image.
#[derive(Clone, Debug)]
pub struct AnomalyResult {
    pub text_map: Tensor,
    pub memory_map: Tensor,
    pub fused_map: Tensor,
    pub per_layer: Vec<Tensor>,
    pub s1_logits: [f64; 2],
    pub s1: f64,
    pub s2: f64,
    pub score: f64,
}
