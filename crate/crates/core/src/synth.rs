//! Deterministic toy data: textured normal images, pasted-patch anomalies, a
//! frozen multi-layer feature encoder and frozen text embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::kahg::Dims;
use crate::rng;
use crate::scoring::{TextFeatures, LOGIT_SCALE};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 4;
pub const MAX_SIDE: usize = 20;
pub const MIN_ALPHA: f64 = 0.5;

const STREAM_STYLE: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TRAIN_PASTE: u64 = 2;
const STREAM_SUPPORT: u64 = 3;
const STREAM_TEST_NORMAL: u64 = 4;
const STREAM_TEST_ANOMALY: u64 = 5;
const STREAM_DONOR: u64 = 6;
const STREAM_ENCODER: u64 = 7;
const STREAM_TEXT: u64 = 8;

/// One plane wave of the class texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    fx: f64,
    fy: f64,
    amplitude: f64,
    phase: f64,
}

/// Texture shared by every normal image of the toy class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    waves: Vec<Wave>,
    phase_jitter: f64,
    noise: f64,
}

impl StyleParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::stream(seed, STREAM_STYLE, 0);
        let mut waves = Vec::new();
        // Low-frequency shading: a few cycles across the image.
        for _ in 0..3 {
            let (fx, fy) = loop {
                let fx: i32 = r.random_range(-2..=2);
                let fy: i32 = r.random_range(-2..=2);
                if fx != 0 || fy != 0 {
                    break (fx as f64, fy as f64);
                }
            };
            waves.push(Wave {
                fx,
                fy,
                amplitude: r.random_range(0.07..0.12),
                phase: r.random_range(0.0..std::f64::consts::TAU),
            });
        }
        // Fine oriented stripes with a period of roughly eight pixels.
        let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
        waves.push(Wave {
            fx: 8.0 * angle.cos(),
            fy: 8.0 * angle.sin(),
            amplitude: 0.06,
            phase: r.random_range(0.0..std::f64::consts::TAU),
        });
        Self { waves, phase_jitter: 0.12, noise: 0.015 }
    }

    /// Texture of foreign material: random shading plus stripes finer and
    /// stronger than any class texture.
    pub fn foreign(seed: u64) -> Self {
        let mut style = Self::from_seed(seed);
        let mut r = rng::stream(seed, STREAM_STYLE, 1);
        let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
        let cycles: f64 = r.random_range(12.0..24.0);
        let stripes = style.waves.last_mut().expect("class texture has stripes");
        stripes.fx = cycles * angle.cos();
        stripes.fy = cycles * angle.sin();
        stripes.amplitude = r.random_range(0.1..0.18);
        style
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[1, S, S]` in `[0, 1]`.
    pub image: Tensor,
    /// `[S, S]` binary.
    pub mask: Tensor,
    pub label: u8,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn size(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        self.image.data()[y * self.size() + x]
    }
}

/// Smooth texture plus light noise; empty mask, label 0.
pub fn gen_normal(seed: u64, style: &StyleParams, size: usize) -> SyntheticSample {
    let mut r = rng::stream(seed, 0, 0);
    let jitter: Vec<f64> = style.waves.iter().map(|_| r.random_range(-1.0..1.0) * style.phase_jitter).collect();
    let noise = rand_distr::Normal::new(0.0, style.noise).expect("valid noise level");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let mut value = 0.5;
            for (w, j) in style.waves.iter().zip(&jitter) {
                value += w.amplitude * (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase + j).sin();
            }
            value += rand_distr::Distribution::sample(&noise, &mut r);
            data.push(value.clamp(0.0, 1.0));
        }
    }
    SyntheticSample {
        image: Tensor::from_raw(vec![1, size, size], data),
        mask: Tensor::zeros(&[size, size]),
        label: 0,
        seed,
    }
}

/// Rectangle copied from a donor image into a target image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Paste {
    pub height: usize,
    pub width: usize,
    pub src: (usize, usize),
    pub dst: (usize, usize),
    pub alpha: f64,
}

impl Paste {
    pub fn sample(seed: u64, size: usize) -> Self {
        let mut r = rng::stream(seed, 0, 1);
        let height = r.random_range(MIN_SIDE..=MAX_SIDE.min(size));
        let width = r.random_range(MIN_SIDE..=MAX_SIDE.min(size));
        let src = (r.random_range(0..=size - height), r.random_range(0..=size - width));
        let dst = (r.random_range(0..=size - height), r.random_range(0..=size - width));
        let alpha = r.random_range(MIN_ALPHA..=1.0);
        Self { height, width, src, dst, alpha }
    }
}

/// Blends `paste` from `donor` into `normal`; the pasted rectangle becomes the mask.
pub fn apply_paste(normal: &SyntheticSample, donor: &SyntheticSample, paste: Paste, seed: u64) -> Result<SyntheticSample> {
    if normal.label != 0 || donor.label != 0 {
        return Err(Error::InvalidArgument("anomaly synthesis needs two normal images".into()));
    }
    let size = normal.size();
    if donor.size() != size {
        return shape_err(format!("donor size {} vs image size {size}", donor.size()));
    }
    if paste.src.0 + paste.height > size
        || paste.src.1 + paste.width > size
        || paste.dst.0 + paste.height > size
        || paste.dst.1 + paste.width > size
    {
        return Err(Error::InvalidArgument(format!("paste {paste:?} exceeds {size}x{size}")));
    }
    let mut image = normal.image.clone();
    let mut mask = Tensor::zeros(&[size, size]);
    for dy in 0..paste.height {
        for dx in 0..paste.width {
            let (ty, tx) = (paste.dst.0 + dy, paste.dst.1 + dx);
            let src = donor.pixel(paste.src.0 + dy, paste.src.1 + dx);
            let dst = &mut image.data_mut()[ty * size + tx];
            *dst = if paste.alpha == 1.0 { src } else { (1.0 - paste.alpha) * *dst + paste.alpha * src };
            mask.set(&[ty, tx], 1.0);
        }
    }
    Ok(SyntheticSample { image, mask, label: 1, seed })
}

/// Pasted-patch anomaly with seeded geometry and blend factor.
pub fn synth_anomaly(normal: &SyntheticSample, donor: &SyntheticSample, seed: u64) -> Result<SyntheticSample> {
    apply_paste(normal, donor, Paste::sample(seed, normal.size()), seed)
}

/// `c` unit-norm 5×5 Gabor filters with orientations spread over half a turn,
/// seeded periods of 2.5 to 10 px and seeded phases.
fn gabor_bank(c: usize, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let mut bank = Tensor::zeros(&[c, 1, 5, 5]);
    for ch in 0..c {
        let theta = std::f64::consts::PI * (ch as f64 + r.random_range(0.0..1.0)) / c as f64;
        let period: f64 = r.random_range(2.5..10.0);
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let mut taps = [0.0; 25];
        for (i, tap) in taps.iter_mut().enumerate() {
            let (y, x) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
            let along = x * theta.cos() + y * theta.sin();
            let envelope = (-(x * x + y * y) / 4.5).exp();
            *tap = envelope * (std::f64::consts::TAU * along / period + phase).cos();
        }
        let mean = taps.iter().sum::<f64>() / 25.0;
        let norm = taps.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>().sqrt().max(1e-12);
        for (i, t) in taps.iter().enumerate() {
            bank.data_mut()[ch * 25 + i] = (t - mean) / norm;
        }
    }
    bank
}

/// Images rendered from the encoder's own texture distribution to fix its
/// normalisation statistics, like the running statistics of a pretrained
/// backbone.
const CALIBRATION_IMAGES: usize = 24;
const NORM_EPS: f64 = 1e-6;

/// Per-channel affine standardisation with frozen statistics.
#[derive(Clone, Debug, PartialEq)]
struct FrozenNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl FrozenNorm {
    fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], inv_std: vec![1.0; n] }
    }

    /// Statistics of `rows`, each a flat `[n, plane]` block.
    fn fit(rows: &[Vec<f64>], n: usize) -> Self {
        let plane = rows[0].len() / n;
        let count = (rows.len() * plane) as f64;
        let mut mean = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for row in rows {
            for (ch, chunk) in row.chunks(plane).enumerate() {
                mean[ch] += chunk.iter().sum::<f64>();
                sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let inv_std = sq.iter().zip(&mean).map(|(q, m)| 1.0 / (q / count - m * m).max(0.0).sqrt().max(NORM_EPS)).collect();
        Self { mean, inv_std }
    }

    fn apply(&self, data: &mut [f64]) {
        let plane = data.len() / self.mean.len();
        for (ch, chunk) in data.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[ch]) * self.inv_std[ch];
            }
        }
    }
}

/// Frozen random feature extractor: a Gabor filter bank pooled onto the patch
/// grid and standardised with a fixed positional code, then residual 3×3
/// stages. Every stage output is one feature layer; the cls vector projects
/// standardised channel means and maxima of all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    dims: Dims,
    stem: Tensor,
    stem_norm: FrozenNorm,
    position: Tensor,
    stages: Vec<Tensor>,
    cls_norm: FrozenNorm,
    cls_projection: Tensor,
}

impl ToyEncoder {
    pub fn new(dims: Dims, seed: u64) -> Result<Self> {
        if dims.grid == 0 || !dims.image.is_multiple_of(dims.grid) || dims.layers == 0 {
            return Err(Error::InvalidArgument(format!("image {} not divisible into grid {}", dims.image, dims.grid)));
        }
        let mut r = rng::stream(seed, STREAM_ENCODER, 0);
        let c = dims.c_enc;
        let stem = gabor_bank(c, &mut r);
        let g = dims.grid;
        let mut position = Tensor::zeros(&[c, g, g]);
        for ch in 0..c {
            let fy: f64 = r.random_range(-1.5..1.5);
            let fx: f64 = r.random_range(-1.5..1.5);
            let ph: f64 = r.random_range(0.0..std::f64::consts::TAU);
            for y in 0..g {
                for x in 0..g {
                    let a = std::f64::consts::PI * (fy * y as f64 + fx * x as f64) / g as f64 + ph;
                    position.set(&[ch, y, x], 0.2 * a.sin());
                }
            }
        }
        let stages = (1..dims.layers)
            .map(|_| Tensor::randn(&[c, c, 3, 3], 0.6 / ((9 * c) as f64).sqrt(), &mut r))
            .collect();
        let width = 2 * c * dims.layers;
        let cls_projection = Tensor::randn(&[dims.c_cls, width], 1.0 / (width as f64).sqrt(), &mut r);
        let mut encoder = Self {
            dims,
            stem,
            stem_norm: FrozenNorm::identity(c),
            position,
            stages,
            cls_norm: FrozenNorm::identity(width),
            cls_projection,
        };

        let calibration: Vec<Tensor> = (0..CALIBRATION_IMAGES as u64)
            .map(|i| {
                let image_seed = rng::derive_seed(seed, STREAM_ENCODER, i + 1);
                gen_normal(image_seed, &StyleParams::from_seed(image_seed), dims.image).image
            })
            .collect();
        let pooled = calibration.iter().map(|im| encoder.pooled_stem(im)).collect::<Result<Vec<_>>>()?;
        encoder.stem_norm = FrozenNorm::fit(&pooled, c);
        let stats = calibration
            .iter()
            .map(|im| Ok(encoder.cls_statistics(&encoder.layers(im)?)))
            .collect::<Result<Vec<_>>>()?;
        encoder.cls_norm = FrozenNorm::fit(&stats, width);
        Ok(encoder)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Filter responses average-pooled to the grid, flat `[C_enc, g, g]`.
    fn pooled_stem(&self, image: &Tensor) -> Result<Vec<f64>> {
        let s = self.dims.image;
        if image.shape() != [1, s, s] {
            return shape_err(format!("encoder expects [1, {s}, {s}], got {:?}", image.shape()));
        }
        let tape = Tape::new();
        let centered = tape.constant(image.map(|v| v - 0.5));
        let filtered = centered.conv2d(tape.constant(self.stem.clone()), false)?.value();
        let (c, g) = (self.dims.c_enc, self.dims.grid);
        let f = s / g;
        let plane = s * s;
        let data = filtered.data();
        let mut pooled = vec![0.0; c * g * g];
        for ch in 0..c {
            // Even channels keep signed responses, odd channels keep magnitudes.
            let rectify = |v: f64| if ch % 2 == 1 { v.abs() } else { v };
            for gy in 0..g {
                for gx in 0..g {
                    let mut acc = 0.0;
                    for y in gy * f..(gy + 1) * f {
                        let row = ch * plane + y * s + gx * f;
                        acc += data[row..row + f].iter().map(|&v| rectify(v)).sum::<f64>();
                    }
                    pooled[(ch * g + gy) * g + gx] = acc / (f * f) as f64;
                }
            }
        }
        Ok(pooled)
    }

    fn layers(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let (c, g) = (self.dims.c_enc, self.dims.grid);
        let mut pooled = self.pooled_stem(image)?;
        self.stem_norm.apply(&mut pooled);
        let first = Tensor::from_raw(vec![c, g, g], pooled).zip_map(&self.position, |a, b| (a + b).tanh())?;
        let mut layers = vec![first];
        let tape = Tape::new();
        for w in &self.stages {
            let prev = tape.constant(layers.last().expect("first layer").clone());
            let next = prev.conv2d(tape.constant(w.clone()), false)?.add(prev)?.tanh();
            layers.push(next.value().as_ref().clone());
        }
        Ok(layers)
    }

    /// Channel means then channel maxima of each layer, flat.
    fn cls_statistics(&self, layers: &[Tensor]) -> Vec<f64> {
        let cells = self.dims.grid * self.dims.grid;
        let mut stats = Vec::with_capacity(2 * self.dims.c_enc * layers.len());
        for layer in layers {
            stats.extend(layer.data().chunks(cells).map(|p| p.iter().sum::<f64>() / cells as f64));
            stats.extend(layer.data().chunks(cells).map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
        }
        stats
    }

    /// Returns the per-layer `[C_enc, g, g]` features and the `[C_cls]` cls vector.
    pub fn encode(&self, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let layers = self.layers(image)?;
        let mut stats = self.cls_statistics(&layers);
        self.cls_norm.apply(&mut stats);
        let width = stats.len();
        let cls = crate::autodiff::kernels::matmul(self.cls_projection.data(), &stats, self.dims.c_cls, width, 1);
        Ok((layers, Tensor::from_raw(vec![self.dims.c_cls], cls.into_iter().map(f64::tanh).collect())))
    }
}

pub fn toy_encode(image: &Tensor, encoder: &ToyEncoder) -> Result<(Vec<Tensor>, Tensor)> {
    encoder.encode(image)
}

/// Two seeded unit vectors with `|cos| <= 0.5`.
pub fn text_stub(seed: u64, dim: usize) -> Result<TextFeatures> {
    if dim < 2 {
        return Err(Error::InvalidArgument("text width must be >= 2".into()));
    }
    let mut r = rng::stream(seed, STREAM_TEXT, 0);
    let unit = |r: &mut rand_chacha::ChaCha8Rng| {
        let v = Tensor::randn(&[dim], 1.0, r);
        let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v.map(|x| x / n)
    };
    loop {
        let normal = unit(&mut r);
        let abnormal = unit(&mut r);
        let cos: f64 = normal.data().iter().zip(abnormal.data()).map(|(a, b)| a * b).sum();
        if cos.abs() <= 0.5 {
            return TextFeatures::new(normal, abnormal, LOGIT_SCALE);
        }
    }
}

/// Prompt templates the stubbed text features stand for; metadata only.
pub const PROMPT_TEMPLATES: [&str; 2] = ["a photo of a [s]", "a photo of a damaged [s]"];

pub fn text_features(master_seed: u64, dim: usize) -> Result<TextFeatures> {
    text_stub(rng::derive_seed(master_seed, STREAM_TEXT, 0), dim)
}

pub fn encoder_for(dims: Dims, master_seed: u64) -> Result<ToyEncoder> {
    ToyEncoder::new(dims, rng::derive_seed(master_seed, STREAM_ENCODER, 0))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub style: StyleParams,
    /// Normals followed by their paired anomalies.
    pub train: Vec<SyntheticSample>,
    pub support: Vec<SyntheticSample>,
    /// Normals followed by anomalies.
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[SyntheticSample]); 3] {
        [("train", &self.train), ("support", &self.support), ("test", &self.test)]
    }
}

/// The donor is rendered with its own randomly drawn texture, so each pasted
/// region is foreign material rather than a shifted copy of the class texture.
fn anomaly_from(master: u64, stream: u64, index: usize, base: &SyntheticSample, size: usize) -> Result<SyntheticSample> {
    let donor_seed = rng::derive_seed(master, STREAM_DONOR, (stream << 32) | index as u64);
    let donor = gen_normal(donor_seed, &StyleParams::foreign(donor_seed), size);
    synth_anomaly(base, &donor, rng::derive_seed(master, stream, index as u64))
}

/// Training normals each paired with one synthetic anomaly, a `shots`-image
/// normal support set and a fresh test split of `n_test` normals and
/// `n_test` anomalies.
pub fn make_splits(n_train: usize, n_test: usize, shots: usize, seed: u64, size: usize) -> Result<Dataset> {
    if shots > n_train {
        return Err(Error::InvalidArgument(format!("{shots} shots exceed {n_train} training normals")));
    }
    let style = StyleParams::from_seed(seed);
    let normal = |stream: u64, i: usize| gen_normal(rng::derive_seed(seed, stream, i as u64), &style, size);

    let train_normals: Vec<_> = (0..n_train).map(|i| normal(STREAM_TRAIN, i)).collect();
    let mut train = train_normals.clone();
    for (i, base) in train_normals.iter().enumerate() {
        train.push(anomaly_from(seed, STREAM_TRAIN_PASTE, i, base, size)?);
    }
    let support = (0..shots).map(|i| normal(STREAM_SUPPORT, i)).collect();
    let mut test: Vec<_> = (0..n_test).map(|i| normal(STREAM_TEST_NORMAL, i)).collect();
    for i in 0..n_test {
        let base = normal(STREAM_TEST_ANOMALY, i);
        test.push(anomaly_from(seed, STREAM_TEST_ANOMALY + 16, i, &base, size)?);
    }
    Ok(Dataset { style, train, support, test })
}
