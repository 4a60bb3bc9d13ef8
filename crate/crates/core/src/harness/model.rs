//! Data preparation and the full scoring pipeline on top of the graph head.

use super::config::RunConfig;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kahg::{run_kahg, KahgParams, KahgVars};
use crate::scoring::{self, AnomalyResult, ClassMap, MemoryBank, TextFeatures};
use crate::synth::{self, Dataset, ToyEncoder};
use crate::tensor::Tensor;

/// Frozen encoder output for one image.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Per layer `[C_enc, g, g]`.
    pub layers: Vec<Tensor>,
    /// `[C_cls]`
    pub cls: Tensor,
}

/// Dataset, frozen encoder and text stubs, with every image encoded once.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dataset: Dataset,
    pub encoder: ToyEncoder,
    pub text: TextFeatures,
    pub train: Vec<Encoded>,
    pub support: Vec<Encoded>,
    pub test: Vec<Encoded>,
}

fn encode_all(encoder: &ToyEncoder, samples: &[synth::SyntheticSample]) -> Result<Vec<Encoded>> {
    samples
        .iter()
        .map(|s| encoder.encode(&s.image).map(|(layers, cls)| Encoded { layers, cls }))
        .collect()
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let dataset = synth::make_splits(cfg.n_train, cfg.n_test, cfg.max_shots(), cfg.seed, cfg.dims.image)?;
        let encoder = synth::encoder_for(cfg.dims, cfg.seed)?;
        let text = synth::text_features(cfg.seed, cfg.dims.c_prime)?;
        let train = encode_all(&encoder, &dataset.train)?;
        let support = encode_all(&encoder, &dataset.support)?;
        let test = encode_all(&encoder, &dataset.test)?;
        Ok(Self { dataset, encoder, text, train, support, test })
    }
}

/// Differentiable outputs of one forward pass.
pub struct Forward<'t> {
    /// `O_i` as `[H'W', C']`.
    pub outputs: Vec<Var<'t>>,
    /// Mean abnormal probability upsampled to `[H, W]`.
    pub text_map: Var<'t>,
    /// Per-layer class probabilities `[H', W']`.
    pub per_layer: Vec<ClassMap<'t>>,
    pub logits: Var<'t>,
    pub s1: f64,
}

pub fn forward<'t>(
    tape: &'t Tape,
    vars: &KahgVars<'t>,
    sample: &Encoded,
    text: &TextFeatures,
    iterations: usize,
) -> Result<Forward<'t>> {
    let d = vars.dims;
    let features: Vec<Var<'t>> = sample.layers.iter().map(|t| tape.constant(t.clone())).collect();
    let outputs = run_kahg(&features, vars, iterations)?;
    let (text_map, per_layer) =
        scoring::text_alignment_map(&outputs, text, (d.grid, d.grid), (d.image, d.image))?;
    let w = &vars.weights;
    let (logits, s1) = scoring::global_score_s1(tape.constant(sample.cls.clone()), w.adapter_weight, w.adapter_bias, text)?;
    Ok(Forward { outputs, text_map, per_layer, logits, s1 })
}

/// Inference-only view of one query: everything except the memory map.
#[derive(Clone, Debug)]
pub struct QueryOutputs {
    pub outputs: Vec<Tensor>,
    pub text_map: Tensor,
    pub per_layer: Vec<Tensor>,
    pub s1_logits: [f64; 2],
    pub s1: f64,
}

pub fn infer(params: &KahgParams, sample: &Encoded, text: &TextFeatures, iterations: usize) -> Result<QueryOutputs> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let f = forward(&tape, &vars, sample, text, iterations)?;
    let logits = f.logits.value();
    Ok(QueryOutputs {
        outputs: f.outputs.iter().map(|o| o.value().as_ref().clone()).collect(),
        text_map: f.text_map.value().as_ref().clone(),
        per_layer: f.per_layer.iter().map(|p| p.abnormal.value().as_ref().clone()).collect(),
        s1_logits: [logits.data()[0], logits.data()[1]],
        s1: f.s1,
    })
}

/// Memory-bank map, fusion and image score for an inferred query.
pub fn score_query(q: &QueryOutputs, bank: &MemoryBank, cfg: &RunConfig) -> Result<AnomalyResult> {
    let d = cfg.dims;
    let memory_map = scoring::memory_map(&q.outputs, bank, (d.grid, d.grid), (d.image, d.image))?;
    let fused_map = scoring::fuse_maps(&q.text_map, &memory_map, cfg.gamma)?;
    let (s2, score) = scoring::image_score(q.s1, &fused_map, cfg.gamma, cfg.top_k)?;
    Ok(AnomalyResult {
        text_map: q.text_map.clone(),
        memory_map,
        fused_map,
        per_layer: q.per_layer.clone(),
        s1_logits: q.s1_logits,
        s1: q.s1,
        s2,
        score,
    })
}

/// Memory bank from the first `shots` support images.
pub fn support_bank(params: &KahgParams, exp: &Experiment, shots: usize, iterations: usize) -> Result<MemoryBank> {
    let support = exp
        .support
        .iter()
        .take(shots)
        .map(|s| infer(params, s, &exp.text, iterations).map(|q| q.outputs))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::build(&support)
}
