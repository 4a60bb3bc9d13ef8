//! Kernel-aware hierarchical graph.
//!
//! Each encoder layer contributes one node: its patch features projected to
//! the text width, filtered by a bank of multi-shape depthwise kernels and
//! normalised per position. Nodes exchange messages along self-attention loop
//! edges and bilinear cross-layer line edges; every message passes through a
//! learned per-channel gate before the gated sum is folded into the node state
//! by a ConvGRU. After `T` rounds the final state is added back to the initial
//! embedding.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Epsilon of the per-position channel normalisation of node embeddings.
pub const NORM_EPS: f64 = 1e-8;

/// Multi-shape kernel bank; the first entry is the 1×1 kernel that remains
/// when the bank is disabled.
pub const KERNEL_SHAPES: [(usize, usize); 5] = [(1, 1), (3, 3), (5, 5), (1, 5), (5, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Number of encoder layers (graph nodes).
    pub layers: usize,
    pub c_enc: usize,
    /// Width shared by graph nodes and text features.
    pub c_prime: usize,
    pub c_cls: usize,
    /// Side of the square feature grid.
    pub grid: usize,
    /// Side of the square input image.
    pub image: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { layers: 4, c_enc: 16, c_prime: 8, c_cls: 32, grid: 8, image: 64 }
    }
}

/// Parameter groups of the graph head, generic over storage so the same
/// layout serves plain tensors and tape variables.
#[derive(Clone, Debug)]
pub struct Weights<T> {
    /// Per layer `[C', C_enc, 1, 1]`.
    pub linear: Vec<T>,
    /// Per layer `[C']`.
    pub linear_bias: Vec<T>,
    /// Depthwise `[C', 1, kh, kw]`, one per kernel shape.
    pub kernels: Vec<T>,
    /// Per layer `[C'/2, C', 1, 1]`.
    pub intra_query: Vec<T>,
    pub intra_key: Vec<T>,
    /// Per layer `[C', C', 1, 1]`.
    pub intra_value: Vec<T>,
    /// Per layer scalar.
    pub alpha: Vec<T>,
    /// Per unordered layer pair `[C', C']`.
    pub inter: Vec<T>,
    pub gate_weight: T,
    pub gate_bias: T,
    /// `[C', 2C', 3, 3]` each.
    pub gru_update: T,
    pub gru_update_bias: T,
    pub gru_reset: T,
    pub gru_reset_bias: T,
    pub gru_candidate: T,
    pub gru_candidate_bias: T,
    /// `[C_cls, C']`
    pub adapter_weight: T,
    /// `[1, C']`
    pub adapter_bias: T,
}

impl<T> Weights<T> {
    /// Visits every entry in canonical order with its record name.
    pub fn visit<'a>(&'a self, pairs: &[(usize, usize)], kernel_shapes: &[(usize, usize)], mut f: impl FnMut(String, &'a T)) {
        let per_layer = |f: &mut dyn FnMut(String, &'a T), name: &str, v: &'a [T]| {
            for (i, t) in v.iter().enumerate() {
                f(format!("{name}.{i}"), t);
            }
        };
        per_layer(&mut f, "linear", &self.linear);
        per_layer(&mut f, "linear_bias", &self.linear_bias);
        for ((kh, kw), t) in kernel_shapes.iter().zip(&self.kernels) {
            f(format!("kernel.{kh}x{kw}"), t);
        }
        per_layer(&mut f, "intra_query", &self.intra_query);
        per_layer(&mut f, "intra_key", &self.intra_key);
        per_layer(&mut f, "intra_value", &self.intra_value);
        per_layer(&mut f, "alpha", &self.alpha);
        for ((i, j), t) in pairs.iter().zip(&self.inter) {
            f(format!("inter.{i}_{j}"), t);
        }
        f("gate_weight".into(), &self.gate_weight);
        f("gate_bias".into(), &self.gate_bias);
        f("gru_update".into(), &self.gru_update);
        f("gru_update_bias".into(), &self.gru_update_bias);
        f("gru_reset".into(), &self.gru_reset);
        f("gru_reset_bias".into(), &self.gru_reset_bias);
        f("gru_candidate".into(), &self.gru_candidate);
        f("gru_candidate_bias".into(), &self.gru_candidate_bias);
        f("adapter_weight".into(), &self.adapter_weight);
        f("adapter_bias".into(), &self.adapter_bias);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let mut v = |xs: &[T]| xs.iter().map(&mut f).collect::<Vec<U>>();
        let linear = v(&self.linear);
        let linear_bias = v(&self.linear_bias);
        let kernels = v(&self.kernels);
        let intra_query = v(&self.intra_query);
        let intra_key = v(&self.intra_key);
        let intra_value = v(&self.intra_value);
        let alpha = v(&self.alpha);
        let inter = v(&self.inter);
        Weights {
            linear,
            linear_bias,
            kernels,
            intra_query,
            intra_key,
            intra_value,
            alpha,
            inter,
            gate_weight: f(&self.gate_weight),
            gate_bias: f(&self.gate_bias),
            gru_update: f(&self.gru_update),
            gru_update_bias: f(&self.gru_update_bias),
            gru_reset: f(&self.gru_reset),
            gru_reset_bias: f(&self.gru_reset_bias),
            gru_candidate: f(&self.gru_candidate),
            gru_candidate_bias: f(&self.gru_candidate_bias),
            adapter_weight: f(&self.adapter_weight),
            adapter_bias: f(&self.adapter_bias),
        }
    }

    /// Mutable references in the same order as [`Weights::visit`].
    pub fn entries_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        out.extend(self.linear.iter_mut());
        out.extend(self.linear_bias.iter_mut());
        out.extend(self.kernels.iter_mut());
        out.extend(self.intra_query.iter_mut());
        out.extend(self.intra_key.iter_mut());
        out.extend(self.intra_value.iter_mut());
        out.extend(self.alpha.iter_mut());
        out.extend(self.inter.iter_mut());
        out.extend([
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.gru_update,
            &mut self.gru_update_bias,
            &mut self.gru_reset,
            &mut self.gru_reset_bias,
            &mut self.gru_candidate,
            &mut self.gru_candidate_bias,
            &mut self.adapter_weight,
            &mut self.adapter_bias,
        ]);
        out
    }
}

/// Trainable parameters of the graph head and the cls adapter.
#[derive(Clone, Debug)]
pub struct KahgParams {
    pub dims: Dims,
    pub kernel_shapes: Vec<(usize, usize)>,
    /// Layer pair owning each `inter` matrix, `i < j`. Storage order is free.
    pub pairs: Vec<(usize, usize)>,
    pub weights: Weights<Tensor>,
}

fn canonical_pairs(layers: usize) -> Vec<(usize, usize)> {
    (0..layers).flat_map(|i| (i + 1..layers).map(move |j| (i, j))).collect()
}

impl KahgParams {
    /// Seeded initialisation: delta kernels plus small noise, zero loop-edge
    /// scale, a zero ConvGRU candidate (so every round starts by shrinking
    /// the node toward zero rather than adding noise), fan-in scaled Gaussians
    /// elsewhere.
    pub fn init(dims: Dims, kernel_enabled: bool, seed: u64) -> Result<Self> {
        if dims.layers == 0 || dims.c_prime < 2 || !dims.c_prime.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "need >= 1 layer and an even node width >= 2, got {dims:?}"
            )));
        }
        let (l, ce, c, cc) = (dims.layers, dims.c_enc, dims.c_prime, dims.c_cls);
        let kernel_shapes: Vec<_> = if kernel_enabled { KERNEL_SHAPES.to_vec() } else { vec![(1, 1)] };
        let pairs = canonical_pairs(l);
        let mut r = rng::stream(seed, 0x4B41_4847, 0);
        let mut randn = |shape: &[usize], fan_in: usize| Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), &mut r);

        let linear = (0..l).map(|_| randn(&[c, ce, 1, 1], ce)).collect();
        let intra_query = (0..l).map(|_| randn(&[c / 2, c, 1, 1], c)).collect();
        let intra_key = (0..l).map(|_| randn(&[c / 2, c, 1, 1], c)).collect();
        let intra_value = (0..l).map(|_| randn(&[c, c, 1, 1], c)).collect();
        let inter = pairs.iter().map(|_| randn(&[c, c], c)).collect();
        let gate_weight = randn(&[c, c, 1, 1], c);
        let gru_update = randn(&[c, 2 * c, 3, 3], 18 * c);
        let gru_reset = randn(&[c, 2 * c, 3, 3], 18 * c);
        let adapter_weight = randn(&[cc, c], cc);
        let kernels = kernel_shapes
            .iter()
            .map(|&(kh, kw)| {
                let mut k = Tensor::randn(&[c, 1, kh, kw], 0.01, &mut r);
                for ch in 0..c {
                    let centre = k.get(&[ch, 0, kh / 2, kw / 2]);
                    k.set(&[ch, 0, kh / 2, kw / 2], centre + 1.0);
                }
                k
            })
            .collect();

        let weights = Weights {
            linear,
            linear_bias: vec![Tensor::zeros(&[c]); l],
            kernels,
            intra_query,
            intra_key,
            intra_value,
            alpha: vec![Tensor::scalar(0.0); l],
            inter,
            gate_weight,
            gate_bias: Tensor::zeros(&[c]),
            gru_update,
            gru_update_bias: Tensor::zeros(&[c]),
            gru_reset,
            gru_reset_bias: Tensor::zeros(&[c]),
            gru_candidate: Tensor::zeros(&[c, 2 * c, 3, 3]),
            gru_candidate_bias: Tensor::zeros(&[c]),
            adapter_weight,
            adapter_bias: Tensor::zeros(&[1, c]),
        };
        Ok(Self { dims, kernel_shapes, pairs, weights })
    }

    pub fn kernel_enabled(&self) -> bool {
        self.kernel_shapes.len() > 1
    }

    /// `(name, tensor)` in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.weights.visit(&self.pairs, &self.kernel_shapes, |n, t| out.push((n, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.entries_mut()
    }

    /// Rebuilds parameters from named records, e.g. a checkpoint. Every
    /// expected name must be present with the expected shape.
    pub fn from_named(
        dims: Dims,
        kernel_enabled: bool,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut params = Self::init(dims, kernel_enabled, 0)?;
        let names: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), slot) in names.iter().zip(params.tensors_mut()) {
            let t = lookup(name).ok_or_else(|| crate::error::CheckpointError::MissingField(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return shape_err(format!("record {name} has shape {:?}, expected {shape:?}", t.shape()));
            }
            *slot = t;
        }
        Ok(params)
    }

    /// Wraps variables created elsewhere, given in [`KahgParams::named`] order.
    pub fn wrap<'t>(&self, vars: &[Var<'t>]) -> Result<KahgVars<'t>> {
        let expected = self.named().len();
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!("{} variables for {expected} parameters", vars.len())));
        }
        let mut it = vars.iter();
        let weights = self.weights.map(|_| *it.next().expect("length checked"));
        for ((name, t), v) in self.named().iter().zip(vars) {
            if v.shape() != t.shape() {
                return shape_err(format!("variable for {name} has shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
        }
        Ok(KahgVars { dims: self.dims, pairs: self.pairs.clone(), weights })
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> KahgVars<'t> {
        let weights = self.weights.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) });
        KahgVars { dims: self.dims, pairs: self.pairs.clone(), weights }
    }
}

/// Parameters bound to a tape.
pub struct KahgVars<'t> {
    pub dims: Dims,
    pub pairs: Vec<(usize, usize)>,
    pub weights: Weights<Var<'t>>,
}

impl<'t> KahgVars<'t> {
    fn inter(&self, i: usize, j: usize) -> Result<Var<'t>> {
        let key = (i.min(j), i.max(j));
        self.pairs
            .iter()
            .position(|&p| p == key)
            .map(|k| self.weights.inter[k])
            .ok_or_else(|| Error::InvalidArgument(format!("no inter-attention weight for layers {key:?}")))
    }

    /// Trainable leaves in canonical order, matching [`KahgParams::named`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        let kernel_shapes = vec![(0, 0); self.weights.kernels.len()];
        self.weights.visit(&self.pairs, &kernel_shapes, |_, v| out.push(*v));
        out
    }
}

/// Node and edge buffers of one message-passing round.
#[derive(Clone, Debug)]
pub struct GraphState<'t> {
    /// `N_i` as `[C', H', W']`.
    pub nodes: Vec<Var<'t>>,
    /// `e_{i,i}` as `[C', H', W']`.
    pub loop_edges: Vec<Var<'t>>,
    /// `e_{i,j}` for every ordered pair `i != j`, `[H'W', H'W']`.
    pub line_edges: BTreeMap<(usize, usize), Var<'t>>,
    pub iteration: usize,
}

/// One gated message from node `j` to node `i`.
#[derive(Clone, Copy, Debug)]
pub struct Message<'t> {
    /// `h_{j,i}` as `[C', H', W']`.
    pub value: Var<'t>,
    /// `a_{j,i}` as `[C']`.
    pub gate: Var<'t>,
}

/// Messages keyed by `(from, to)`.
pub type Messages<'t> = BTreeMap<(usize, usize), Message<'t>>;

/// Projects each layer to the node width, applies the kernel bank and
/// normalises every position along channels.
pub fn embed_nodes<'t>(features: &[Var<'t>], p: &KahgVars<'t>) -> Result<Vec<Var<'t>>> {
    let first = features.first().ok_or(Error::Empty("no encoder layers"))?.shape();
    if features.len() != p.weights.linear.len() {
        return shape_err(format!("{} feature layers for {} graph layers", features.len(), p.weights.linear.len()));
    }
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s = f.shape();
            if s.len() != 3 || s[1..] != first[1..] {
                return shape_err(format!("layer {i} features {s:?} do not match {first:?}"));
            }
            let projected = f.conv2d(p.weights.linear[i], false)?.add_channel_bias(p.weights.linear_bias[i])?;
            let mut acc: Option<Var<'t>> = None;
            for &k in &p.weights.kernels {
                let y = projected.conv2d(k, true)?;
                acc = Some(match acc {
                    Some(a) => a.add(y)?,
                    None => y,
                });
            }
            acc.expect("kernel bank is never empty").l2_normalize(0, NORM_EPS)
        })
        .collect()
}

/// Self-attention loop edge `alpha * softmax(Q K^T) V + N` over positions.
pub fn loop_edge<'t>(node: Var<'t>, layer: usize, p: &KahgVars<'t>) -> Result<Var<'t>> {
    let s = node.shape();
    let w = &p.weights;
    let q = node.conv2d(w.intra_query[layer], false)?.to_patches()?;
    let k = node.conv2d(w.intra_key[layer], false)?.to_patches()?;
    let v = node.conv2d(w.intra_value[layer], false)?.to_patches()?;
    let attn = q.matmul(k.transpose()?)?.softmax(1)?;
    let ctx = attn.matmul(v)?.from_patches(s[1], s[2])?;
    ctx.scale_by(w.alpha[layer])?.add(node)
}

/// Bilinear cross-layer affinities between flattened `[H'W', C']` nodes.
/// The reverse edge is the exact transpose of the forward one.
pub fn line_edges<'t>(node_i: Var<'t>, node_j: Var<'t>, inter: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (si, sj) = (node_i.shape(), node_j.shape());
    if si.len() != 2 || si != sj {
        return shape_err(format!("line edge between {si:?} and {sj:?}"));
    }
    let e_ij = node_i.matmul(inter)?.matmul(node_j.transpose()?)?;
    let e_ji = e_ij.transpose()?;
    Ok((e_ij, e_ji))
}

/// Builds the edges of the current node set.
pub fn build_edges<'t>(nodes: Vec<Var<'t>>, iteration: usize, p: &KahgVars<'t>) -> Result<GraphState<'t>> {
    let loop_edges = nodes.iter().enumerate().map(|(i, &n)| loop_edge(n, i, p)).collect::<Result<Vec<_>>>()?;
    let patches = nodes.iter().map(|n| n.to_patches()).collect::<Result<Vec<_>>>()?;
    let mut line = BTreeMap::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (e_ij, e_ji) = line_edges(patches[i], patches[j], p.inter(i, j)?)?;
            line.insert((i, j), e_ij);
            line.insert((j, i), e_ji);
        }
    }
    Ok(GraphState { nodes, loop_edges, line_edges: line, iteration })
}

fn gate<'t>(message: Var<'t>, p: &KahgVars<'t>) -> Result<Var<'t>> {
    message
        .conv2d(p.weights.gate_weight, false)?
        .add_channel_bias(p.weights.gate_bias)?
        .global_avg_pool()
        .map(|g| g.sigmoid())
}

/// Loop messages are the loop edges themselves; line messages are
/// row-softmax attention of the sender's positions. Both are gated.
pub fn gated_messages<'t>(state: &GraphState<'t>, p: &KahgVars<'t>) -> Result<Messages<'t>> {
    let mut out = BTreeMap::new();
    let s = state.nodes.first().ok_or(Error::Empty("graph without nodes"))?.shape();
    for i in 0..state.nodes.len() {
        for j in 0..state.nodes.len() {
            let value = if i == j {
                state.loop_edges[i]
            } else {
                let edge = state.line_edges.get(&(i, j)).ok_or_else(|| {
                    Error::InvalidArgument(format!("missing line edge ({i}, {j})"))
                })?;
                edge.softmax(1)?.matmul(state.nodes[j].to_patches()?)?.from_patches(s[1], s[2])?
            };
            out.insert((j, i), Message { value, gate: gate(value, p)? });
        }
    }
    Ok(out)
}

/// Gated sum of incoming messages per node, in ascending sender order.
pub fn aggregate<'t>(messages: &Messages<'t>, layers: usize) -> Result<Vec<Var<'t>>> {
    (0..layers)
        .map(|i| {
            let mut acc: Option<Var<'t>> = None;
            for j in 0..layers {
                let m = messages
                    .get(&(j, i))
                    .ok_or_else(|| Error::InvalidArgument(format!("missing message {j} -> {i}")))?;
                let term = m.value.channel_scale(m.gate)?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            acc.ok_or(Error::Empty("graph without nodes"))
        })
        .collect()
}

/// Single ConvGRU update with 3×3 "same" convolutions.
pub fn convgru_step<'t>(prev: Var<'t>, message: Var<'t>, p: &KahgVars<'t>) -> Result<Var<'t>> {
    if prev.shape() != message.shape() {
        return shape_err(format!("ConvGRU state {:?} vs message {:?}", prev.shape(), message.shape()));
    }
    let w = &p.weights;
    let tape = prev.tape();
    let joint = tape.concat(&[prev, message])?;
    let update = joint.conv2d(w.gru_update, false)?.add_channel_bias(w.gru_update_bias)?.sigmoid();
    let reset = joint.conv2d(w.gru_reset, false)?.add_channel_bias(w.gru_reset_bias)?.sigmoid();
    let gated = tape.concat(&[reset.mul(prev)?, message])?;
    let candidate = gated.conv2d(w.gru_candidate, false)?.add_channel_bias(w.gru_candidate_bias)?.tanh();
    prev.add(update.mul(candidate.sub(prev)?)?)
}

/// Full graph pass. Returns `O_i` as `[H'W', C']` per layer.
pub fn run_kahg<'t>(features: &[Var<'t>], p: &KahgVars<'t>, iterations: usize) -> Result<Vec<Var<'t>>> {
    run_kahg_observed(features, p, iterations, |_, _| {})
}

/// [`run_kahg`] with a callback receiving each round's edges and messages.
pub fn run_kahg_observed<'t>(
    features: &[Var<'t>],
    p: &KahgVars<'t>,
    iterations: usize,
    mut observe: impl FnMut(&GraphState<'t>, &Messages<'t>),
) -> Result<Vec<Var<'t>>> {
    let embedded = embed_nodes(features, p)?;
    if iterations == 0 {
        return embedded.iter().map(|v| v.to_patches()).collect();
    }
    let layers = embedded.len();
    let mut nodes = embedded.clone();
    for t in 1..=iterations {
        let state = build_edges(nodes, t - 1, p)?;
        let messages = gated_messages(&state, p)?;
        observe(&state, &messages);
        let incoming = aggregate(&messages, layers)?;
        nodes = state
            .nodes
            .iter()
            .zip(&incoming)
            .map(|(&n, &h)| convgru_step(n, h, p))
            .collect::<Result<_>>()?;
    }
    nodes.iter().zip(&embedded).map(|(n, v)| n.add(*v)?.to_patches()).collect()
}

/// Draws a parameter set whose every entry is random, for gradient checks.
pub fn randomize<R: Rng>(params: &mut KahgParams, std: f64, rng: &mut R) {
    for t in params.tensors_mut() {
        *t = Tensor::randn(t.shape(), std, rng);
    }
}

#[cfg(test)]
mod tests;
