use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn dims(layers: usize, c: usize, grid: usize) -> Dims {
    Dims { layers, c_enc: c, c_prime: c, c_cls: 4, grid, image: grid }
}

/// Identity projection, a single exact delta kernel and zero GRU weights.
fn plain(layers: usize, c: usize) -> KahgParams {
    let mut p = KahgParams::init(dims(layers, c, 2), false, 1).unwrap();
    let mut eye = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        eye.set(&[i, i, 0, 0], 1.0);
    }
    p.weights.linear = vec![eye; layers];
    p.weights.kernels = vec![Tensor::ones(&[c, 1, 1, 1])];
    for t in [&mut p.weights.gru_update, &mut p.weights.gru_reset, &mut p.weights.gru_candidate] {
        *t = Tensor::zeros(t.shape());
    }
    p
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

#[test]
fn loop_edge_with_zero_alpha_is_identity() {
    let p = KahgParams::init(dims(2, 4, 3), true, 5).unwrap();
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let node = tape.constant(randn(&[4, 3, 3], 2));
    let e = loop_edge(node, 1, &v).unwrap();
    assert_eq!(e.value().max_abs_diff(&node.value()), 0.0);
}

#[test]
fn loop_edge_on_constant_node() {
    let mut p = KahgParams::init(dims(1, 2, 2), true, 5).unwrap();
    p.weights.alpha[0] = Tensor::scalar(0.7);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let col = [0.3, -1.1];
    let node = Tensor::new(&[2, 2, 2], vec![col[0]; 4].into_iter().chain(vec![col[1]; 4]).collect()).unwrap();
    let e = loop_edge(tape.constant(node.clone()), 0, &v).unwrap().value();
    // Every attention row averages identical value rows.
    let wv = &p.weights.intra_value[0];
    for c in 0..2 {
        let vc = wv.get(&[c, 0, 0, 0]) * col[0] + wv.get(&[c, 1, 0, 0]) * col[1];
        for pos in 0..4 {
            let expected = 0.7 * vc + col[c];
            assert!((e.data()[c * 4 + pos] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn loop_edge_two_positions_by_hand() {
    let mut p = KahgParams::init(dims(1, 2, 2), true, 5).unwrap();
    p.weights.alpha[0] = Tensor::scalar(1.0);
    p.weights.intra_query[0] = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    p.weights.intra_key[0] = Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    p.weights.intra_value[0] = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    // Two positions (2x1 grid): n0 = (1, 2), n1 = (3, 4).
    let node = Tensor::new(&[2, 2, 1], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
    let e = loop_edge(tape.constant(node), 0, &v).unwrap().value();
    let (q, k): ([f64; 2], [f64; 2]) = ([1.0, 3.0], [2.0, 4.0]);
    let vals = [[1.0, 2.0], [3.0, 4.0]];
    for pos in 0..2 {
        let s: Vec<f64> = k.iter().map(|kk| (q[pos] * kk).exp()).collect();
        let z = s[0] + s[1];
        for c in 0..2 {
            let ctx = (s[0] * vals[0][c] + s[1] * vals[1][c]) / z;
            let expected = ctx + vals[pos][c];
            assert!((e.get(&[c, pos, 0]) - expected).abs() < 1e-12, "{c} {pos}");
        }
    }
}

#[test]
fn line_edges_by_hand_and_transposed() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::eye(2));
    let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (e, et) = line_edges(eye, eye, w).unwrap();
    assert_eq!(e.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(et.value().data(), &[1.0, 3.0, 2.0, 4.0]);

    let a = tape.constant(randn(&[4, 3], 1));
    let b = tape.constant(randn(&[4, 3], 2));
    let w = tape.constant(randn(&[3, 3], 3));
    let (e, et) = line_edges(a, b, w).unwrap();
    let (e, et) = (e.value(), et.value());
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(e.get(&[i, j]).to_bits(), et.get(&[j, i]).to_bits());
        }
    }

    let sym = randn(&[3, 3], 4);
    let sym = sym.zip_map(&Tensor::new(&[3, 3], crate::autodiff::kernels::transpose(sym.data(), 3, 3)).unwrap(), |x, y| x + y).unwrap();
    let (gram, _) = line_edges(a, a, tape.constant(sym)).unwrap();
    let g = gram.value();
    for i in 0..4 {
        for j in 0..4 {
            assert!((g.get(&[i, j]) - g.get(&[j, i])).abs() < 1e-12);
        }
    }
    assert!(line_edges(a, tape.constant(randn(&[5, 3], 1)), w).is_err());
}

#[test]
fn zero_gate_parameters_give_half_gates() {
    let mut p = KahgParams::init(dims(3, 4, 3), true, 8).unwrap();
    p.weights.gate_weight = Tensor::zeros(&[4, 4, 1, 1]);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let feats: Vec<_> = (0..3).map(|i| tape.constant(randn(&[4, 3, 3], i))).collect();
    let nodes = embed_nodes(&feats, &v).unwrap();
    let state = build_edges(nodes, 0, &v).unwrap();
    let msgs = gated_messages(&state, &v).unwrap();
    assert_eq!(msgs.len(), 9);
    for m in msgs.values() {
        assert!(m.gate.value().data().iter().all(|&g| g == 0.5));
    }
}

#[test]
fn uniform_line_edge_sends_mean_of_sender() {
    let p = plain(2, 2);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let n0 = tape.constant(randn(&[2, 2, 2], 1));
    let n1 = tape.constant(randn(&[2, 2, 2], 2));
    let mut state = build_edges(vec![n0, n1], 0, &v).unwrap();
    state.line_edges.insert((0, 1), tape.constant(Tensor::full(&[4, 4], 0.3)));
    let msgs = gated_messages(&state, &v).unwrap();
    let h = msgs[&(1, 0)].value.value();
    let n1v = n1.value();
    for c in 0..2 {
        let mean = n1v.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0;
        for pos in 0..4 {
            assert!((h.data()[c * 4 + pos] - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn aggregate_sums_gated_messages_in_order() {
    let tape = Tape::new();
    let mut msgs = Messages::new();
    for j in 0..2 {
        for i in 0..2 {
            let value = tape.constant(Tensor::full(&[2, 1, 1], (10 * j + i) as f64));
            let gate = tape.constant(Tensor::from_vec(vec![1.0, 0.5]));
            msgs.insert((j, i), Message { value, gate });
        }
    }
    let agg = aggregate(&msgs, 2).unwrap();
    // Node 1 receives 1 (from 0) and 11 (from 1).
    assert_eq!(agg[1].value().data(), &[12.0, 6.0]);
    assert_eq!(agg[0].value().data(), &[10.0, 5.0]);
    msgs.remove(&(1, 0));
    assert!(aggregate(&msgs, 2).is_err());
}

#[test]
fn convgru_zero_weights_halve_state() {
    let p = plain(1, 2);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let n = randn(&[2, 3, 3], 1);
    let out = convgru_step(tape.constant(n.clone()), tape.constant(randn(&[2, 3, 3], 2)), &v).unwrap();
    assert!(close(&out.value(), &n.map(|x| 0.5 * x), 1e-15));

    let rand = KahgParams::init(dims(1, 2, 2), true, 3).unwrap();
    let v = rand.bind(&tape, false);
    let zero = tape.constant(Tensor::zeros(&[2, 3, 3]));
    assert!(convgru_step(zero, zero, &v).unwrap().value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn convgru_single_position_oracle() {
    let mut p = KahgParams::init(dims(1, 2, 1), true, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    randomize(&mut p, 0.5, &mut r);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let n = [0.4, -0.3];
    let h = [0.9, 0.2];
    let out = convgru_step(
        tape.constant(Tensor::new(&[2, 1, 1], n.to_vec()).unwrap()),
        tape.constant(Tensor::new(&[2, 1, 1], h.to_vec()).unwrap()),
        &v,
    )
    .unwrap()
    .value();
    let w = &p.weights;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    // Only the centre tap sees a 1x1 input.
    let lin = |k: &Tensor, b: &Tensor, a: [f64; 2], c: usize| {
        k.get(&[c, 0, 1, 1]) * a[0] + k.get(&[c, 1, 1, 1]) * a[1] + k.get(&[c, 2, 1, 1]) * h[0] + k.get(&[c, 3, 1, 1]) * h[1] + b.data()[c]
    };
    let r_ = [0, 1].map(|c| sig(lin(&w.gru_reset, &w.gru_reset_bias, n, c)));
    for c in 0..2 {
        let z = sig(lin(&w.gru_update, &w.gru_update_bias, n, c));
        let cand = lin(&w.gru_candidate, &w.gru_candidate_bias, [r_[0] * n[0], r_[1] * n[1]], c).tanh();
        let expected = n[c] + z * (cand - n[c]);
        assert!((out.data()[c] - expected).abs() < 1e-14);
    }
}

#[test]
fn embed_nodes_by_hand() {
    let p = plain(1, 2);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let f = tape.constant(Tensor::new(&[2, 1, 1], vec![3.0, 4.0]).unwrap());
    let n = embed_nodes(&[f], &v).unwrap();
    assert!(close(&n[0].value(), &Tensor::new(&[2, 1, 1], vec![0.6, 0.8]).unwrap(), 1e-15));
    let zero = tape.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(embed_nodes(&[zero], &v).unwrap()[0].value().data().iter().all(|&x| x == 0.0));

    let g = tape.constant(randn(&[2, 3, 3], 7));
    let norms = embed_nodes(&[g], &v).unwrap()[0].value();
    for pos in 0..9 {
        let s = norms.data()[pos].powi(2) + norms.data()[9 + pos].powi(2);
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(embed_nodes(&[g, g], &v).is_err());
    assert!(embed_nodes(&[], &v).is_err());
}

#[test]
fn zero_iterations_return_embeddings() {
    let p = KahgParams::init(dims(3, 4, 3), true, 2).unwrap();
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let feats: Vec<_> = (0..3).map(|i| tape.constant(randn(&[4, 3, 3], i))).collect();
    let out = run_kahg(&feats, &v, 0).unwrap();
    let emb = embed_nodes(&feats, &v).unwrap();
    for (o, e) in out.iter().zip(&emb) {
        assert!(o.value().bit_eq(&e.to_patches().unwrap().value()));
    }
}

#[test]
fn one_iteration_with_zero_gru_scales_embedding() {
    // alpha = 0 and zero GRU weights: N^1 = N^0 / 2, so O = 1.5 V.
    let mut p = plain(3, 2);
    p.weights.gate_weight = Tensor::zeros(&[2, 2, 1, 1]);
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let feats: Vec<_> = (0..3).map(|i| tape.constant(randn(&[2, 2, 2], 10 + i))).collect();
    let out = run_kahg(&feats, &v, 1).unwrap();
    let emb = embed_nodes(&feats, &v).unwrap();
    for (o, e) in out.iter().zip(&emb) {
        let expected = e.to_patches().unwrap().value().map(|x| 1.5 * x);
        assert!(close(&o.value(), &expected, 1e-15));
    }
}

#[test]
fn output_shapes_and_observer() {
    let p = KahgParams::init(dims(3, 4, 3), true, 2).unwrap();
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let feats: Vec<_> = (0..3).map(|i| tape.constant(randn(&[4, 3, 3], i))).collect();
    let mut rounds = Vec::new();
    let out = run_kahg_observed(&feats, &v, 2, |s, m| {
        assert_eq!(s.line_edges.len(), 6);
        assert_eq!(m.len(), 9);
        for e in s.line_edges.values() {
            assert_eq!(e.shape(), vec![9, 9]);
        }
        rounds.push(s.iteration);
    })
    .unwrap();
    assert_eq!(rounds, vec![0, 1]);
    assert_eq!(out.len(), 3);
    for o in &out {
        assert_eq!(o.shape(), vec![9, 4]);
    }
}

#[test]
fn pair_storage_order_does_not_matter() {
    let mut p = KahgParams::init(dims(3, 4, 2), true, 9).unwrap();
    randomize(&mut p, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
    let mut q = p.clone();
    q.pairs.reverse();
    q.weights.inter.reverse();
    let feats: Vec<Tensor> = (0..3).map(|i| randn(&[4, 2, 2], i)).collect();
    let run = |params: &KahgParams| {
        let tape = Tape::new();
        let v = params.bind(&tape, false);
        let f: Vec<_> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        run_kahg(&f, &v, 2).unwrap().iter().map(|o| o.value().as_ref().clone()).collect::<Vec<_>>()
    };
    for (a, b) in run(&p).iter().zip(&run(&q)) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn named_parameters_roundtrip() {
    let p = KahgParams::init(dims(3, 4, 2), true, 9).unwrap();
    let named: Vec<(String, Tensor)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert!(named.iter().any(|(n, _)| n == "inter.0_2"));
    assert!(named.iter().any(|(n, _)| n == "kernel.1x5"));
    let back = KahgParams::from_named(p.dims, true, |n| named.iter().find(|(m, _)| m == n).map(|(_, t)| t.clone())).unwrap();
    for ((_, a), (_, b)) in p.named().iter().zip(back.named()) {
        assert!(a.bit_eq(b));
    }
    let missing = KahgParams::from_named(p.dims, true, |n| {
        if n == "alpha.1" { None } else { named.iter().find(|(m, _)| m == n).map(|(_, t)| t.clone()) }
    });
    assert!(missing.is_err());
    assert!(KahgParams::init(dims(2, 3, 2), true, 0).is_err());
}
