use rand::Rng as _;

use super::*;
use crate::numerics::{gelu, layer_norm, matmul, max_rel_err, seeded_rng, DType, Tensor};

fn cfg64(kind: BlockKind, vocab: usize, ctx: usize, d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig::new(kind, vocab, ctx, d, heads, layers).with_dtype(DType::F64)
}

fn random_model(kind: BlockKind, layers: usize, seed: u64) -> Model<f64> {
    Model::init(cfg64(kind, 13, 8, 8, 2, layers), seed).unwrap()
}

/// Scales every block weight so layer functions are O(1) on O(1) states.
fn boost(model: &mut Model<f64>, factor: f64) {
    for b in &mut model.params.blocks {
        for t in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn state(seq: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[seq, d], 1.0, &mut seeded_rng(seed))
}

#[test]
fn zero_weights_give_residual_identity_and_zero_force() {
    for kind in BlockKind::ALL {
        let m: Model<f64> = Model::zeros(cfg64(kind, 5, 4, 8, 2, 2)).unwrap();
        let p = state(4, 8, 1);
        assert_eq!(baseline_step(&p, &m, 0).unwrap(), p);
        assert_eq!(layer_fn(&p, &m, 1).unwrap().max_abs(), 0.0);
        assert_eq!(attn_block(&p, &m, 0).unwrap().max_abs(), 0.0);
        assert_eq!(mlp_block(&p, &m, 0).unwrap().max_abs(), 0.0);
    }
}

#[test]
fn baseline_step_minus_input_is_layer_fn() {
    for seed in 0..5 {
        let mut m = random_model(BlockKind::Baseline, 2, seed);
        boost(&mut m, 20.0);
        let p = state(6, 8, seed + 100);
        let lhs = baseline_step(&p, &m, 1).unwrap().sub(&p).unwrap();
        let rhs = layer_fn(&p, &m, 1).unwrap();
        let diff = lhs.sub(&rhs).unwrap().max_abs();
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn layer_fn_is_deterministic() {
    let m = random_model(BlockKind::Midpoint, 2, 3);
    let p = state(5, 8, 4);
    assert_eq!(layer_fn(&p, &m, 0).unwrap(), layer_fn(&p, &m, 0).unwrap());
}

/// Per-position, per-head loops with no matrix kernels.
#[allow(clippy::needless_range_loop)]
fn naive_attention(p: &Tensor<f64>, bp: &BlockParams<f64>, heads: usize) -> Tensor<f64> {
    let (t_len, d) = (p.rows(), p.cols());
    let dh = d / heads;
    let x = layer_norm(p, &bp.ln1_gain, &bp.ln1_bias, 1e-5).unwrap();
    let proj = |w: &Tensor<f64>, t: usize, j: usize| (0..d).map(|i| x.row(t)[i] * w.row(i)[j]).sum::<f64>();
    let mut concat = vec![vec![0.0; d]; t_len];
    for h in 0..heads {
        for t in 0..t_len {
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    (0..dh)
                        .map(|c| proj(&bp.wq, t, h * dh + c) * proj(&bp.wk, s, h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, sc) in scores.iter().enumerate() {
                let w = (sc - max).exp() / z;
                for c in 0..dh {
                    concat[t][h * dh + c] += w * proj(&bp.wv, s, h * dh + c);
                }
            }
        }
    }
    Tensor::from_fn(&[t_len, d], |idx| {
        let (t, j) = (idx / d, idx % d);
        (0..d).map(|i| concat[t][i] * bp.wo.row(i)[j]).sum()
    })
}

#[test]
fn attention_matches_naive_loops() {
    let mut m = random_model(BlockKind::Baseline, 1, 9);
    boost(&mut m, 25.0);
    let mut rng = seeded_rng(10);
    let bp = &mut m.params.blocks[0];
    bp.ln1_gain = Tensor::rand_uniform(&[8], 0.5, 1.5, &mut rng);
    bp.ln1_bias = Tensor::randn(&[8], 0.1, &mut rng);
    let p = state(5, 8, 11);
    let fast = attn_block(&p, &m, 0).unwrap();
    let slow = naive_attention(&p, m.block(0), 2);
    assert!(max_rel_err(&fast, &slow) <= 1e-6);
    assert!(max_rel_err(&fast, &slow) <= 1e-13);
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    let mut m = random_model(BlockKind::Baseline, 1, 12);
    boost(&mut m, 25.0);
    let p = state(1, 8, 13);
    let bp = m.block(0);
    let x = layer_norm(&p, &bp.ln1_gain, &bp.ln1_bias, 1e-5).unwrap();
    let expect = matmul(&matmul(&x, &bp.wv).unwrap(), &bp.wo).unwrap();
    let before = attn_block(&p, &m, 0).unwrap();
    assert!(max_rel_err(&before, &expect) <= 1e-14);
    let mut rng = seeded_rng(14);
    m.params.blocks[0].wq = Tensor::randn(&[8, 8], 3.0, &mut rng);
    m.params.blocks[0].wk = Tensor::randn(&[8, 8], 3.0, &mut rng);
    assert_eq!(attn_block(&p, &m, 0).unwrap(), before);
}

#[test]
fn zero_value_weights_silence_attention() {
    let mut m = random_model(BlockKind::Baseline, 1, 15);
    m.params.blocks[0].wv.fill(0.0);
    assert_eq!(attn_block(&state(6, 8, 16), &m, 0).unwrap().max_abs(), 0.0);
}

#[test]
fn mlp_with_structured_weights_is_truncated_gelu() {
    let mut m: Model<f64> = Model::zeros(cfg64(BlockKind::Baseline, 5, 4, 8, 2, 1)).unwrap();
    let bp = &mut m.params.blocks[0];
    bp.ln2_gain.fill(1.0);
    // W₁ = [I | 0], W₂ = [I; 0]
    for i in 0..8 {
        bp.w1.row_mut(i)[i] = 1.0;
        bp.w2.row_mut(i)[i] = 1.0;
    }
    let x = state(4, 8, 17);
    let ln = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
    let expect = gelu(&ln);
    assert!(mlp_block(&x, &m, 0).unwrap().sub(&expect).unwrap().max_abs() < 1e-15);
}

#[test]
fn mlp_matches_primitive_composition() {
    let mut m = random_model(BlockKind::Baseline, 1, 18);
    boost(&mut m, 10.0);
    let mut rng = seeded_rng(19);
    m.params.blocks[0].b1 = Tensor::randn(&[32], 0.5, &mut rng);
    m.params.blocks[0].b2 = Tensor::randn(&[8], 0.5, &mut rng);
    let bp = m.block(0);
    let x = state(5, 8, 20);
    let z = layer_norm(&x, &bp.ln2_gain, &bp.ln2_bias, 1e-5).unwrap();
    let mut pre = matmul(&z, &bp.w1).unwrap();
    for t in 0..5 {
        for (v, b) in pre.row_mut(t).iter_mut().zip(bp.b1.data()) {
            *v += b;
        }
    }
    let mut out = matmul(&gelu(&pre), &bp.w2).unwrap();
    for t in 0..5 {
        for (v, b) in out.row_mut(t).iter_mut().zip(bp.b2.data()) {
            *v += b;
        }
    }
    assert!(max_rel_err(&mlp_block(&x, &m, 0).unwrap(), &out) <= 1e-14);
}

#[test]
fn embed_cases() {
    let m: Model<f64> = Model::zeros(cfg64(BlockKind::Baseline, 5, 4, 5, 1, 1)).unwrap();
    assert_eq!(embed(&[1, 2, 3], &m).unwrap().max_abs(), 0.0);

    let mut m = m;
    m.params.embedding.token = Tensor::eye(5);
    let e = embed(&[2], &m).unwrap();
    assert_eq!(e.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);

    let m = random_model(BlockKind::Baseline, 1, 21);
    let toks = [4, 0, 12, 7];
    let e = embed(&toks, &m).unwrap();
    for (t, &tok) in toks.iter().enumerate() {
        for j in 0..8 {
            let want = m.params.embedding.token.data()[tok * 8 + j] + m.params.embedding.position.data()[t * 8 + j];
            assert_eq!(e.data()[t * 8 + j], want);
        }
    }
    assert!(embed(&[13], &m).is_err());
    assert!(embed(&[0; 9], &m).is_err());
    assert!(embed(&[], &m).is_err());
}

#[test]
fn projection_cases() {
    let mut m: Model<f64> = Model::zeros(cfg64(BlockKind::Baseline, 8, 4, 8, 2, 1)).unwrap();
    let p = state(3, 8, 22);
    assert_eq!(project_logits(&p, &m).unwrap().max_abs(), 0.0);
    m.params.embedding.head = Tensor::eye(8);
    assert_eq!(project_logits(&p, &m).unwrap(), p);

    let m = random_model(BlockKind::Baseline, 1, 23);
    let direct = matmul(&p, &m.params.embedding.head).unwrap();
    assert_eq!(project_logits(&p, &m).unwrap(), direct);
    assert!(project_logits(&state(3, 7, 0), &m).is_err());
}

fn carrier_for(kind: BlockKind, seed: u64) -> StateCarrier<f64> {
    let (a, b) = (state(6, 8, seed), state(6, 8, seed + 1));
    match kind {
        BlockKind::Hamiltonian => StateCarrier::hamiltonian(a, b).unwrap(),
        _ => StateCarrier::two_step(a, b).unwrap(),
    }
}

#[test]
fn every_reversible_kind_round_trips_in_fp64() {
    for kind in BlockKind::REVERSIBLE {
        for seed in 0..4 {
            let mut m = random_model(kind, 3, seed);
            boost(&mut m, 10.0);
            let c = carrier_for(kind, 50 + seed);
            for layer in 0..3 {
                let back = inverse(&step(&c, &m, layer).unwrap(), &m, layer).unwrap();
                let err = back.max_rel_err(&c);
                assert!(err <= 1e-12, "{kind} layer {layer}: {err}");
            }
        }
    }
}

#[test]
fn midpoint_a_round_trips_for_shifted_coefficients() {
    let mut m = random_model(BlockKind::Midpoint, 2, 30);
    boost(&mut m, 10.0);
    let c = carrier_for(BlockKind::Midpoint, 31);
    for a in [1.3, 0.7, -0.7, -1.3] {
        let next = midpoint_a_step(&c, &m, 1, 0.5, a).unwrap();
        let back = midpoint_a_inverse(&next, &m, 1, 0.5, a).unwrap();
        assert!(back.max_rel_err(&c) <= 1e-12);
    }
    assert!(midpoint_a_step(&c, &m, 1, 0.5, 0.0).is_err());
}

#[test]
fn explicit_step_functions_match_their_formulas() {
    let mut m = random_model(BlockKind::Midpoint, 2, 32);
    boost(&mut m, 10.0);
    let c = carrier_for(BlockKind::Midpoint, 33);
    let StateCarrier::TwoStep { prev, cur } = &c else { unreachable!() };
    let f = layer_fn(cur, &m, 0).unwrap();
    let check = |got: StateCarrier<f64>, want: Tensor<f64>| {
        let StateCarrier::TwoStep { prev: p, cur: n } = got else { unreachable!() };
        assert_eq!(&p, cur);
        assert!(n.sub(&want).unwrap().max_abs() <= 1e-14);
    };
    let h = 0.3;
    check(
        midpoint_step(&c, &m, 0, h).unwrap(),
        prev.zip_map(&f, "t", |p, f| p + 2.0 * h * f).unwrap(),
    );
    check(
        leapfrog_step(&c, &m, 0, h).unwrap(),
        Tensor::from_fn(prev.shape(), |i| 2.0 * cur.data()[i] - prev.data()[i] + h * h * f.data()[i]),
    );
    check(
        midpoint_a_step(&c, &m, 0, h, -0.8).unwrap(),
        Tensor::from_fn(prev.shape(), |i| -0.8 * prev.data()[i] + 1.8 * cur.data()[i] + h * f.data()[i]),
    );
    // a = 1 is the midpoint rule with half the step
    let a1 = midpoint_a_step(&c, &m, 0, 2.0 * h, 1.0).unwrap();
    let mid = midpoint_step(&c, &m, 0, h).unwrap();
    assert!(a1.max_rel_err(&mid) <= 1e-15);
}

#[test]
fn zero_force_cases() {
    let m: Model<f64> = Model::zeros(cfg64(BlockKind::Midpoint, 5, 6, 8, 2, 2)).unwrap();
    let (p, v) = (state(6, 8, 40), state(6, 8, 41));
    let c = StateCarrier::two_step(p.clone(), v.clone()).unwrap();
    let out = |c: StateCarrier<f64>| c.output().clone();

    assert_eq!(out(midpoint_step(&c, &m, 0, 0.7).unwrap()), p);
    let back = midpoint_inverse(&c, &m, 0, 0.7).unwrap();
    assert_eq!(back.tensors()[0], &v);

    let two_v_minus_p = Tensor::from_fn(p.shape(), |i| 2.0 * v.data()[i] - p.data()[i]);
    assert_eq!(out(midpoint_a_step(&c, &m, 0, 0.7, -1.0).unwrap()), two_v_minus_p);

    let constant = StateCarrier::two_step(v.clone(), v.clone()).unwrap();
    assert_eq!(out(leapfrog_step(&constant, &m, 0, 1.0).unwrap()), v);
    let uniform = StateCarrier::two_step(Tensor::zeros(&[6, 8]), v.clone()).unwrap();
    assert_eq!(out(leapfrog_step(&uniform, &m, 0, 1.0).unwrap()), v.scale(2.0));

    let pair = StateCarrier::hamiltonian(p.clone(), v.clone()).unwrap();
    assert_eq!(hamiltonian_step(&pair, &m, 0).unwrap(), pair);
}

#[test]
fn scalar_midpoint_with_identity_force() {
    // d = 1, f(p) = p, h = 0.5, (p_prev, p_cur) = (1, 1)
    let one = Tensor::new(&[1, 1], vec![1.0f64]).unwrap();
    let next = two_step_update(&one, &one, &one, TwoStepCoeffs::midpoint(0.5)).unwrap();
    assert_eq!(next.data(), &[2.0]);
    let back = two_step_recover(&one, &next, &one, TwoStepCoeffs::midpoint(0.5)).unwrap();
    assert_eq!(back.data(), &[1.0]);
}

#[test]
fn hamiltonian_update_is_staggered() {
    let mut m = random_model(BlockKind::Hamiltonian, 1, 42);
    boost(&mut m, 10.0);
    let c = carrier_for(BlockKind::Hamiltonian, 43);
    let StateCarrier::HamiltonianPair { p, q } = &c else { unreachable!() };
    let q_new = q.add(&attn_block(p, &m, 0).unwrap()).unwrap();
    let p_new = p.add(&mlp_block(&q_new, &m, 0).unwrap()).unwrap();
    assert_eq!(
        hamiltonian_step(&c, &m, 0).unwrap(),
        StateCarrier::HamiltonianPair { p: p_new, q: q_new }
    );
}

#[test]
fn fp32_round_trip_over_sixteen_layers() {
    for kind in BlockKind::REVERSIBLE {
        let cfg = ModelConfig::new(kind, 13, 8, 16, 2, 16);
        let m: Model<f32> = Model::init(cfg, 44).unwrap();
        let p0: Tensor<f32> = Tensor::randn(&[8, 16], 1.0, &mut seeded_rng(45));
        let start = StateCarrier::initial(p0, kind);
        let mut c = start.clone();
        for layer in 0..16 {
            c = step(&c, &m, layer).unwrap();
        }
        for layer in (0..16).rev() {
            c = inverse(&c, &m, layer).unwrap();
        }
        let err = c.max_rel_err(&start);
        assert!(err <= 1e-5, "{kind}: {err}");
    }
}

#[test]
fn logits_are_causal_for_every_kind() {
    let mut rng = seeded_rng(46);
    for kind in BlockKind::ALL {
        let mut m = random_model(kind, 3, 47);
        boost(&mut m, 5.0);
        let toks: Vec<usize> = (0..8).map(|_| rng.gen_range(0..13)).collect();
        let mut changed = toks.clone();
        changed[5] = (toks[5] + 1) % 13;
        let logits = |t: &[usize]| crate::engine::forward_logits(t, &m).unwrap();
        let (a, b) = (logits(&toks), logits(&changed));
        for t in 0..5 {
            assert_eq!(a.row(t), b.row(t), "{kind} position {t}");
        }
        assert_ne!(a.row(5), b.row(5));
    }
}

#[test]
fn wrong_carrier_variant_is_rejected() {
    let m = random_model(BlockKind::Midpoint, 2, 48);
    let pair = carrier_for(BlockKind::Hamiltonian, 49);
    assert!(step(&pair, &m, 0).is_err());
    let baseline = random_model(BlockKind::Baseline, 2, 48);
    assert!(matches!(
        step(&carrier_for(BlockKind::Midpoint, 1), &baseline, 0),
        Err(crate::Error::NotReversible(_))
    ));
}
