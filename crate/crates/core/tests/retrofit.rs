mod common;

use common::{model, tokens};
use proptest::prelude::*;
use revlm::blocks::{embed, layer_fn, BlockKind, Model, ModelConfig, StateCarrier};
use revlm::engine::forward_logits;
use revlm::numerics::{max_rel_err, seeded_rng};
use revlm::retrofit::{
    convert, empirical_lipschitz, estimate_prev, fidelity, linear_error_bound, retrofit_inverse, retrofit_step,
    spectral_norm, RetrofitConfig,
};
use revlm::{DType, Tensor};

fn teacher(d: usize, layers: usize, scale: f64, seed: u64) -> Model<f64> {
    let cfg = ModelConfig::new(BlockKind::Baseline, 32, 12, d, 4, layers).with_dtype(DType::F64);
    model(cfg, seed, scale)
}

#[test]
fn estimator_error_shrinks_on_contractions() {
    let mut rng = seeded_rng(1);
    for scale in [1.0, 2.0, 4.0] {
        let m = teacher(16, 2, scale, 2);
        let truth = embed(&tokens(12, 32, 3), &m).unwrap();
        let lip = empirical_lipschitz(&m, 0, &truth, 32, 0.1 * truth.norm(), &mut rng).unwrap();
        assert!(lip < 0.8, "scale {scale}: {lip}");
        let cur = truth.add(&layer_fn(&truth, &m, 0).unwrap()).unwrap();
        let mut last = cur.sub(&truth).unwrap().norm();
        for k in 1..=6 {
            let err = estimate_prev(&cur, &m, 0, k).unwrap().sub(&truth).unwrap().norm();
            assert!(err <= 0.9 * last, "scale {scale} k {k}: {err} after {last}");
            last = err;
        }
    }
}

#[test]
fn unit_schedule_student_tracks_small_update_teacher() {
    let t = teacher(16, 4, 1.0, 4);
    let mut rc = RetrofitConfig::unit(4);
    rc.k_fixed_point = 4;
    let s = convert(&t, &rc).unwrap();
    assert_eq!(s.params, t.params);
    assert_eq!(s.config.block_kind, BlockKind::Retrofit);
    let seqs: Vec<Vec<usize>> = (0..4).map(|i| tokens(12, 32, 10 + i)).collect();
    let fid = fidelity(&t, &s, &seqs).unwrap();
    assert!(fid.agreement >= 0.9, "{fid:?}");
    let lt = forward_logits(&seqs[0], &t).unwrap();
    let ls = forward_logits(&seqs[0], &s).unwrap();
    assert!(max_rel_err(&ls, &lt) < 0.1);
}

#[test]
fn first_student_layer_is_the_teacher_residual_step() {
    let t = teacher(16, 3, 4.0, 5);
    let s = convert(&t, &RetrofitConfig::new(3, 9)).unwrap();
    let p0 = embed(&tokens(8, 32, 6), &s).unwrap();
    let c = retrofit_step(&StateCarrier::initial(p0.clone(), BlockKind::Retrofit), &s, 0).unwrap();
    let expect = p0.add(&layer_fn(&p0, &t, 0).unwrap()).unwrap();
    assert!(max_rel_err(c.output(), &expect) <= 1e-14);
}

fn random_matrix(d: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[d, d], 1.0, &mut seeded_rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn retrofit_steps_invert_exactly(seed in 0u64..1000, scale in 0.5f64..6.0, k in 1usize..4) {
        let t = teacher(8, 4, scale, seed);
        let mut rc = RetrofitConfig::new(4, seed);
        rc.k_fixed_point = k;
        let s = convert(&t, &rc).unwrap();
        let mut rng = seeded_rng(seed ^ 1);
        let prev = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let cur = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let c0 = StateCarrier::two_step(prev, cur).unwrap();
        for layer in 1..4 {
            let back = retrofit_inverse(&retrofit_step(&c0, &s, layer).unwrap(), &s, layer).unwrap();
            prop_assert!(back.max_rel_err(&c0) <= 1e-10);
        }
    }

    #[test]
    fn linear_error_scales_with_cube_of_norm(seed in 0u64..1000, s in 0.1f64..3.0, a in -1.5f64..1.5) {
        let m = random_matrix(6, seed);
        let p = Tensor::randn(&[6], 1.0, &mut seeded_rng(seed ^ 7));
        let unit = Tensor::from_fn(&[6, 6], |i| m.data()[i] / spectral_norm(&m));
        let scaled = Tensor::from_fn(&[6, 6], |i| unit.data()[i] * s);
        let r1 = linear_error_bound(&unit, a, &p).unwrap();
        let rs = linear_error_bound(&scaled, a, &p).unwrap();
        prop_assert!((rs.measured - s.powi(3) * r1.measured).abs() <= 1e-10 * (1.0 + rs.measured));
        prop_assert!(rs.closed_form_gap <= 1e-12 * (1.0 + rs.closed_form));
        prop_assert!(rs.measured <= rs.bound * (1.0 + 1e-12));
    }

    #[test]
    fn unit_coefficient_matches_printed_form(seed in 0u64..1000) {
        let m = random_matrix(5, seed);
        let p = Tensor::randn(&[5], 1.0, &mut seeded_rng(seed ^ 3));
        let r = linear_error_bound(&m, 1.0, &p).unwrap();
        prop_assert!((r.measured - r.printed_closed_form).abs() <= 1e-10 * (1.0 + r.measured));
    }
}
