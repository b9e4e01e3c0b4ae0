#![allow(dead_code)]

use rand::Rng as _;
use revlm::blocks::{BlockKind, GradientBundle, Model, ModelConfig, Params};
use revlm::numerics::{max_rel_err, seeded_rng};
use revlm::{DType, Scalar};

pub fn config(kind: BlockKind, d: usize, heads: usize, layers: usize, ctx: usize, dtype: DType) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, 17, ctx, d, heads, layers).with_dtype(dtype);
    if matches!(kind, BlockKind::Midpoint | BlockKind::MidpointA | BlockKind::Leapfrog | BlockKind::Retrofit) {
        cfg = cfg.with_step_size(0.5);
    }
    cfg.fixed_point_iters = 2;
    cfg.with_default_schedule(7)
}

/// Random model with block weights large enough that every layer matters.
pub fn model<T: Scalar>(cfg: ModelConfig, seed: u64, block_scale: f64) -> Model<T> {
    let mut m = Model::<T>::init(cfg, seed).unwrap();
    let mut rng = seeded_rng(seed ^ 0x5eed);
    for b in &mut m.params.blocks {
        for t in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
            t.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(v.as_f64() * block_scale));
        }
        for t in [&mut b.ln1_gain, &mut b.ln2_gain] {
            t.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(rng.gen_range(0.7..1.3)));
        }
        for t in [&mut b.b1, &mut b.b2, &mut b.ln1_bias, &mut b.ln2_bias] {
            t.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(rng.gen_range(-0.1..0.1)));
        }
    }
    m
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Worst per-tensor max-norm relative error, with the name of the offender.
pub fn worst_grad_err<T: Scalar>(a: &GradientBundle<T>, b: &GradientBundle<T>) -> (f64, String) {
    a.tensors()
        .iter()
        .zip(b.named_tensors())
        .map(|(x, (name, y))| (max_rel_err(*x, y), name))
        .fold((0.0, String::new()), |acc, e| if e.0 > acc.0 { e } else { acc })
}

/// Central differences of `loss` over every parameter coordinate.
pub fn fd_gradient(model: &Model<f64>, h: f64, loss: impl Fn(&Model<f64>) -> f64) -> Params<f64> {
    let mut probe = model.clone();
    let mut out = model.params.zeros_like();
    let n_tensors = model.params.tensors().len();
    for ti in 0..n_tensors {
        let len = model.params.tensors()[ti].numel();
        for i in 0..len {
            let orig = model.params.tensors()[ti].data()[i];
            probe.params.tensors_mut()[ti].data_mut()[i] = orig + h;
            let fp = loss(&probe);
            probe.params.tensors_mut()[ti].data_mut()[i] = orig - h;
            let fm = loss(&probe);
            probe.params.tensors_mut()[ti].data_mut()[i] = orig;
            out.tensors_mut()[ti].data_mut()[i] = (fp - fm) / (2.0 * h);
        }
    }
    out
}
