//! Converting a trained residual model into a reversible one.
//!
//! A residual stack `p_{j+1} = p_j + f_j(p_j)` is rewritten, for a frozen
//! coefficient `a_j`, as
//!
//! ```text
//! p̂_{j-1} = estimate of p_{j-1} from p_j   (fixed-point iteration on f_{j-1})
//! p_{j+1}  = a_j p_{j-1} + (1 − a_j) p_j + h·(f_j(p_j) + a_j f_{j-1}(p̂_{j-1}))
//! ```
//!
//! When the estimate is exact this reproduces the residual update. The force
//! in brackets depends on `p_j` alone, so the update is a midpoint-(a) step and
//! `p_{j-1}` is recovered exactly from `(p_j, p_{j+1})`.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::blocks::layers::{layer_backward, layer_forward, LayerCache};
use crate::blocks::{layer_fn, BlockKind, Model, Params, StateCarrier};
use crate::engine::{forward_logits, forward_stored, loss_and_grad_with, AdamW, Backprop, OptimConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Fixed-point iterates may not grow beyond this multiple of the starting norm.
pub const FIXED_POINT_GUARD: f64 = 1e3;

/// `x⁰ = p`, `x^{m+1} = p − f(x^m)`; returns `x^k`.
pub fn fixed_point_estimate<T: Scalar>(
    p_cur: &Tensor<T>,
    k: usize,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("fixed-point iterations must be at least 1".into()));
    }
    let start = p_cur.norm();
    let mut x = p_cur.clone();
    for m in 1..=k {
        x = p_cur.sub(&f(&x)?)?;
        check_growth(&x, start, m)?;
    }
    Ok(x)
}

fn check_growth<T: Scalar>(x: &Tensor<T>, start: f64, iterate: usize) -> Result<()> {
    let n = x.norm();
    let growth = if start > 0.0 { n / start } else if n == 0.0 { 0.0 } else { f64::INFINITY };
    if !n.is_finite() || growth > FIXED_POINT_GUARD {
        return Err(Error::FixedPointDiverged { iterate, growth });
    }
    Ok(())
}

/// Estimate of the state entering layer `prev_layer` given the state it produced.
pub fn estimate_prev<T: Scalar>(
    p_cur: &Tensor<T>,
    model: &Model<T>,
    prev_layer: usize,
    k: usize,
) -> Result<Tensor<T>> {
    fixed_point_estimate(p_cur, k, |x| layer_fn(x, model, prev_layer))
}

/// Composite force `f_j(p) + a_j f_{j-1}(p̂_{j-1}(p))`; plain `f_0` at the first layer.
pub fn retrofit_force<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    retrofit_force_forward(p, model, layer).map(|(f, _)| f)
}

/// Caches of one composite force evaluation.
#[derive(Debug, Clone)]
pub struct RetrofitForceCache<T: Scalar> {
    main: LayerCache<T>,
    /// `f_{j-1}` evaluated at `x⁰ … x^k`.
    prev: Vec<LayerCache<T>>,
    a: f64,
}

impl<T: Scalar> RetrofitForceCache<T> {
    pub fn size_bytes(&self) -> usize {
        self.main.size_bytes() + self.prev.iter().map(|c| c.size_bytes()).sum::<usize>()
    }

    pub fn tensor_count(&self) -> usize {
        self.main.tensor_count() + self.prev.iter().map(|c| c.tensor_count()).sum::<usize>()
    }
}

pub fn retrofit_force_forward<T: Scalar>(
    p: &Tensor<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<(Tensor<T>, RetrofitForceCache<T>)> {
    let cfg = &model.config;
    let (mut out, main) = layer_forward(p, model.block(layer), cfg.heads, cfg.ln_eps)?;
    let a = cfg.a_at(layer);
    let mut prev = Vec::new();
    if layer > 0 {
        let bp = model.block(layer - 1);
        let k = cfg.fixed_point_iters.max(1);
        let start = p.norm();
        let mut x = p.clone();
        for m in 0..=k {
            let (fx, c) = layer_forward(&x, bp, cfg.heads, cfg.ln_eps)?;
            prev.push(c);
            if m == k {
                out.axpy(T::from_f64_lossy(a), &fx)?;
            } else {
                x = p.sub(&fx)?;
                check_growth(&x, start, m + 1)?;
            }
        }
    }
    Ok((out, RetrofitForceCache { main, prev, a }))
}

/// VJP of [`retrofit_force_forward`]; gradients land in blocks `layer` and `layer − 1`.
pub fn retrofit_force_backward<T: Scalar>(
    cache: &RetrofitForceCache<T>,
    model: &Model<T>,
    layer: usize,
    g: &Tensor<T>,
    grads: &mut Params<T>,
) -> Result<Tensor<T>> {
    let heads = model.config.heads;
    let mut gp = layer_backward(&cache.main, model.block(layer), heads, g, &mut grads.blocks[layer])?;
    if let Some((last, rest)) = cache.prev.split_last() {
        let bp = model.block(layer - 1);
        let gb = &mut grads.blocks[layer - 1];
        let mut gx = layer_backward(last, bp, heads, &g.scale(T::from_f64_lossy(cache.a)), gb)?;
        for c in rest.iter().rev() {
            gp.add_assign(&gx)?;
            let neg = gx.scale(-T::one());
            gx = layer_backward(c, bp, heads, &neg, gb)?;
        }
        gp.add_assign(&gx)?;
    }
    Ok(gp)
}

fn expect_retrofit<T: Scalar>(model: &Model<T>) -> Result<()> {
    if model.config.block_kind == BlockKind::Retrofit {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "expected a retrofitted model, got `{}`",
            model.config.block_kind
        )))
    }
}

/// One retrofitted layer on the carrier `(p_{j-1}, p_j)`.
pub fn retrofit_step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    expect_retrofit(model)?;
    crate::blocks::step(carrier, model, layer)
}

/// Recovers `(p_{j-1}, p_j)` from `(p_j, p_{j+1})`.
pub fn retrofit_inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    expect_retrofit(model)?;
    crate::blocks::inverse(carrier, model, layer)
}

/// Settings of a conversion and its KL fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrofitConfig {
    pub k_fixed_point: usize,
    /// One coefficient per layer; the first is ignored (layer 0 has no predecessor).
    pub a_schedule: Vec<f64>,
    pub kl_steps: usize,
    pub kl_learning_rate: f64,
    /// Sequences per fine-tuning step.
    pub batch_size: usize,
    /// Multiplier `h` on the composite force.
    pub step_size: f64,
}

impl RetrofitConfig {
    /// Random frozen schedule with `a_0 = 1`.
    pub fn new(layers: usize, seed: u64) -> Self {
        RetrofitConfig {
            k_fixed_point: 1,
            a_schedule: crate::blocks::retrofit_a_schedule(layers, seed),
            kl_steps: 200,
            kl_learning_rate: 3e-4,
            batch_size: 4,
            step_size: 1.0,
        }
    }

    /// `a = 1` at every layer.
    pub fn unit(layers: usize) -> Self {
        RetrofitConfig {
            a_schedule: vec![1.0; layers],
            ..Self::new(layers, 0)
        }
    }
}

/// Student model with the teacher's weights and the retrofitted update rule.
pub fn convert<T: Scalar>(teacher: &Model<T>, cfg: &RetrofitConfig) -> Result<Model<T>> {
    if teacher.config.block_kind != BlockKind::Baseline {
        return Err(Error::InvalidArgument(format!(
            "only residual baselines can be retrofitted, got `{}`",
            teacher.config.block_kind
        )));
    }
    let mut config = teacher.config.clone();
    config.block_kind = BlockKind::Retrofit;
    config.a_schedule = cfg.a_schedule.clone();
    if let Some(first) = config.a_schedule.first_mut() {
        *first = 1.0;
    }
    config.fixed_point_iters = cfg.k_fixed_point;
    config.step_size = cfg.step_size;
    Model::from_params(config, teacher.params.clone())
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Mean over positions of `KL(softmax(student) ‖ softmax(teacher))`, with the
/// gradient with respect to the student logits.
pub fn kl_divergence<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    student.ensure_same_shape(teacher, "kl_divergence")?;
    let rows = student.rows();
    let mut grad = Tensor::zeros_like(student);
    let mut total = 0.0;
    for i in 0..rows {
        let ls = log_softmax_row(student.row(i));
        let lt = log_softmax_row(teacher.row(i));
        let kl: f64 = ls.iter().zip(&lt).map(|(s, t)| s.exp() * (s - t)).sum();
        total += kl;
        for ((g, s), t) in grad.row_mut(i).iter_mut().zip(&ls).zip(&lt) {
            *g = T::from_f64_lossy(s.exp() * (s - t - kl) / rows as f64);
        }
    }
    let kl = total / rows as f64;
    if !kl.is_finite() {
        return Err(Error::NonFinite { op: "kl_divergence" });
    }
    Ok((kl.max(0.0), grad))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of positions whose top-1 predictions agree.
pub fn top1_matches<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<usize> {
    student.ensure_same_shape(teacher, "top1_matches")?;
    Ok((0..student.rows())
        .filter(|&i| argmax(student.row(i)) == argmax(teacher.row(i)))
        .count())
}

/// Held-out comparison of student and teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub kl: f64,
    pub agreement: f64,
}

pub fn fidelity<T: Scalar>(teacher: &Model<T>, student: &Model<T>, seqs: &[Vec<usize>]) -> Result<Fidelity> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no held-out sequences".into()));
    }
    let (mut kl, mut matches, mut positions) = (0.0, 0, 0);
    for seq in seqs {
        let t = forward_logits(seq, teacher)?;
        let s = forward_logits(seq, student)?;
        kl += kl_divergence(&s, &t)?.0;
        matches += top1_matches(&s, &t)?;
        positions += seq.len();
    }
    Ok(Fidelity {
        kl: kl / seqs.len() as f64,
        agreement: matches as f64 / positions as f64,
    })
}

/// Relative estimator error `‖p̂_{j-1}(s_j) − s_{j-1}‖ / ‖s_{j-1}‖` along the
/// student's own trajectory, averaged over sequences, for `j = 1 … L−1`.
pub fn estimator_errors<T: Scalar>(student: &Model<T>, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
    expect_retrofit(student)?;
    let layers = student.config.layers;
    let k = student.config.fixed_point_iters;
    let mut errs = vec![0.0; layers.saturating_sub(1)];
    for seq in seqs {
        let (_, trace, _) = forward_stored(seq, student)?;
        for j in 1..layers {
            let est = estimate_prev(&trace.states[j], student, j - 1, k)?;
            let truth = &trace.states[j - 1];
            errs[j - 1] += est.sub(truth)?.norm() / truth.norm().max(f64::MIN_POSITIVE);
        }
    }
    let n = seqs.len().max(1) as f64;
    Ok(errs.into_iter().map(|e| e / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrofitReport {
    /// Per-layer estimator errors before and after fine-tuning (layers 1…L−1).
    pub err_pre: Vec<f64>,
    pub err_post: Vec<f64>,
    pub kl_pre: f64,
    pub kl_post: f64,
    pub agreement_pre: f64,
    pub agreement_post: f64,
    /// Held-out KL after each evaluation interval, starting with `kl_pre`.
    pub kl_trace: Vec<f64>,
}

impl RetrofitReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,err_pre,err_post\n");
        for (i, (a, b)) in self.err_pre.iter().zip(&self.err_post).enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, a, b);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "kl_pre={}\nkl_post={}\nagreement={}\nagreement_post={}\n",
            self.kl_pre, self.kl_post, self.agreement_pre, self.agreement_post
        )
    }

    pub fn kl_reduction(&self) -> f64 {
        if self.kl_pre > 0.0 {
            1.0 - self.kl_post / self.kl_pre
        } else {
            0.0
        }
    }
}

/// Fine-tunes `student` towards the frozen `teacher` by minimizing
/// `KL(student ‖ teacher)` with reversible backprop. The `a` schedule stays frozen.
pub fn kl_finetune<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    train: &[Vec<usize>],
    heldout: &[Vec<usize>],
    cfg: &RetrofitConfig,
    eval_every: usize,
) -> Result<RetrofitReport> {
    expect_retrofit(student)?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::InvalidArgument("teacher and student vocabularies differ".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("no fine-tuning sequences".into()));
    }
    let before = fidelity(teacher, student, heldout)?;
    let err_pre = estimator_errors(student, heldout)?;
    let optim = OptimConfig {
        lr: cfg.kl_learning_rate,
        min_lr: cfg.kl_learning_rate * 0.1,
        warmup_steps: (cfg.kl_steps / 20).max(1),
        total_steps: cfg.kl_steps,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(optim, &student.params);
    let mut kl_trace = vec![before.kl];
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.kl_steps {
        let mut total = student.params.zeros_like();
        let mut loss = 0.0;
        for b in 0..batch {
            let seq = &train[(step * batch + b) % train.len()];
            let target = forward_logits(seq, teacher)?;
            let (l, g, _) = loss_and_grad_with(seq, student, Backprop::Reversible, |logits| {
                kl_divergence(logits, &target)
            })?;
            loss += l;
            total.axpy(T::one(), &g)?;
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        total.scale(T::from_f64_lossy(1.0 / batch as f64));
        opt.update(&mut student.params, &mut total);
        if eval_every > 0 && (step + 1) % eval_every == 0 {
            kl_trace.push(fidelity(teacher, student, heldout)?.kl);
        }
    }
    let after = fidelity(teacher, student, heldout)?;
    let err_post = estimator_errors(student, heldout)?;
    Ok(RetrofitReport {
        err_pre,
        err_post,
        kl_pre: before.kl,
        kl_post: after.kl,
        agreement_pre: before.agreement,
        agreement_post: after.agreement,
        kl_trace,
    })
}

/// Largest `‖f(x) − f(y)‖ / ‖x − y‖` over random perturbations `y = x + δ`.
pub fn empirical_lipschitz<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    x: &Tensor<T>,
    probes: usize,
    radius: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let fx = layer_fn(x, model, layer)?;
    let mut best: f64 = 0.0;
    for _ in 0..probes {
        let dir: Tensor<T> = Tensor::randn(x.shape(), 1.0, rng);
        let scale = radius * rng.gen_range(0.1..1.0) / dir.norm();
        let y = x.add(&dir.scale(T::from_f64_lossy(scale)))?;
        let fy = layer_fn(&y, model, layer)?;
        let num = fy.sub(&fx)?.norm();
        let den = y.sub(x)?.norm();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

fn matvec(a: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

fn vnorm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Tensor<f64>) -> f64 {
    let at = a.transpose().expect("rank-2 matrix");
    let n = a.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut sigma2 = 0.0;
    for _ in 0..5000 {
        let w = matvec(&at, &matvec(a, &v));
        let nw = vnorm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw / vnorm(&v);
        v = w.into_iter().map(|x| x / nw).collect();
        if (next - sigma2).abs() <= 1e-15 * next {
            sigma2 = next;
            break;
        }
        sigma2 = next;
    }
    sigma2.sqrt()
}

/// Exact linear residual stack versus its retrofitted approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearErrorReport {
    /// `‖p̂_{j+1} − p_{j+1}‖`, measured directly.
    pub measured: f64,
    /// `‖−a A³ p_{j-1}‖`, the exact closed form of the difference.
    pub closed_form: f64,
    /// `‖(p̂_{j+1} − p_{j+1}) − (−a A³ p_{j-1})‖`.
    pub closed_form_gap: f64,
    /// `|a| ‖A‖³ ‖p_{j-1}‖`.
    pub bound: f64,
    /// `‖A (I − a(I − A²)) p_{j-1}‖`, an alternative form that agrees only at `a = 1`.
    pub printed_closed_form: f64,
    /// `‖A‖ ‖(1 − a)I − aA²‖ ‖p_{j-1}‖`, the bound that goes with the alternative form.
    pub printed_bound: f64,
    pub norm_a: f64,
}

/// Builds `p_j = (I + A) p_{j-1}`, the exact two-layer update
/// `p_{j+1} = a p_{j-1} + (1 − a) p_j + A p_j + a A p_{j-1}` and its approximation
/// with `A p_{j-1}` replaced by `A (p_j − A p_j)`, and compares them.
pub fn linear_error_bound(a_mat: &Tensor<f64>, a: f64, p_prev: &Tensor<f64>) -> Result<LinearErrorReport> {
    let d = p_prev.numel();
    if a_mat.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "linear_error_bound",
            lhs: a_mat.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    let p0 = p_prev.data();
    let ap0 = matvec(a_mat, p0);
    let p1: Vec<f64> = p0.iter().zip(&ap0).map(|(x, y)| x + y).collect();
    let ap1 = matvec(a_mat, &p1);
    let est: Vec<f64> = p1.iter().zip(&ap1).map(|(x, y)| x - y).collect();
    let a_est = matvec(a_mat, &est);
    let exact: Vec<f64> = (0..d)
        .map(|i| a * p0[i] + (1.0 - a) * p1[i] + ap1[i] + a * ap0[i])
        .collect();
    let approx: Vec<f64> = (0..d)
        .map(|i| a * p0[i] + (1.0 - a) * p1[i] + ap1[i] + a * a_est[i])
        .collect();
    let diff: Vec<f64> = approx.iter().zip(&exact).map(|(x, y)| x - y).collect();
    let a2p = matvec(a_mat, &ap0);
    let a3p = matvec(a_mat, &a2p);
    let closed: Vec<f64> = a3p.iter().map(|v| -a * v).collect();
    let gap: Vec<f64> = diff.iter().zip(&closed).map(|(x, y)| x - y).collect();
    // A (I − a(I − A²)) p = (1 − a) A p + a A³ p
    let printed: Vec<f64> = (0..d).map(|i| (1.0 - a) * ap0[i] + a * a3p[i]).collect();
    let norm_a = spectral_norm(a_mat);
    let pn = vnorm(p0);
    let a2 = crate::numerics::matmul(a_mat, a_mat)?;
    let inner = Tensor::from_fn(&[d, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        let id = if i == j { 1.0 - a } else { 0.0 };
        id - a * a2.data()[idx]
    });
    Ok(LinearErrorReport {
        measured: vnorm(&diff),
        closed_form: vnorm(&closed),
        closed_form_gap: vnorm(&gap),
        bound: a.abs() * norm_a.powi(3) * pn,
        printed_closed_form: vnorm(&printed),
        printed_bound: norm_a * spectral_norm(&inner) * pn,
        norm_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use crate::numerics::{seeded_rng, DType};

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn fixed_point_on_scalar_linear_map() {
        let p = scalar(1.0);
        let expect = [0.5, 0.75, 0.625];
        for (k, e) in (1..=3).zip(expect) {
            let x = fixed_point_estimate(&p, k, |x| Ok(x.scale(0.5))).unwrap();
            assert!((x.data()[0] - e).abs() < 1e-15);
            let err = (x.data()[0] - 2.0 / 3.0).abs();
            assert!((err - (1.0 / 3.0) / 2f64.powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_point_with_zero_map_is_identity() {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        for k in 1..4 {
            let x = fixed_point_estimate(&p, k, |x| Ok(Tensor::zeros_like(x))).unwrap();
            assert_eq!(x, p);
        }
    }

    #[test]
    fn fixed_point_divergence_is_reported() {
        let r = fixed_point_estimate(&scalar(1.0), 20, |x| Ok(x.scale(3.0)));
        assert!(matches!(r, Err(Error::FixedPointDiverged { .. })));
    }

    #[test]
    fn scalar_linear_analysis_example() {
        let r = linear_error_bound(&Tensor::new(&[1, 1], vec![0.1]).unwrap(), 1.0, &scalar(1.0)).unwrap();
        assert!((r.measured - 0.001).abs() < 1e-15);
        assert!((r.printed_closed_form - 0.001).abs() < 1e-15);
        assert!(r.measured <= r.bound * (1.0 + 1e-12));
    }

    #[test]
    fn zero_matrix_gives_zero_error() {
        let r = linear_error_bound(&Tensor::zeros(&[3, 3]), 0.7, &Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(r.measured, 0.0);
        assert_eq!(r.bound, 0.0);
    }

    #[test]
    fn printed_bound_fails_away_from_unit_coefficient() {
        // a = 0.5, A = 1: true error 0.5, printed bound |0.5 − 0.5| = 0
        let r = linear_error_bound(&Tensor::new(&[1, 1], vec![1.0]).unwrap(), 0.5, &scalar(1.0)).unwrap();
        assert!((r.measured - 0.5).abs() < 1e-15);
        assert!(r.printed_bound < r.measured);
        assert!(r.measured <= r.bound * (1.0 + 1e-12));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, -5.0]]).unwrap();
        assert!((spectral_norm(&a) - 5.0).abs() < 1e-10);
    }

    #[test]
    fn kl_is_zero_for_identical_logits_and_gradient_matches_fd() {
        let mut rng = seeded_rng(4);
        let s: Tensor<f64> = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let t: Tensor<f64> = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert!(kl_divergence(&s, &s).unwrap().0.abs() < 1e-15);
        let (_, g) = kl_divergence(&s, &t).unwrap();
        let fd = crate::verify::central_difference(&s, 1e-6, |x| kl_divergence(x, &t).unwrap().0);
        assert!(crate::numerics::max_rel_err(&g, &fd) < 1e-8);
    }

    #[test]
    fn convert_rejects_reversible_teacher() {
        let cfg = ModelConfig::new(BlockKind::Midpoint, 7, 6, 8, 2, 3).with_dtype(DType::F64);
        let m: Model<f64> = Model::init(cfg, 0).unwrap();
        assert!(convert(&m, &RetrofitConfig::unit(3)).is_err());
    }
}
