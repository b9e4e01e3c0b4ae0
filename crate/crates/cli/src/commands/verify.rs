use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use revlm::blocks::{inverse, step, BlockKind, Model, ModelConfig, StateCarrier};
use revlm::engine::{evaluate_loss, loss_and_grad, Backprop};
use revlm::numerics::{max_rel_err, seeded_rng};
use revlm::{DType, Scalar, Tensor};

use super::{dispatch_dtype, emit};
use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};
use crate::Common;

/// Finite-difference probes per model.
const FD_PROBES: usize = 24;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn equivalence_tol(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        DType::F64 => 1e-10,
    }
}

fn kinds(block: Option<&str>, reversible_only: bool) -> Result<Vec<BlockKind>> {
    match block {
        Some(b) => Ok(vec![b.parse().map_err(|e: revlm::Error| CliError::Usage(e.to_string()))?]),
        None if reversible_only => Ok(BlockKind::REVERSIBLE.to_vec()),
        None => Ok(BlockKind::ALL.to_vec()),
    }
}

struct Tally<'a> {
    out: &'a mut dyn Write,
    failures: usize,
}

impl Tally<'_> {
    fn record(&mut self, pass: bool, what: std::fmt::Arguments<'_>) -> Result<()> {
        if !pass {
            self.failures += 1;
        }
        emit(self.out, format_args!("{} {what}", if pass { "PASS" } else { "FAIL" }))
    }

    fn finish(self) -> Result<()> {
        match self.failures {
            0 => Ok(()),
            n => Err(CliError::Verification(n)),
        }
    }
}

fn random_model<T: Scalar>(kind: BlockKind, seed: u64, width: usize, heads: usize, layers: usize, ctx: usize) -> Result<Model<T>> {
    let cfg = ModelConfig::new(kind, 32, ctx, width, heads, layers)
        .with_dtype(T::DTYPE)
        .with_default_schedule(seed);
    Ok(Model::init(cfg, seed)?)
}

fn grad_check<T: Scalar>(model: &Model<T>, seed: u64, tally: &mut Tally<'_>) -> Result<()> {
    let cfg = &model.config;
    let kind = cfg.block_kind;
    let mut rng = seeded_rng(seed);
    let len = cfg.context_length.min(12) + 1;
    let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();

    if kind.is_reversible() {
        let (_, rev, _) = loss_and_grad(&seq, model, Backprop::Reversible)?;
        let (_, sto, _) = loss_and_grad(&seq, model, Backprop::Stored)?;
        let (err, name) = rev
            .tensors()
            .iter()
            .zip(sto.named_tensors())
            .map(|(a, (n, b))| (max_rel_err(*a, b), n))
            .fold((0.0, String::new()), |acc, e| if e.0 > acc.0 { e } else { acc });
        let tol = equivalence_tol(cfg.dtype);
        tally.record(
            err <= tol,
            format_args!("grad-check {kind} reversible-vs-stored max_rel_err={err:.3e} tol={tol:.0e} worst={name}"),
        )?;
    }

    let m64: Model<f64> = model.cast();
    let (_, grads, _) = loss_and_grad(&seq, &m64, Backprop::for_kind(kind))?;
    let seqs = [seq];
    let mut probe = m64.clone();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    let n_tensors = grads.tensors().len();
    for _ in 0..FD_PROBES {
        let ti = rng.gen_range(0..n_tensors);
        let i = rng.gen_range(0..grads.tensors()[ti].numel());
        let orig = m64.params.tensors()[ti].data()[i];
        probe.params.tensors_mut()[ti].data_mut()[i] = orig + FD_STEP;
        let up = evaluate_loss(&probe, &seqs)?;
        probe.params.tensors_mut()[ti].data_mut()[i] = orig - FD_STEP;
        let down = evaluate_loss(&probe, &seqs)?;
        probe.params.tensors_mut()[ti].data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        diff = diff.max((fd - grads.tensors()[ti].data()[i]).abs());
        scale = scale.max(fd.abs());
    }
    let err = if scale > 0.0 { diff / scale } else { diff };
    tally.record(
        err <= FD_TOL,
        format_args!("grad-check {kind} finite-difference probes={FD_PROBES} max_rel_err={err:.3e} tol={FD_TOL:.0e}"),
    )
}

fn grad_check_random<T: Scalar>(kinds: &[BlockKind], seed: u64, tally: &mut Tally<'_>) -> Result<()> {
    for &kind in kinds {
        let mut model = random_model::<T>(kind, seed, 16, 2, 4, 12)?;
        // Larger block weights make every layer contribute to the gradient.
        for b in &mut model.params.blocks {
            for t in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                *t = t.scale(T::from_f64_lossy(8.0));
            }
        }
        grad_check(&model, seed, tally)?;
    }
    Ok(())
}

fn grad_check_checkpoint<T: Scalar>(ck: &Checkpoint, seed: u64, tally: &mut Tally<'_>) -> Result<()> {
    grad_check(&ck.model::<T>()?, seed, tally)
}

pub fn cmd_grad_check(common: &Common, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = common.run_config()?;
    let mut tally = Tally { out, failures: 0 };
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            dispatch_dtype!(ck.config.dtype, grad_check_checkpoint(&ck, cfg.seed, &mut tally))?;
        }
        None => {
            let kinds = kinds(common.block.as_deref(), false)?;
            dispatch_dtype!(cfg.dtype, grad_check_random(&kinds, cfg.seed, &mut tally))?;
        }
    }
    tally.finish()
}

/// Steps through every layer, then inverts from the top and compares each
/// reconstructed carrier with the forward one. Returns the worst error and
/// the first (topmost) layer that exceeded `tol`.
fn invert<T: Scalar>(
    model: &Model<T>,
    seed: u64,
    corrupt: Option<usize>,
    tol: f64,
) -> Result<(f64, Option<usize>)> {
    let cfg = &model.config;
    let mut rng = seeded_rng(seed);
    let seq = cfg.context_length.min(16);
    let p0: Tensor<T> = Tensor::randn(&[seq, cfg.width], 1.0, &mut rng);
    let mut states = vec![StateCarrier::initial(p0, cfg.block_kind)];
    for layer in 0..cfg.layers {
        states.push(step(&states[layer], model, layer)?);
    }
    let mut c = states[cfg.layers].clone();
    let (mut worst, mut first_bad) = (0.0f64, None);
    for layer in (0..cfg.layers).rev() {
        c = inverse(&c, model, layer)?;
        if corrupt == Some(layer) {
            let t = &mut c.tensors_mut()[0];
            let bump = T::from_f64_lossy(1.0 + t.max_abs());
            t.data_mut()[0] += bump;
        }
        let err = c.max_rel_err(&states[layer]);
        worst = worst.max(err);
        if err > tol && first_bad.is_none() {
            first_bad = Some(layer);
        }
    }
    Ok((worst, first_bad))
}

fn invert_report<T: Scalar>(model: &Model<T>, seed: u64, corrupt: Option<usize>, tally: &mut Tally<'_>) -> Result<()> {
    let kind = model.config.block_kind;
    let tol = equivalence_tol(T::DTYPE);
    let (worst, bad) = invert(model, seed, corrupt, tol)?;
    let layers = model.config.layers;
    match bad {
        None => tally.record(
            true,
            format_args!("invert-check {kind} layers={layers} max_rel_err={worst:.3e} tol={tol:.0e}"),
        ),
        Some(layer) => tally.record(
            false,
            format_args!("invert-check {kind} layer={layer} max_rel_err={worst:.3e} tol={tol:.0e}"),
        ),
    }
}

fn invert_random<T: Scalar>(kinds: &[BlockKind], seed: u64, corrupt: Option<usize>, tally: &mut Tally<'_>) -> Result<()> {
    for &kind in kinds {
        let model = random_model::<T>(kind, seed, 32, 4, 16, 16)?;
        invert_report(&model, seed, corrupt, tally)?;
    }
    Ok(())
}

fn invert_checkpoint<T: Scalar>(ck: &Checkpoint, seed: u64, corrupt: Option<usize>, tally: &mut Tally<'_>) -> Result<()> {
    invert_report(&ck.model::<T>()?, seed, corrupt, tally)
}

pub fn cmd_invert_check(
    common: &Common,
    checkpoint: Option<&Path>,
    corrupt: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = common.run_config()?;
    let mut tally = Tally { out, failures: 0 };
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !ck.config.block.is_reversible() {
                return Err(CliError::Usage(format!("`{}` models are not invertible", ck.config.block)));
            }
            dispatch_dtype!(ck.config.dtype, invert_checkpoint(&ck, cfg.seed, corrupt, &mut tally))?;
        }
        None => {
            let kinds = kinds(common.block.as_deref(), true)?;
            if let Some(k) = kinds.iter().find(|k| !k.is_reversible()) {
                return Err(CliError::Usage(format!("`{k}` models are not invertible")));
            }
            dispatch_dtype!(cfg.dtype, invert_random(&kinds, cfg.seed, corrupt, &mut tally))?;
        }
    }
    tally.finish()
}
