use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use revlm::blocks::{BlockKind, Model, ModelConfig};
use revlm::data::ByteTokenizer;
use revlm::engine::{loss_and_grad, max_batch_under_budget, Backprop};
use revlm::numerics::seeded_rng;
use revlm::Scalar;

use super::{create_dir, dispatch_dtype, emit, write_file};
use crate::error::{CliError, Result};
use crate::Common;

pub const BENCH_HEADER: &str = "depth,kind,activations_stored,peak_bytes,step_ms,max_batch";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub depth: usize,
    pub kind: BlockKind,
    pub activations_stored: usize,
    pub peak_bytes: usize,
    pub step_ms: f64,
    pub max_batch: usize,
}

/// One forward and backward pass per (depth, kind) on a random byte sequence.
pub fn bench<T: Scalar>(
    kinds: &[BlockKind],
    depths: &[usize],
    width: usize,
    seq: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let heads = if width.is_multiple_of(4) { 4 } else { 1 };
    let mut rng = seeded_rng(seed);
    let tokens: Vec<usize> = (0..seq + 1).map(|_| rng.gen_range(0..ByteTokenizer::VOCAB_SIZE)).collect();
    let mut rows = Vec::new();
    for &depth in depths {
        if depth < 2 {
            return Err(CliError::Usage(format!("depth {depth} is below 2")));
        }
        for &kind in kinds {
            let cfg = ModelConfig::new(kind, ByteTokenizer::VOCAB_SIZE, seq, width, heads, depth)
                .with_dtype(T::DTYPE)
                .with_default_schedule(seed);
            let model = Model::<T>::init(cfg, seed)?;
            let t0 = Instant::now();
            let (_, _, ledger) = loss_and_grad(&tokens, &model, Backprop::for_kind(kind))?;
            let step_ms = t0.elapsed().as_secs_f64() * 1e3;
            rows.push(BenchRow {
                depth,
                kind,
                activations_stored: ledger.tensors_stored,
                peak_bytes: ledger.peak_bytes,
                step_ms,
                max_batch: max_batch_under_budget(budget, &ledger),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3},{}\n",
            r.depth, r.kind, r.activations_stored, r.peak_bytes, r.step_ms, r.max_batch
        ));
    }
    out
}

pub fn cmd_bench(
    common: &Common,
    depths: &[usize],
    width: usize,
    seq: usize,
    budget: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = common.run_config()?;
    let kinds = match &common.block {
        Some(_) => vec![cfg.block],
        None => BlockKind::ALL.to_vec(),
    };
    let rows = dispatch_dtype!(cfg.dtype, bench(&kinds, depths, width, seq, budget, cfg.seed))?;
    let csv = bench_csv(&rows);
    if common.out.is_some() {
        create_dir(&cfg.out)?;
        write_file(&cfg.out.join(BENCH_FILE), &csv)?;
    }
    out.write_all(csv.as_bytes()).map_err(|e| CliError::io("<stdout>", e))?;
    emit(out, format_args!("budget_bytes={budget}"))
}
