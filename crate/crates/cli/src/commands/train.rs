use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use revlm::blocks::Model;
use revlm::data::{sample_windows, strided_windows, Dataset};
use revlm::engine::{evaluate_loss, train_step, AdamW, Backprop};
use revlm::numerics::seeded_rng;
use revlm::Scalar;

use super::{create_dir, dispatch_dtype, emit, load_corpus};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "val_loss", "tokens_per_sec", "activations_stored"];
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rvlm";

/// Seed of the batch drawn at `step`, so a resumed run sees the same data.
fn batch_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn dataset(cfg: &RunConfig, text: &str) -> Result<Dataset> {
    let tokens = cfg.encode(text)?;
    Dataset::split(tokens, cfg.val_fraction, cfg.context + 1).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub val_loss: f64,
}

fn metrics_writer(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(METRICS_HEADER).map_err(|e| csv_error(path, e))?;
    }
    Ok(w)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}

fn train<T: Scalar>(
    cfg: &RunConfig,
    text: &str,
    resume: Option<&Checkpoint>,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let ds = dataset(cfg, text)?;
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            let model: Model<T> = ck.model()?;
            let mut opt = ck.optimizer(&model).ok_or_else(|| {
                CliError::Usage("checkpoint has no optimizer state to resume from".into())
            })?;
            opt.config = cfg.optim_config();
            (model, opt, ck.step)
        }
        None => {
            let model = Model::<T>::init(cfg.model_config()?, cfg.seed)?;
            let opt = AdamW::new(cfg.optim_config(), &model.params);
            (model, opt, 0)
        }
    };
    let mode = Backprop::for_kind(cfg.block);
    let window = cfg.context + 1;
    let val = strided_windows(&ds.val, window, cfg.eval_windows.max(1));
    create_dir(&cfg.out)?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let mut metrics = metrics_writer(&metrics_path, resume.is_some())?;
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    let mut summary = TrainSummary {
        steps: start,
        final_loss: f64::NAN,
        val_loss: f64::NAN,
    };
    for step in start..cfg.steps {
        let mut rng = seeded_rng(batch_seed(cfg.seed, step));
        let batch = sample_windows(&ds.train, window, cfg.batch_size.max(1), &mut rng);
        let t0 = Instant::now();
        let stats = train_step(&mut model, &batch, &mut opt, mode)?;
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        let done = step + 1;
        let last = done == cfg.steps;
        summary.steps = done;
        summary.final_loss = stats.loss;
        if done % cfg.log_every.max(1) == 0 || last {
            let evaluate = last || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
            let val_loss = if evaluate {
                let v = evaluate_loss(&model, &val)?;
                summary.val_loss = v;
                v.to_string()
            } else {
                String::new()
            };
            let tps = (batch.len() * cfg.context) as f64 / secs;
            metrics
                .write_record([
                    done.to_string(),
                    stats.loss.to_string(),
                    val_loss,
                    format!("{tps:.1}"),
                    stats.ledger.tensors_stored.to_string(),
                ])
                .map_err(|e| csv_error(&metrics_path, e))?;
            metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || last {
            Checkpoint::from_model(&model, Some(&opt), cfg, done).save(&ck_path)?;
        }
    }
    emit(
        out,
        format_args!(
            "steps={} final_loss={} val_loss={}",
            summary.steps, summary.final_loss, summary.val_loss
        ),
    )?;
    Ok(summary)
}

pub fn cmd_train(common: &Common, resume: Option<&Path>, steps: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let (cfg, ck) = match resume {
        Some(path) => {
            if common.config.is_some() {
                return Err(CliError::Usage("--resume takes its configuration from the checkpoint".into()));
            }
            let ck = Checkpoint::load(path)?;
            (common.apply(ck.config.clone())?, Some(ck))
        }
        None => (common.run_config()?, None),
    };
    let text = load_corpus(&cfg)?;
    let mut cfg = cfg;
    if let Some(n) = steps {
        cfg.steps = n;
    }
    cfg.resolve(&text);
    dispatch_dtype!(cfg.dtype, train(&cfg, &text, ck.as_ref(), out)).map(|_| ())
}

fn eval<T: Scalar>(ck: &Checkpoint, cfg: &RunConfig, text: &str, out: &mut dyn Write) -> Result<()> {
    let model: Model<T> = ck.model()?;
    let ds = dataset(cfg, text)?;
    let window = cfg.context + 1;
    let n = cfg.eval_windows.max(1);
    let val = evaluate_loss(&model, &strided_windows(&ds.val, window, n))?;
    let train = evaluate_loss(&model, &strided_windows(&ds.train, window, n))?;
    emit(out, format_args!("step={} train_loss={train} val_loss={val}", ck.step))
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = common.apply(ck.config.clone())?;
    let text = load_corpus(&cfg)?;
    dispatch_dtype!(ck.config.dtype, eval(&ck, &cfg, &text, out))
}
