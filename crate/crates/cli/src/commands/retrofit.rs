use std::io::Write;
use std::path::Path;

use revlm::blocks::{BlockKind, Model};
use revlm::data::{sample_windows, strided_windows, Dataset};
use revlm::numerics::seeded_rng;
use revlm::retrofit::{convert, kl_finetune, RetrofitConfig};
use revlm::Scalar;

use super::{create_dir, dispatch_dtype, emit, load_corpus, write_file};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

pub const REPORT_FILE: &str = "retrofit.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const STUDENT_FILE: &str = "student.rvlm";

fn retrofit<T: Scalar>(
    ck: &Checkpoint,
    cfg: &RunConfig,
    rc: &RetrofitConfig,
    text: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let teacher: Model<T> = ck.model()?;
    let tokens = cfg.encode(text)?;
    let ds = Dataset::split(tokens, cfg.val_fraction, cfg.context).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = seeded_rng(cfg.seed);
    let train = sample_windows(&ds.train, cfg.context, (rc.kl_steps * rc.batch_size).max(1), &mut rng);
    let heldout = strided_windows(&ds.val, cfg.context, cfg.eval_windows.max(1));
    let mut student = convert(&teacher, rc)?;
    let eval_every = (rc.kl_steps / 10).max(1);
    let report = kl_finetune(&teacher, &mut student, &train, &heldout, rc, eval_every)?;

    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(REPORT_FILE), &report.to_csv())?;
    write_file(&cfg.out.join(SUMMARY_FILE), &report.summary())?;
    let mut student_cfg = cfg.clone();
    student_cfg.block = BlockKind::Retrofit;
    student_cfg.a_schedule = student.config.a_schedule.clone();
    student_cfg.fixed_point_iters = student.config.fixed_point_iters;
    student_cfg.step_size = student.config.step_size;
    Checkpoint::from_model(&student, None, &student_cfg, rc.kl_steps).save(&cfg.out.join(STUDENT_FILE))?;
    out.write_all(report.summary().as_bytes()).map_err(|e| CliError::io("<stdout>", e))?;
    emit(out, format_args!("kl_reduction={}", report.kl_reduction()))
}

pub fn cmd_retrofit(
    common: &Common,
    checkpoint: &Path,
    k: Option<usize>,
    a: Option<f64>,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config.block != BlockKind::Baseline {
        return Err(CliError::Usage(format!(
            "only baseline checkpoints can be retrofitted, got `{}`",
            ck.config.block
        )));
    }
    let mut view = common.clone();
    view.block = None;
    view.dtype = None;
    let cfg = view.apply(ck.config.clone())?;
    let mut rc = RetrofitConfig::new(cfg.layers, cfg.seed);
    rc.k_fixed_point = k.unwrap_or(cfg.fixed_point_iters).max(1);
    if let Some(a) = a {
        rc.a_schedule = vec![a; cfg.layers];
    }
    rc.kl_steps = cfg.kl_steps;
    rc.kl_learning_rate = cfg.kl_lr;
    rc.batch_size = cfg.kl_batch.max(1);
    let text = load_corpus(&cfg)?;
    dispatch_dtype!(ck.config.dtype, retrofit(&ck, &cfg, &rc, &text, out))
}
