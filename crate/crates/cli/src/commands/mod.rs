pub mod bench;
pub mod retrofit;
pub mod stability;
pub mod train;
pub mod verify;

use std::path::Path;

use revlm::data::synthetic_corpus;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Size of the generated corpus behind `--data synthetic`.
pub const SYNTHETIC_BYTES: usize = 1 << 20;

/// Calls `$f::<f32>` or `$f::<f64>` according to a [`revlm::DType`].
macro_rules! dispatch_dtype {
    ($dtype:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $dtype {
            revlm::DType::F32 => $f::<f32>($($arg),*),
            revlm::DType::F64 => $f::<f64>($($arg),*),
        }
    };
}
pub(crate) use dispatch_dtype;

/// Corpus text named by the config; empty corpora are rejected.
pub fn load_corpus(cfg: &RunConfig) -> Result<String> {
    let text = match cfg.data.as_deref() {
        None => return Err(CliError::Usage("no corpus given (use --data PATH or --data synthetic)".into())),
        Some("synthetic") => synthetic_corpus(SYNTHETIC_BYTES, cfg.seed),
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
    };
    if text.is_empty() {
        return Err(CliError::Usage("corpus is empty".into()));
    }
    Ok(text)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub(crate) fn emit(out: &mut dyn std::io::Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io("<stdout>", e))
}
