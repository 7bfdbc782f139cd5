use std::io::Write;
use std::path::Path;

use duoflow::model::checkpoint::Checkpoint;
use duoflow::world::dataset::Dataset;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const VERSION: &str = concat!("duoflow ", env!("CARGO_PKG_VERSION"));
pub const RUN_FILE: &str = "run.json";

/// Create `out`, refusing a non-empty directory unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Config(format!("{} exists and is not a directory", out.display())));
        }
        let used = std::fs::read_dir(out)?.next().is_some();
        if used && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    config: &'a RunConfig,
}

/// Echo the command, its arguments and the resolved config into `out`.
pub fn write_run<A: Serialize>(out: &Path, command: &str, args: &A, cfg: &RunConfig) -> Result<()> {
    let rec = RunRecord {
        command,
        version: VERSION,
        args,
        config: cfg,
    };
    let mut json = serde_json::to_vec_pretty(&rec)?;
    json.push(b'\n');
    std::fs::write(out.join(RUN_FILE), json)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).map_err(|e| CliError::Data(format!("dataset {}: {e}", dir.display())))
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::read(dir).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", dir.display())))
}

/// A fingerprint disagreement: an error, or a warning under `--allow-mismatch`.
pub fn mismatch(what: String, allow: bool, log: &mut dyn Write) -> Result<()> {
    if allow {
        writeln!(log, "warning: {what}; continuing because of --allow-mismatch")?;
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} (pass --allow-mismatch to proceed)")))
    }
}
