use std::io::Write;

use duoflow::autodiff::gradcheck::{check_op, MAX_REL_ERR};
use duoflow::autodiff::OpKind;
use duoflow::model::check::check_model;

use crate::error::{CliError, Result};
use crate::output::{prepare_out, write_run};
use crate::GradcheckArgs;

pub const TABLE_FILE: &str = "gradcheck.csv";
pub const MODEL_ROW: &str = "dual-branch-model";

/// One row per op kind, then the model row. Fixtures are seeded from the run
/// seed; the model fixture is a 2-block AW bundle with perturbed bridges.
pub fn run(a: &GradcheckArgs, log: &mut dyn Write) -> Result<()> {
    let cfg = a.common.resolve()?;
    cfg.validate()?;
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "gradcheck", a, &cfg)?;

    let mut rows = Vec::with_capacity(OpKind::ALL.len() + 1);
    for kind in OpKind::ALL {
        rows.push((kind.name(), check_op(kind, cfg.seed, fault)?));
    }
    rows.push((MODEL_ROW, check_model(cfg.seed, fault)?));

    let mut w = csv::Writer::from_path(out.join(TABLE_FILE))?;
    w.write_record(["name", "max_rel_err", "pass"])?;
    let mut failed = Vec::new();
    writeln!(log, "{:<20} {:>12}  result", "name", "max rel err")?;
    for (name, err) in &rows {
        let pass = *err < MAX_REL_ERR;
        if !pass {
            failed.push(*name);
        }
        w.write_record([name.to_string(), format!("{err:.6e}"), pass.to_string()])?;
        writeln!(log, "{name:<20} {err:>12.3e}  {}", if pass { "pass" } else { "FAIL" })?;
    }
    w.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "relative error >= {MAX_REL_ERR:e} for {}",
            failed.join(", ")
        )))
    }
}
