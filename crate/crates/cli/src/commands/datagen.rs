use std::io::Write;

use duoflow::world::dataset::Dataset;

use crate::error::Result;
use crate::output::{prepare_out, write_run};
use crate::DatagenArgs;

pub fn run(a: &DatagenArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(n) = a.count {
        cfg.data.count = n;
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "datagen", a, &cfg)?;
    let ds = Dataset::generate(cfg.seed, &cfg.data)?;
    ds.write(out)?;
    writeln!(log, "assets {} checksum {}", ds.len(), ds.checksum())?;
    Ok(())
}
