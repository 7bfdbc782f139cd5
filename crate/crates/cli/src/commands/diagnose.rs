use std::collections::BTreeMap;
use std::io::Write;

use duoflow::world::{View, VoxelGrid, NULL_TOKEN, TEXT_TOKENS};
use duoflow::ConditionRegime;
use serde::Serialize;

use super::eval::score;
use super::sample::{generate, generated_dataset, read_bundle, Request, SamplerSettings};
use crate::config::Stream;
use crate::error::{CliError, Result};
use crate::output::{mismatch, prepare_out, read_checkpoint, read_dataset, write_run};
use crate::DiagnoseArgs;

pub const TABLE_FILE: &str = "diagnose.csv";
pub const JSON_FILE: &str = "diagnose.json";
pub const SAMPLES_DIR: &str = "samples";

/// The four conditioning setups, in table order.
pub const CONDITIONS: [(&str, ConditionRegime, Option<View>); 4] = [
    ("image_only_front", ConditionRegime::ImageOnly, Some(View::Front)),
    ("image_only_bottom", ConditionRegime::ImageOnly, Some(View::Bottom)),
    ("text_only", ConditionRegime::TextOnly, None),
    ("joint_bottom_text", ConditionRegime::Joint, Some(View::Bottom)),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnoseRow {
    pub condition: String,
    pub hungarian: f64,
    pub fd: f64,
}

pub fn run(a: &DiagnoseArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(n) = a.assets {
        cfg.diagnose.assets = n;
    }
    if let Some(s) = a.steps {
        cfg.diagnose.steps = s;
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "diagnose", a, &cfg)?;
    let ds = read_dataset(&a.data)?;
    let ck = read_checkpoint(&a.ckpt)?;
    match ck.manifest.meta.get("dataset") {
        Some(sum) if sum == ds.checksum() => {}
        _ => mismatch("the bundle was not trained on this dataset".into(), a.common.allow_mismatch, log)?,
    }
    let bundle = read_bundle(&a.ckpt)?;

    let mut ids: Vec<usize> = ds.test_range().collect();
    if cfg.diagnose.assets > 0 {
        ids.truncate(cfg.diagnose.assets);
    }
    if ids.is_empty() {
        return Err(CliError::Data("the dataset has no held-out assets".into()));
    }
    let gt: Vec<VoxelGrid> = ids.iter().map(|&i| ds.records[i].grid.clone()).collect();
    let settings = SamplerSettings {
        steps: cfg.diagnose.steps,
        cfg_scale: cfg.diagnose.cfg_scale,
        batch: cfg.diagnose.batch,
        seed: cfg.stream(Stream::Diagnose),
    };
    writeln!(log, "diagnosing on {} held-out assets, {} steps, guidance {}", ids.len(), settings.steps, settings.cfg_scale)?;

    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for (name, regime, view) in CONDITIONS {
        let mut items = Vec::with_capacity(ids.len());
        for &i in &ids {
            let r = &ds.records[i];
            let text = r.attrs();
            if regime.keeps_text() && text.is_none() {
                return Err(CliError::Data(format!("asset {i} has no attributes for the text condition")));
            }
            items.push(Request {
                // Every condition starts from the same noise for a given asset.
                noise: i as u64,
                asset: Some(i),
                image: view.map(|v| (r.view(v).clone(), v)),
                text,
            });
        }
        let grids = generate(&bundle, &items, regime, settings)?;
        let (mut report, _, _) = score(&gt, &grids, ds.manifest.image_size, cfg.diagnose.extractor_seed)?;
        report.meta.insert("condition".into(), name.into());
        report.meta.insert("dataset".into(), ds.checksum().into());
        let tokens = items
            .iter()
            .map(|r| match r.text {
                Some(t) if regime.keeps_text() => t.token_ids(),
                _ => [NULL_TOKEN; TEXT_TOKENS],
            })
            .collect();
        generated_dataset(settings.seed, bundle.cfg.image_size, grids, tokens, Some(ids.clone()))?.write(&out.join(SAMPLES_DIR).join(name))?;
        writeln!(log, "{name:<18} hungarian {:.6}  fd {:.6}", report.hungarian, report.fd)?;
        rows.push(DiagnoseRow {
            condition: name.into(),
            hungarian: report.hungarian,
            fd: report.fd,
        });
        reports.insert(name.to_string(), report);
    }

    let mut w = csv::Writer::from_path(out.join(TABLE_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut json = serde_json::to_vec_pretty(&reports)?;
    json.push(b'\n');
    std::fs::write(out.join(JSON_FILE), json)?;
    Ok(())
}
