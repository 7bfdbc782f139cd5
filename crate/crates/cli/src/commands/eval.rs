use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use duoflow::metrics::{evaluate_features, grid_features, Extractor, FeatureSet, MetricsReport, Source, FEATURES_MANIFEST};
use duoflow::world::dataset::{Dataset, DatasetKind};
use duoflow::world::{View, VoxelGrid};

use crate::error::{CliError, Result};
use crate::output::{prepare_out, read_dataset, write_run};
use crate::{EvalArgs, SplitArg};

pub const FEATURES_GT_DIR: &str = "features_gt";
pub const FEATURES_GENERATED_DIR: &str = "features_generated";

pub fn split_ids(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::All => (0..ds.len()).collect(),
        SplitArg::Train => ds.train_range().collect(),
        SplitArg::Test => ds.test_range().collect(),
    }
}

/// The ground-truth asset each generated record stands for: the recorded
/// ids of a generated set, or positions for a plain toy set.
pub fn generated_ids(gen: &Dataset) -> Vec<usize> {
    match (&gen.manifest.asset_ids, gen.manifest.kind) {
        (Some(ids), _) => ids.clone(),
        (None, DatasetKind::Toy | DatasetKind::Generated) => (0..gen.len()).collect(),
    }
}

/// Generated grids ordered to match `gt_ids`. Every id must have exactly one
/// generated sample and no sample may be left over.
pub fn pair_by_id(gt_ids: &[usize], gen: &Dataset) -> Result<Vec<VoxelGrid>> {
    let ids = generated_ids(gen);
    let mut by_id = BTreeMap::new();
    for (pos, &id) in ids.iter().enumerate() {
        if by_id.insert(id, pos).is_some() {
            return Err(CliError::Data(format!("generated set has two samples for asset {id}")));
        }
    }
    let grids = gt_ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|&p| gen.records[p].grid.clone())
                .ok_or_else(|| CliError::Data(format!("no generated sample for asset {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != gt_ids.len() {
        return Err(CliError::Data(format!(
            "count mismatch: {} ground-truth assets selected, {} generated",
            gt_ids.len(),
            ids.len()
        )));
    }
    Ok(grids)
}

/// Score grids already paired by position.
pub fn score(gt: &[VoxelGrid], gen: &[VoxelGrid], image_size: usize, extractor_seed: u64) -> Result<(MetricsReport, FeatureSet, FeatureSet)> {
    if gt.len() != gen.len() {
        return Err(CliError::Data(format!("count mismatch: {} ground-truth assets, {} generated", gt.len(), gen.len())));
    }
    let ex = Extractor::new(extractor_seed);
    let a = grid_features(&ex, gt, &View::ALL, image_size, Source::Gt)?;
    let b = grid_features(&ex, gen, &View::ALL, image_size, Source::Generated)?;
    let report = evaluate_features(&a, &b, &View::ALL)?;
    Ok((report, a, b))
}

pub fn run(a: &EvalArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(s) = a.extractor_seed {
        cfg.eval.extractor_seed = s;
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "eval", a, &cfg)?;
    let gt = read_dataset(&a.gt)?;
    let ids = split_ids(&gt, a.split);
    let gt_grids: Vec<VoxelGrid> = ids.iter().map(|&i| gt.records[i].grid.clone()).collect();
    let image_size = gt.manifest.image_size;
    let seed = cfg.eval.extractor_seed;

    let mut meta = BTreeMap::from([
        ("gt_dataset".to_string(), gt.checksum().to_string()),
        ("split".to_string(), format!("{:?}", a.split).to_lowercase()),
    ]);
    let (report, fa, fb) = if a.generated.join(FEATURES_MANIFEST).exists() {
        let fb = FeatureSet::read(&a.generated).map_err(|e| CliError::Data(format!("features {}: {e}", a.generated.display())))?;
        let fa = grid_features(&Extractor::new(seed), &gt_grids, &View::ALL, image_size, Source::Gt)?;
        if fa.fingerprint != fb.fingerprint {
            return Err(CliError::Data(format!(
                "generated features come from extractor {:?}, this run uses {:?}",
                fb.fingerprint, fa.fingerprint
            )));
        }
        if fa.objects() != fb.objects() {
            return Err(CliError::Data(format!(
                "count mismatch: {} ground-truth assets selected, {} generated feature objects",
                fa.objects(),
                fb.objects()
            )));
        }
        meta.insert("pairing".into(), "position".into());
        (evaluate_features(&fa, &fb, &View::ALL)?, fa, fb)
    } else {
        let gen = read_dataset(&a.generated)?;
        if gen.manifest.grid_resolution != gt.manifest.grid_resolution {
            return Err(CliError::Data(format!(
                "generated grids are {}³, ground truth is {}³",
                gen.manifest.grid_resolution, gt.manifest.grid_resolution
            )));
        }
        let gen_grids = pair_by_id(&ids, &gen)?;
        meta.insert("generated_dataset".into(), gen.checksum().to_string());
        meta.insert("pairing".into(), "asset id".into());
        score(&gt_grids, &gen_grids, image_size, seed)?
    };
    let mut report = report;
    report.meta = meta;
    report.write(out)?;
    if a.export_features {
        write_features(out, &fa, &fb)?;
    }
    writeln!(log, "objects {}  hungarian {:.6}  fd {:.6}", report.objects, report.hungarian, report.fd)?;
    Ok(())
}

pub fn write_features(out: &Path, gt: &FeatureSet, gen: &FeatureSet) -> Result<()> {
    gt.write(&out.join(FEATURES_GT_DIR))?;
    gen.write(&out.join(FEATURES_GENERATED_DIR))?;
    Ok(())
}
