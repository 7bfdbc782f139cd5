use std::io::Write;
use std::path::Path;

use duoflow::autodiff::Tensor;
use duoflow::flow::{integrate, FlowSchedule, GuidanceConfig};
use duoflow::model::checkpoint::CheckpointKind;
use duoflow::model::{Bundle, BundleField, CondBatch, Modality};
use duoflow::rng::SeedRng;
use duoflow::world::dataset::{Dataset, DatasetKind, Record};
use duoflow::world::{image_tokens, latent_to_grid, project, text_tokens, unpatchify, Attributes, Condition, Image, View, VoxelGrid, CHANNELS, NULL_TOKEN, TEXT_TOKENS};
use duoflow::ConditionRegime;
use serde::Serialize;

use crate::config::Stream;
use crate::error::{CliError, Result};
use crate::output::{prepare_out, read_checkpoint, read_dataset, write_run};
use crate::SampleArgs;

pub const SAMPLES_FILE: &str = "samples.csv";

/// One latent to generate.
#[derive(Clone, Debug)]
pub struct Request {
    /// Label of the noise stream; equal labels start from equal noise.
    pub noise: u64,
    pub asset: Option<usize>,
    pub image: Option<(Image, View)>,
    pub text: Option<Attributes>,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    pub batch: usize,
    pub seed: u64,
}

pub fn read_bundle(path: &Path) -> Result<Bundle> {
    let ck = read_checkpoint(path)?;
    if ck.manifest.kind != CheckpointKind::Bundle || ck.manifest.modalities != [Modality::Image, Modality::Text] {
        return Err(CliError::Data(format!("{} is not a bundle checkpoint", path.display())));
    }
    Ok(ck.to_bundle()?)
}

/// Starting noise for one request.
pub fn initial_noise(bundle: &Bundle, seed: u64, label: u64) -> Vec<f64> {
    let n = bundle.cfg.tokens() * bundle.cfg.token_width();
    SeedRng::new(seed).split(label).normals(n)
}

/// Integrate every request under `regime` and decode the results.
pub fn generate(bundle: &Bundle, items: &[Request], regime: ConditionRegime, s: SamplerSettings) -> Result<Vec<VoxelGrid>> {
    let cfg = &bundle.cfg;
    let schedule = FlowSchedule::uniform(s.steps)?;
    let guidance = GuidanceConfig::new(s.cfg_scale)?;
    let g = cfg.grid;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(s.batch) {
        let b = chunk.len();
        let mut img = Vec::with_capacity(b);
        let mut txt = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b * cfg.tokens() * cfg.token_width());
        for r in chunk {
            img.push(match &r.image {
                Some((im, v)) if regime.keeps_image() => image_tokens(im, *v, cfg.image_patch)?,
                _ => Condition::Null,
            });
            txt.push(match &r.text {
                Some(a) if regime.keeps_text() => text_tokens(a),
                _ => Condition::Null,
            });
            noise.extend(initial_noise(bundle, s.seed, r.noise));
        }
        let mut field = BundleField {
            bundle,
            image: CondBatch::from_conditions(Modality::Image, &img, cfg)?,
            text: CondBatch::from_conditions(Modality::Text, &txt, cfg)?,
        };
        let z0 = Tensor::new(cfg.latent_shape(b), noise)?;
        let z = integrate(&mut field, &schedule, guidance, regime, z0)?;
        if z.data().iter().any(|x| !x.is_finite()) {
            return Err(CliError::Numerical("sampling produced non-finite latents".into()));
        }
        for tokens in z.data().chunks(cfg.tokens() * cfg.token_width()) {
            let latent = Tensor::new(vec![g, g, g, CHANNELS], unpatchify(tokens, g)?)?;
            out.push(latent_to_grid(&latent)?);
        }
    }
    Ok(out)
}

/// Package generated grids as a dataset. `tokens` records the text
/// condition each sample was drawn with, null when there was none.
pub fn generated_dataset(seed: u64, image_size: usize, grids: Vec<VoxelGrid>, tokens: Vec<[usize; TEXT_TOKENS]>, asset_ids: Option<Vec<usize>>) -> Result<Dataset> {
    let g = grids.first().map_or(duoflow::world::DEFAULT_GRID, |x| x.resolution());
    let records = grids
        .into_iter()
        .zip(tokens)
        .map(|(grid, tokens)| {
            Ok(Record {
                views: View::ALL.iter().map(|&v| project(&grid, v, image_size)).collect::<duoflow::Result<_>>()?,
                grid,
                tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_records(DatasetKind::Generated, seed, g, image_size, records, 0, asset_ids)?)
}

/// `all`, `train`, `test`, or comma-separated ids and inclusive ranges.
pub fn parse_assets(spec: &str, ds: &Dataset) -> Result<Vec<usize>> {
    let ids: Vec<usize> = match spec.trim() {
        "all" => (0..ds.len()).collect(),
        "train" => ds.train_range().collect(),
        "test" => ds.test_range().collect(),
        list => {
            let bad = || CliError::Config(format!("cannot parse asset list {list:?}"));
            let mut ids = Vec::new();
            for part in list.split(',').map(str::trim) {
                match part.split_once('-') {
                    Some((a, b)) => {
                        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                        if a > b {
                            return Err(bad());
                        }
                        ids.extend(a..=b);
                    }
                    None => ids.push(part.parse().map_err(|_| bad())?),
                }
            }
            ids
        }
    };
    if ids.is_empty() {
        return Err(CliError::Config(format!("asset selection {spec:?} is empty")));
    }
    let mut seen = vec![false; ds.len()];
    for &i in &ids {
        if i >= ds.len() {
            return Err(CliError::Config(format!("asset {i} is out of range (dataset has {})", ds.len())));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CliError::Config(format!("asset {i} is listed twice")));
        }
    }
    Ok(ids)
}

#[derive(Serialize)]
struct SampleRow {
    index: usize,
    asset_id: Option<usize>,
    regime: &'static str,
    view: Option<&'static str>,
    attrs: Option<String>,
    occupied: usize,
}

pub fn run(a: &SampleArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(s) = a.steps {
        cfg.sample.steps = s;
    }
    if let Some(s) = a.cfg_scale {
        cfg.sample.cfg_scale = s;
    }
    if let Some(c) = a.count {
        cfg.sample.count = c;
    }
    cfg.validate()?;
    let regime: ConditionRegime = a.regime.into();
    let view: View = a.view.into();
    let attrs = a.attrs.as_deref().map(Attributes::parse).transpose().map_err(|e| CliError::Config(e.to_string()))?;
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "sample", a, &cfg)?;
    let bundle = read_bundle(&a.ckpt)?;

    let ds = a.data.as_deref().map(read_dataset).transpose()?;
    let items: Vec<Request> = match (&a.assets, &ds) {
        (Some(spec), Some(ds)) => {
            let bc = &bundle.cfg;
            if ds.manifest.grid_resolution != bc.grid || ds.manifest.image_size != bc.image_size {
                return Err(CliError::Data(format!(
                    "dataset has grid {} and images {}, the model expects {} and {}",
                    ds.manifest.grid_resolution, ds.manifest.image_size, bc.grid, bc.image_size
                )));
            }
            parse_assets(spec, ds)?
                .into_iter()
                .map(|i| {
                    let r = &ds.records[i];
                    Request {
                        noise: i as u64,
                        asset: Some(i),
                        image: Some((r.view(view).clone(), view)),
                        text: attrs.or_else(|| r.attrs()),
                    }
                })
                .collect()
        }
        _ => (0..cfg.sample.count)
            .map(|i| Request {
                noise: i as u64,
                asset: None,
                image: None,
                text: attrs,
            })
            .collect(),
    };
    for r in &items {
        if regime.keeps_image() && r.image.is_none() {
            return Err(CliError::Config(format!("regime {regime} needs --data and --assets for the image condition")));
        }
        if regime.keeps_text() && r.text.is_none() {
            return Err(CliError::Config(format!("regime {regime} needs --attrs or assets with attributes")));
        }
    }

    let settings = SamplerSettings {
        steps: cfg.sample.steps,
        cfg_scale: cfg.sample.cfg_scale,
        batch: cfg.sample.batch,
        seed: cfg.stream(Stream::Sample),
    };
    writeln!(log, "sampling {} assets, regime {regime}, {} steps, guidance {}", items.len(), settings.steps, settings.cfg_scale)?;
    let grids = generate(&bundle, &items, regime, settings)?;

    let mut w = csv::Writer::from_path(out.join(SAMPLES_FILE))?;
    let mut tokens = Vec::with_capacity(items.len());
    for (i, (r, g)) in items.iter().zip(&grids).enumerate() {
        let text = r.text.filter(|_| regime.keeps_text());
        tokens.push(text.map_or([NULL_TOKEN; TEXT_TOKENS], |t| t.token_ids()));
        w.serialize(SampleRow {
            index: i,
            asset_id: r.asset,
            regime: regime.name(),
            view: regime.keeps_image().then(|| view.name()),
            attrs: text.map(|t| t.to_string()),
            occupied: g.occupied_count(),
        })?;
    }
    w.flush()?;
    let ids = a.assets.as_ref().map(|_| items.iter().filter_map(|r| r.asset).collect());
    let gen = generated_dataset(settings.seed, bundle.cfg.image_size, grids, tokens, ids)?;
    gen.write(out)?;
    let empty = gen.records.iter().filter(|r| r.grid.occupied_count() == 0).count();
    writeln!(log, "wrote {} samples ({empty} empty) checksum {}", gen.len(), gen.checksum())?;
    Ok(())
}
