use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use duoflow::autodiff::{Graph, ParamStore};
use duoflow::model::checkpoint::{Checkpoint, CheckpointKind};
use duoflow::model::{BranchModel, Bundle, FusionStrategy, Modality, ModelConfig};
use duoflow::trainer::{
    draw_batch, handoff_parity, joint_finetune, pretrain_branch, Adam, LogRow, Observer, Stage, TrainConfig, TrainSet, TrainState,
};
use duoflow::world::dataset::Dataset;

use crate::config::{RunConfig, Stream};
use crate::error::{CliError, Result};
use crate::output::{mismatch, prepare_out, read_checkpoint, read_dataset, write_run};
use crate::{FinetuneArgs, TrainArgs};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Largest allowed step-0 gap between the bundle and its pretrained branches.
pub const PARITY_TOL: f64 = 1e-6;

const META_DATASET: &str = "dataset";
const META_STAGE: &str = "stage";
const META_TRAIN: &str = "train_config";

/// Checkpoint directory for an intermediate step.
pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:07}"))
}

/// The training config with the step target removed, so a resumed run with
/// a longer target still matches.
fn train_fingerprint(tc: &TrainConfig) -> String {
    let mut c = *tc;
    c.steps = 0;
    serde_json::to_string(&c).expect("train config serializes")
}

fn base_meta(ds: &Dataset, tc: &TrainConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        (META_DATASET.to_string(), ds.checksum().to_string()),
        (META_STAGE.to_string(), tc.stage.name().to_string()),
        (META_TRAIN.to_string(), train_fingerprint(tc)),
    ])
}

fn check_dataset(ck: &Checkpoint, ds: &Dataset, label: &str, allow: bool, log: &mut dyn Write) -> Result<()> {
    match ck.manifest.meta.get(META_DATASET) {
        Some(sum) if sum == ds.checksum() => Ok(()),
        Some(sum) => mismatch(
            format!("{label} was trained on dataset {sum}, this dataset is {}", ds.checksum()),
            allow,
            log,
        ),
        None => mismatch(format!("{label} does not record its dataset"), allow, log),
    }
}

fn check_model(ck: &Checkpoint, cfg: &ModelConfig, label: &str, allow: bool, log: &mut dyn Write) -> Result<()> {
    if ck.manifest.model == *cfg {
        return Ok(());
    }
    mismatch(
        format!("{label} has model config {:?}, the run config has {cfg:?}", ck.manifest.model),
        allow,
        log,
    )
}

/// Optimizer state stored in a checkpoint.
fn resume_state(ck: &Checkpoint, store: &ParamStore, label: &str) -> Result<TrainState> {
    let (m, v) = ck
        .moments(store)
        .ok_or_else(|| CliError::Data(format!("{label} has no optimizer state to resume from")))?;
    Ok(TrainState {
        step: ck.manifest.step,
        adam: Adam { m, v },
    })
}

fn check_resume(ck: &Checkpoint, ds: &Dataset, tc: &TrainConfig, model: &ModelConfig, allow: bool, log: &mut dyn Write) -> Result<()> {
    check_dataset(ck, ds, "resume checkpoint", allow, log)?;
    check_model(ck, model, "resume checkpoint", allow, log)?;
    if ck.manifest.meta.get(META_TRAIN) != Some(&train_fingerprint(tc)) {
        mismatch("resume checkpoint was written with a different training config".into(), allow, log)?;
    }
    Ok(())
}

/// Writes `train_log.csv` and checkpoints as the loop reports them. The final
/// checkpoint goes to the output directory itself, earlier ones under
/// `checkpoints/step_NNNNNNN`.
struct RunObserver<'a, F> {
    csv: csv::Writer<File>,
    out: &'a Path,
    target: u64,
    snapshot: F,
    log: &'a mut dyn Write,
}

impl<'a, F: Fn(&ParamStore, u64) -> Checkpoint> RunObserver<'a, F> {
    fn new(out: &'a Path, target: u64, snapshot: F, log: &'a mut dyn Write) -> Result<Self> {
        Ok(Self {
            csv: csv::Writer::from_path(out.join(LOG_FILE))?,
            out,
            target,
            snapshot,
            log,
        })
    }
}

impl<F: Fn(&ParamStore, u64) -> Checkpoint> Observer for RunObserver<'_, F> {
    fn log(&mut self, row: &LogRow) -> duoflow::Result<()> {
        self.csv.serialize(row).map_err(|e| std::io::Error::other(e.to_string()))?;
        self.csv.flush()?;
        writeln!(
            self.log,
            "step {:>6}  loss {:.5}  grad {:.4}  regimes u/t/i/j {}/{}/{}/{}",
            row.step, row.loss, row.grad_norm, row.uncond, row.text, row.image, row.joint
        )?;
        Ok(())
    }

    fn checkpoint(&mut self, store: &ParamStore, state: &TrainState) -> duoflow::Result<()> {
        let ck = (self.snapshot)(store, state.step).with_moments(store, &state.adam.m, &state.adam.v);
        if state.step >= self.target {
            ck.write(self.out)
        } else {
            ck.write(&checkpoint_dir(self.out, state.step))
        }
    }
}

fn finish(out: &Path, log: &mut dyn Write, what: &str) -> Result<()> {
    let ck = read_checkpoint(out)?;
    writeln!(log, "{what}: step {} checkpoint {}", ck.manifest.step, ck.checksum()?)?;
    Ok(())
}

pub fn train(a: &TrainArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let modality = a.branch.modality();
    let tc = cfg.pretrain_config(Stage::pretrain(modality));
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "train", a, &cfg)?;
    let ds = read_dataset(&a.data)?;
    let allow = a.common.allow_mismatch;
    let meta = base_meta(&ds, &tc);

    let (mut model, mut state, input) = match &a.resume {
        Some(dir) => {
            let ck = read_checkpoint(dir)?;
            if ck.manifest.kind != CheckpointKind::Branch || ck.manifest.modalities != [modality] {
                return Err(CliError::Data(format!("{} is not a {} branch checkpoint", dir.display(), modality.name())));
            }
            check_resume(&ck, &ds, &tc, &cfg.model, allow, log)?;
            let model = ck.to_branch()?;
            let state = resume_state(&ck, &model.store, "resume checkpoint")?;
            (model, state, Some(ck))
        }
        None => {
            let init = if modality == Modality::Image { Stream::InitImage } else { Stream::InitText };
            let model = BranchModel::new(&cfg.model, modality, cfg.stream(init))?;
            let state = TrainState::new(&model.store);
            (model, state, None)
        }
    };

    if tc.steps <= state.step {
        let ck = input.unwrap_or_else(|| {
            Checkpoint::from_branch(&model, 0, meta.clone()).with_moments(&model.store, &state.adam.m, &state.adam.v)
        });
        ck.write(out)?;
        return finish(out, log, "no steps to run, wrote the starting checkpoint");
    }

    let set = TrainSet::new(&ds, ds.train_range(), model.cfg())?;
    writeln!(
        log,
        "pretraining {} branch on {} assets, steps {}..{}",
        modality.name(),
        set.len(),
        state.step,
        tc.steps
    )?;
    let template = model.clone();
    let snapshot = move |store: &ParamStore, step: u64| {
        let mut m = template.clone();
        m.store = store.clone();
        Checkpoint::from_branch(&m, step, meta.clone())
    };
    {
        let mut obs = RunObserver::new(out, tc.steps, snapshot, log)?;
        pretrain_branch(&mut model, &set, &tc, &mut state, &mut obs)?;
    }
    finish(out, log, &format!("trained {} branch", modality.name()))
}

/// Zero-bridge equivalence at handoff: each bridged branch output equals the
/// standalone branch, and for Sim and AW the fused output equals their
/// average.
pub fn handoff_check(bundle: &Bundle, img: &BranchModel, txt: &BranchModel, set: &TrainSet, tc: &TrainConfig, log: &mut dyn Write) -> Result<f64> {
    let batch = draw_batch(set, tc, 0)?;
    let (z, t) = (&batch.flow.z_t, &batch.flow.t);
    let mut g = Graph::new();
    let zi = g.input(z.clone())?;
    let out = bundle.bridged_forward(&mut g, zi, t, &batch.image, &batch.text)?;
    let di = g.value(out.v_img).max_abs_diff(&img.velocity(z, t, &batch.image)?);
    let dt = g.value(out.v_txt).max_abs_diff(&txt.velocity(z, t, &batch.text)?);
    writeln!(log, "step-0 parity: bridged vs standalone branch max |dv| image {di:.3e}, text {dt:.3e}")?;
    let mut worst = di.max(dt);
    if bundle.strategy != FusionStrategy::At {
        let p = handoff_parity(bundle, img, txt, &batch)?;
        writeln!(
            log,
            "step-0 parity: fused vs branch average max |dv| {:.3e}, loss {:.6} vs {:.6}",
            p.max_abs_diff, p.bundle_loss, p.average_loss
        )?;
        worst = worst.max(p.max_abs_diff);
    }
    if worst <= PARITY_TOL {
        Ok(worst)
    } else {
        Err(CliError::Check(format!("step-0 parity gap {worst:.3e} exceeds {PARITY_TOL:e}")))
    }
}

fn load_branch(path: &Path, modality: Modality, ds: &Dataset, cfg: &RunConfig, allow: bool, log: &mut dyn Write) -> Result<(BranchModel, String)> {
    let ck = read_checkpoint(path)?;
    if ck.manifest.kind != CheckpointKind::Branch || ck.manifest.modalities != [modality] {
        return Err(CliError::Data(format!("{} is not a {} branch checkpoint", path.display(), modality.name())));
    }
    let label = format!("{} branch checkpoint", modality.name());
    check_dataset(&ck, ds, &label, allow, log)?;
    check_model(&ck, &cfg.model, &label, allow, log)?;
    Ok((ck.to_branch()?, ck.checksum()?))
}

pub fn finetune(a: &FinetuneArgs, log: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    if let Some(f) = a.fusion {
        cfg.finetune.fusion = f.into();
    }
    cfg.validate()?;
    let tc = cfg.finetune_config();
    let out = &a.common.out;
    prepare_out(out, a.common.force)?;
    write_run(out, "finetune", a, &cfg)?;
    let ds = read_dataset(&a.data)?;
    let allow = a.common.allow_mismatch;
    let mut meta = base_meta(&ds, &tc);

    let (mut bundle, mut state, input) = match &a.resume {
        Some(dir) => {
            let ck = read_checkpoint(dir)?;
            if ck.manifest.kind != CheckpointKind::Bundle || ck.manifest.modalities != [Modality::Image, Modality::Text] {
                return Err(CliError::Data(format!("{} is not a bundle checkpoint", dir.display())));
            }
            check_resume(&ck, &ds, &tc, &cfg.model, allow, log)?;
            if ck.manifest.strategy != cfg.finetune.fusion {
                mismatch(
                    format!("resume checkpoint uses {} fusion, the config asks for {}", ck.manifest.strategy.name(), cfg.finetune.fusion.name()),
                    allow,
                    log,
                )?;
            }
            for key in ["img_checkpoint", "txt_checkpoint"] {
                if let Some(v) = ck.manifest.meta.get(key) {
                    meta.insert(key.into(), v.clone());
                }
            }
            let bundle = ck.to_bundle()?;
            let state = resume_state(&ck, &bundle.store, "resume checkpoint")?;
            (bundle, state, Some(ck))
        }
        None => {
            let (Some(ip), Some(tp)) = (&a.img, &a.txt) else {
                return Err(CliError::Config("finetune needs --img and --txt, or --resume".into()));
            };
            let (img, img_sum) = load_branch(ip, Modality::Image, &ds, &cfg, allow, log)?;
            let (txt, txt_sum) = load_branch(tp, Modality::Text, &ds, &cfg, allow, log)?;
            if img.cfg() != txt.cfg() {
                return Err(CliError::Data("the two branch checkpoints have different architectures".into()));
            }
            meta.insert("img_checkpoint".into(), img_sum);
            meta.insert("txt_checkpoint".into(), txt_sum);
            let mut bundle = Bundle::new(img.cfg(), cfg.finetune.fusion, cfg.stream(Stream::InitBundle))?;
            bundle.load_branch(&img, None)?;
            bundle.load_branch(&txt, None)?;
            let set = TrainSet::new(&ds, ds.train_range(), &bundle.cfg)?;
            handoff_check(&bundle, &img, &txt, &set, &tc, log)?;
            let state = TrainState::new(&bundle.store);
            (bundle, state, None)
        }
    };

    if tc.steps <= state.step {
        let ck = input.unwrap_or_else(|| {
            Checkpoint::from_bundle(&bundle, 0, meta.clone()).with_moments(&bundle.store, &state.adam.m, &state.adam.v)
        });
        ck.write(out)?;
        return finish(out, log, "no steps to run, wrote the starting checkpoint");
    }

    let set = TrainSet::new(&ds, ds.train_range(), &bundle.cfg)?;
    writeln!(
        log,
        "joint finetuning ({} fusion{}) on {} assets, steps {}..{}",
        bundle.strategy.name(),
        if tc.bridges_only { ", bridges only" } else { "" },
        set.len(),
        state.step,
        tc.steps
    )?;
    let template = bundle.clone();
    let snapshot = move |store: &ParamStore, step: u64| {
        let mut b = template.clone();
        b.store = store.clone();
        Checkpoint::from_bundle(&b, step, meta.clone())
    };
    {
        let mut obs = RunObserver::new(out, tc.steps, snapshot, log)?;
        joint_finetune(&mut bundle, &set, &tc, &mut state, &mut obs)?;
    }
    finish(out, log, "finetuned bundle")
}
