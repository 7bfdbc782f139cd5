//! Two-stage training: each branch is pretrained on its own condition, then
//! both branches, the bridges and an optional fusion module are fine-tuned
//! jointly under independent condition dropout.
//!
//! Every step draws its batch from `SeedRng::new(seed).split(step)`, so a run
//! is a pure function of its config and resuming needs only the step count,
//! the parameters and the optimizer moments.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{flow_loss, FlowBatch, TimeDistribution};
use crate::model::checkpoint::{snap_f32, snap_store};
use crate::model::{BranchModel, Bundle, CondBatch, Modality, ModelConfig};
use crate::regime::ConditionRegime;
use crate::rng::SeedRng;
use crate::world::dataset::Dataset;
use crate::world::{asset_to_latent, image_patches, patchify, View, TEXT_TOKENS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    PretrainImg,
    PretrainTxt,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainImg => "pretrain_img",
            Stage::PretrainTxt => "pretrain_txt",
            Stage::Joint => "joint",
        }
    }

    pub fn pretrain(modality: Modality) -> Self {
        match modality {
            Modality::Image => Stage::PretrainImg,
            Modality::Text => Stage::PretrainTxt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Probability of dropping each condition.
    pub dropout: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: AdamConfig,
    pub time: TimeDistribution,
    /// Joint stage only: keep both branches frozen.
    pub bridges_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::PretrainImg,
            steps: 20_000,
            batch: 32,
            lr: 1e-3,
            dropout: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
            optimizer: AdamConfig::default(),
            time: TimeDistribution::Uniform,
            bridges_only: false,
        }
    }
}

impl TrainConfig {
    /// Defaults of the joint stage: fewer steps at a tenth of the rate.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Joint,
            steps: 5000,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let checks = [
            (self.steps >= 1, "steps must be at least 1"),
            (self.batch >= 1, "batch must be at least 1"),
            (self.lr.is_finite() && self.lr >= 0.0, "learning rate must be finite and non-negative"),
            ((0.0..=1.0).contains(&self.dropout), "dropout must be in [0,1]"),
            (self.log_every >= 1, "log_every must be at least 1"),
            ((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "betas must be in [0,1)"),
            (o.eps > 0.0 && o.eps.is_finite(), "eps must be positive"),
            (o.clip_norm.is_none_or(|c| c > 0.0 && c.is_finite()), "clip_norm must be positive"),
            (!self.bridges_only || self.stage == Stage::Joint, "bridges_only needs the joint stage"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Invalid((*msg).into())),
            None => match self.time {
                TimeDistribution::LogitNormal { std, mean } if !(std > 0.0 && mean.is_finite()) => {
                    Err(Error::Invalid("logit-normal std must be positive".into()))
                }
                _ => Ok(()),
            },
        }
    }
}

/// Each condition is kept independently with probability `1 − p`.
pub fn sample_regime(rng: &mut SeedRng, p: f64) -> ConditionRegime {
    let keep_image = rng.bernoulli(1.0 - p);
    let keep_text = rng.bernoulli(1.0 - p);
    ConditionRegime::from_keep(keep_image, keep_text)
}

/// Training records in model layout: token latents, image patches for every
/// view, and text token ids.
#[derive(Clone, Debug)]
pub struct TrainSet {
    cfg: ModelConfig,
    latents: Vec<Vec<f64>>,
    patches: Vec<Vec<Tensor>>,
    tokens: Vec<[usize; TEXT_TOKENS]>,
}

impl TrainSet {
    pub fn new(ds: &Dataset, range: Range<usize>, cfg: &ModelConfig) -> Result<Self> {
        let m = &ds.manifest;
        if m.grid_resolution != cfg.grid || m.image_size != cfg.image_size {
            return Err(Error::Invalid(format!(
                "dataset has grid {} and image size {}, model expects {} and {}",
                m.grid_resolution, m.image_size, cfg.grid, cfg.image_size
            )));
        }
        let records = ds
            .records
            .get(range.clone())
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::Invalid(format!("empty or out-of-range record range {range:?}")))?;
        let mut set = Self {
            cfg: *cfg,
            latents: Vec::with_capacity(records.len()),
            patches: Vec::with_capacity(records.len()),
            tokens: Vec::with_capacity(records.len()),
        };
        for r in records {
            set.latents.push(patchify(asset_to_latent(&r.grid).data(), cfg.grid)?);
            set.patches.push(
                r.views
                    .iter()
                    .map(|im| image_patches(im, cfg.image_patch))
                    .collect::<Result<_>>()?,
            );
            set.tokens.push(r.tokens);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Token latents of the given records, `[B, N, 32]`.
    pub fn latents(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.latents[0].len());
        for &i in idx {
            data.extend_from_slice(&self.latents[i]);
        }
        Tensor::new(self.cfg.latent_shape(idx.len()), data)
    }

    pub fn image_condition(&self, idx: &[usize], views: &[View], keep: Vec<bool>) -> Result<CondBatch> {
        let (t, w) = (self.cfg.image_tokens(), self.cfg.image_token_width());
        let mut data = Vec::with_capacity(idx.len() * t * w);
        for (&i, v) in idx.iter().zip(views) {
            data.extend_from_slice(self.patches[i][v.index()].data());
        }
        Ok(CondBatch::Image {
            patches: Tensor::new(vec![idx.len(), t, w], data)?,
            views: views.to_vec(),
            keep,
        })
    }

    pub fn text_condition(&self, idx: &[usize], keep: Vec<bool>) -> CondBatch {
        CondBatch::Text {
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
            keep,
        }
    }
}

/// One minibatch with its flow-matching draw and per-element regimes.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub indices: Vec<usize>,
    pub regimes: Vec<ConditionRegime>,
    pub flow: FlowBatch,
    pub image: CondBatch,
    pub text: CondBatch,
}

impl TrainBatch {
    pub fn regime_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.regimes {
            c[r.index()] += 1;
        }
        c
    }
}

/// The batch for `step`. Records and views are drawn uniformly; pretraining
/// drops only the branch's own condition.
pub fn draw_batch(set: &TrainSet, cfg: &TrainConfig, step: u64) -> Result<TrainBatch> {
    let mut rng = SeedRng::new(cfg.seed).split(step);
    let b = cfg.batch;
    let mut indices = Vec::with_capacity(b);
    let mut views = Vec::with_capacity(b);
    let mut regimes = Vec::with_capacity(b);
    for _ in 0..b {
        indices.push(rng.below(set.len()));
        views.push(View::ALL[rng.below(View::ALL.len())]);
        let keep = 1.0 - cfg.dropout;
        regimes.push(match cfg.stage {
            Stage::Joint => sample_regime(&mut rng, cfg.dropout),
            Stage::PretrainImg => ConditionRegime::from_keep(rng.bernoulli(keep), false),
            Stage::PretrainTxt => ConditionRegime::from_keep(false, rng.bernoulli(keep)),
        });
    }
    let flow = FlowBatch::draw(&set.latents(&indices)?, &mut rng, cfg.time)?;
    let image = set.image_condition(&indices, &views, regimes.iter().map(|r| r.keeps_image()).collect())?;
    let text = set.text_condition(&indices, regimes.iter().map(|r| r.keeps_text()).collect());
    Ok(TrainBatch {
        indices,
        regimes,
        flow,
        image,
        text,
    })
}

/// A model the training loop can optimize.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Predicted velocity for the batch's noisy latents.
    fn predict(&self, g: &mut Graph, z: NodeId, t: &[f64], batch: &TrainBatch) -> Result<NodeId>;
}

impl Trainable for BranchModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict(&self, g: &mut Graph, z: NodeId, t: &[f64], batch: &TrainBatch) -> Result<NodeId> {
        let cond = match self.modality() {
            Modality::Image => &batch.image,
            Modality::Text => &batch.text,
        };
        Ok(self.branch.forward(g, &self.store, z, t, cond)?.v)
    }
}

impl Trainable for Bundle {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict(&self, g: &mut Graph, z: NodeId, t: &[f64], batch: &TrainBatch) -> Result<NodeId> {
        self.fused_velocity(g, z, t, &batch.image, &batch.text)
    }
}

/// Flow-matching loss of `model` on `batch`.
pub fn batch_loss<M: Trainable>(g: &mut Graph, model: &M, batch: &TrainBatch) -> Result<NodeId> {
    flow_loss(g, &batch.flow, |g, z, t| {
        let z = g.input(z.clone())?;
        model.predict(g, z, t, batch)
    })
}

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Update every trainable parameter; `t` counts updates including this one.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], trainable: &[bool], lr: f64, t: u64, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid("gradient count does not match parameters".into()));
        }
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            let g = grads[k].data();
            if g.len() != self.m[k].numel() {
                return Err(Error::shape("adam", grads[k].shape(), self.m[k].shape()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for j in 0..g.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            }
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Optimizer state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Updates applied so far.
    pub step: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            adam: Adam::new(store),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub uncond: usize,
    pub text: usize,
    pub image: usize,
    pub joint: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

/// Receives log rows and checkpoint boundaries from the training loop.
pub trait Observer {
    fn log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    /// Called after parameters and moments were rounded to f32.
    fn checkpoint(&mut self, _store: &ParamStore, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

fn global_norm(grads: &[Tensor], trainable: &[bool]) -> f64 {
    grads
        .iter()
        .zip(trainable)
        .filter(|(_, &on)| on)
        .map(|(g, _)| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Run steps `state.step..cfg.steps`. Returns the logged rows.
pub fn train<M: Trainable>(
    model: &mut M,
    set: &TrainSet,
    cfg: &TrainConfig,
    trainable: &[bool],
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if trainable.len() != model.store().len() {
        return Err(Error::Invalid("trainable mask does not match parameters".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let batch = draw_batch(set, cfg, step)?;
        let mut g = Graph::new();
        let diverged = |reason: String| Error::Diverged {
            step: step as usize,
            reason,
        };
        let loss = batch_loss(&mut g, model, &batch).map_err(|e| match e {
            Error::NonFinite { op } => diverged(format!("{op} produced a non-finite value")),
            e => e,
        })?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}")));
        }
        let mut grads = g.backward(loss)?.dense(model.store());
        let norm = global_norm(&grads, trainable);
        if !norm.is_finite() {
            return Err(diverged("non-finite gradient".into()));
        }
        if let Some(clip) = cfg.optimizer.clip_norm {
            if norm > clip {
                let s = clip / norm;
                for gr in &mut grads {
                    gr.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        state
            .adam
            .step(model.store_mut(), &grads, trainable, cfg.lr, step + 1, &cfg.optimizer)?;
        state.step += 1;

        if step % cfg.log_every == 0 || state.step == cfg.steps {
            let c = batch.regime_counts();
            let row = LogRow {
                step,
                uncond: c[ConditionRegime::Uncond.index()],
                text: c[ConditionRegime::TextOnly.index()],
                image: c[ConditionRegime::ImageOnly.index()],
                joint: c[ConditionRegime::Joint.index()],
                loss: value,
                grad_norm: norm,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            observer.log(&row)?;
            rows.push(row);
        }
        let boundary = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if boundary || state.step == cfg.steps {
            snap_state(model.store_mut(), state);
            observer.checkpoint(model.store(), state)?;
        }
    }
    Ok(rows)
}

/// Round parameters and moments to the precision checkpoints keep, so a run
/// resumed from a checkpoint continues from exactly the same values.
pub fn snap_state(store: &mut ParamStore, state: &mut TrainState) {
    snap_store(store);
    for t in state.adam.m.iter_mut().chain(&mut state.adam.v) {
        snap_f32(t);
    }
}

/// Pretrain one branch; its stage must match the branch modality.
pub fn pretrain_branch(
    model: &mut BranchModel,
    set: &TrainSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<Vec<LogRow>> {
    if cfg.stage != Stage::pretrain(model.modality()) {
        return Err(Error::Invalid(format!(
            "stage {} does not train the {} branch",
            cfg.stage.name(),
            model.modality().name()
        )));
    }
    let all = vec![true; model.store.len()];
    train(model, set, cfg, &all, state, observer)
}

/// Which bundle parameters the joint stage updates.
pub fn joint_trainable(bundle: &Bundle, bridges_only: bool) -> Vec<bool> {
    bundle
        .store
        .iter()
        .map(|(_, name, _)| !bridges_only || !(name.starts_with("img.") || name.starts_with("txt.")))
        .collect()
}

/// Joint fine-tuning of a bundle assembled from two pretrained branches.
pub fn joint_finetune(
    bundle: &mut Bundle,
    set: &TrainSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<Vec<LogRow>> {
    if cfg.stage != Stage::Joint {
        return Err(Error::Invalid(format!("stage {} is not the joint stage", cfg.stage.name())));
    }
    let mask = joint_trainable(bundle, cfg.bridges_only);
    train(bundle, set, cfg, &mask, state, observer)
}

/// Bundle prediction at handoff against the average of the standalone
/// branches on the same batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parity {
    pub max_abs_diff: f64,
    pub bundle_loss: f64,
    pub average_loss: f64,
}

pub fn handoff_parity(bundle: &Bundle, img: &BranchModel, txt: &BranchModel, batch: &TrainBatch) -> Result<Parity> {
    let z = &batch.flow.z_t;
    let t = &batch.flow.t;
    let fused = bundle.velocity(z, t, &batch.image, &batch.text)?;
    let vi = img.velocity(z, t, &batch.image)?;
    let vt = txt.velocity(z, t, &batch.text)?;
    let target = batch.flow.target.data();
    let n = target.len() as f64;
    let mut max_abs_diff = 0.0f64;
    let (mut lb, mut la) = (0.0, 0.0);
    for (j, &f) in fused.data().iter().enumerate() {
        let avg = 0.5 * (vt.data()[j] + vi.data()[j]);
        max_abs_diff = max_abs_diff.max((f - avg).abs());
        lb += (f - target[j]).powi(2);
        la += (avg - target[j]).powi(2);
    }
    Ok(Parity {
        max_abs_diff,
        bundle_loss: lb / n,
        average_loss: la / n,
    })
}
