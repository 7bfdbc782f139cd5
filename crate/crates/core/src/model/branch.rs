use super::checkpoint::snap_store;
use super::layers::{keep_mask, lattice_code, modulate, param, Attention, Init, Linear, TimeMlp};
use super::{CondBatch, Modality, ModelConfig};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::regime::ConditionRegime;
use crate::rng::SeedRng;
use crate::world::{View, NULL_TOKEN, TEXT_TOKENS, VOCAB_SIZE};

/// Self-attention, cross-attention to condition tokens, and an MLP, with
/// time-dependent shift/scale/gate on the self-attention and MLP paths.
#[derive(Clone, Debug, PartialEq)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: Attention,
    pub cross: Attention,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

impl DitBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            ada: Linear::new(store, &format!("{name}.ada"), d, 6 * d, true, Init::Zero, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, d, cfg.heads, Init::Fan, rng)?,
            cross: Attention::new(store, &format!("{name}.cross"), d, d, d, d, cfg.heads, Init::Fan, rng)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, true, Init::Fan, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, true, Init::Fan, rng)?,
            width: d,
        })
    }

    /// `x` is `[B,N,D]`, `temb` `[B,1,D]`, `cond` `[B,M,D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, temb: NodeId, cond: NodeId) -> Result<NodeId> {
        let mods = self.ada.forward(g, store, temb)?;
        let m = g.split(mods, &[self.width; 6])?;

        let h = modulate(g, x, m[0], m[1])?;
        let a = self.attn.forward(g, store, h, h)?;
        let a = g.mul(a, m[2])?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x)?;
        let c = self.cross.forward(g, store, h, cond)?;
        let x = g.add(x, c)?;

        let h = modulate(g, x, m[3], m[4])?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        let h = g.mul(h, m[5])?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CondEncoder {
    Image {
        proj: Linear,
        pos: crate::autodiff::ParamId,
        views: crate::autodiff::ParamId,
        null: crate::autodiff::ParamId,
    },
    Text {
        /// `VOCAB_SIZE + 1` rows; the last is the null token.
        table: crate::autodiff::ParamId,
        pos: crate::autodiff::ParamId,
    },
}

impl CondEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, modality: Modality, rng: &mut SeedRng) -> Result<Self> {
        let d = cfg.width;
        Ok(match modality {
            Modality::Image => {
                let proj = Linear::new(store, &format!("{name}.proj"), cfg.image_token_width(), d, true, Init::Fan, rng)?;
                let side = cfg.image_size / cfg.image_patch;
                let pos = store.add(format!("{name}.pos"), lattice_code(side, 2, d))?;
                let views = param(store, format!("{name}.views"), vec![View::ALL.len(), d], Init::Normal(1.0), rng)?;
                let null = param(store, format!("{name}.null"), vec![1, d], Init::Normal(1.0), rng)?;
                CondEncoder::Image { proj, pos, views, null }
            }
            Modality::Text => CondEncoder::Text {
                table: param(store, format!("{name}.table"), vec![VOCAB_SIZE + 1, d], Init::Normal(1.0), rng)?,
                pos: param(store, format!("{name}.pos"), vec![TEXT_TOKENS, d], Init::Normal(0.1), rng)?,
            },
        })
    }

    pub fn modality(&self) -> Modality {
        match self {
            CondEncoder::Image { .. } => Modality::Image,
            CondEncoder::Text { .. } => Modality::Text,
        }
    }

    /// Condition tokens `[B, M, D]`; dropped elements become the null condition.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, cond: &CondBatch) -> Result<NodeId> {
        let keep = cond.keep();
        let b = keep.len();
        let mask = g.input(keep_mask(keep))?;
        match (self, cond) {
            (CondEncoder::Image { proj, pos, views, null }, CondBatch::Image { patches, views: vs, .. }) => {
                let x = g.input(patches.clone())?;
                let p = proj.forward(g, store, x)?;
                let pos = g.param(store, *pos)?;
                let p = g.add(p, pos)?;
                let table = g.param(store, *views)?;
                let idx: Vec<usize> = vs.iter().map(|v| v.index()).collect();
                let ve = g.embed(table, &idx, &[b, 1])?;
                let real = g.add(p, ve)?;
                let real = g.mul(real, mask)?;
                let inv = g.input(keep_mask(keep).map(|m| 1.0 - m))?;
                let null = g.param(store, *null)?;
                let null = g.mul(null, inv)?;
                g.add(real, null)
            }
            (CondEncoder::Text { table, pos }, CondBatch::Text { tokens, .. }) => {
                let mut idx = Vec::with_capacity(b * TEXT_TOKENS);
                for (t, &k) in tokens.iter().zip(keep) {
                    if k {
                        idx.extend_from_slice(t);
                    } else {
                        idx.extend_from_slice(&[NULL_TOKEN; TEXT_TOKENS]);
                    }
                }
                let table = g.param(store, *table)?;
                let e = g.embed(table, &idx, &[b, TEXT_TOKENS])?;
                let pos = g.param(store, *pos)?;
                let pos = g.mul(pos, mask)?;
                g.add(e, pos)
            }
            _ => Err(Error::Invalid(format!(
                "{} branch cannot take a {} condition",
                self.modality().name(),
                cond.modality().name()
            ))),
        }
    }
}

/// One velocity network. Parameter names carry the branch prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub prefix: String,
    pub modality: Modality,
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub pos: crate::autodiff::ParamId,
    pub time: TimeMlp,
    pub blocks: Vec<DitBlock>,
    pub head: Linear,
    pub cond: CondEncoder,
}

/// Per-forward state shared by every block.
#[derive(Clone, Copy, Debug)]
pub struct BranchState {
    pub h: NodeId,
    pub temb: NodeId,
    pub cond: NodeId,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub v: NodeId,
    /// Output of each block, `[B,N,D]`.
    pub features: Vec<NodeId>,
}

impl Branch {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, modality: Modality, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let side = cfg.grid / 2;
        let embed = Linear::new(store, &format!("{prefix}.embed"), cfg.token_width(), d, true, Init::Fan, rng)?;
        let pos = store.add(format!("{prefix}.pos"), lattice_code(side, 3, d))?;
        let time = TimeMlp::new(store, &format!("{prefix}.time"), cfg.time_features, d, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, &format!("{prefix}.head"), d, cfg.token_width(), true, Init::Zero, rng)?;
        let cond = CondEncoder::new(store, &format!("{prefix}.cond"), cfg, modality, rng)?;
        Ok(Self {
            prefix: prefix.to_string(),
            modality,
            cfg: *cfg,
            embed,
            pos,
            time,
            blocks,
            head,
            cond,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn begin(&self, g: &mut Graph, store: &ParamStore, z: NodeId, t: &[f64], cond: &CondBatch) -> Result<BranchState> {
        let zs = g.shape(z).to_vec();
        let want = self.cfg.latent_shape(t.len());
        if zs != want {
            return Err(Error::shape("branch-input", &zs, &want));
        }
        if cond.batch() != t.len() {
            return Err(Error::shape("branch-condition", &[cond.batch()], &[t.len()]));
        }
        let x = self.embed.forward(g, store, z)?;
        let pos = g.param(store, self.pos)?;
        let h = g.add(x, pos)?;
        let temb = self.time.forward(g, store, t)?;
        let cond = self.cond.encode(g, store, cond)?;
        Ok(BranchState { h, temb, cond })
    }

    pub fn block(&self, i: usize, g: &mut Graph, store: &ParamStore, st: &BranchState, h: NodeId) -> Result<NodeId> {
        self.blocks[i].forward(g, store, h, st.temb, st.cond)
    }

    /// `𝒢(LN(h))`, tokens `[B,N,32]`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(h)?;
        self.head.forward(g, store, n)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: NodeId, t: &[f64], cond: &CondBatch) -> Result<BranchOutput> {
        let st = self.begin(g, store, z, t, cond)?;
        let mut h = st.h;
        let mut features = Vec::with_capacity(self.depth());
        for i in 0..self.depth() {
            h = self.block(i, g, store, &st, h)?;
            features.push(h);
        }
        let v = self.head(g, store, h)?;
        Ok(BranchOutput { v, features })
    }
}

/// A branch together with its parameters, as trained in the first stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel {
    pub store: ParamStore,
    pub branch: Branch,
}

impl BranchModel {
    pub fn new(cfg: &ModelConfig, modality: Modality, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed).split(modality as u64 + 1);
        let prefix = match modality {
            Modality::Image => "img",
            Modality::Text => "txt",
        };
        let branch = Branch::new(&mut store, prefix, cfg, modality, &mut rng)?;
        // start from values a checkpoint stores exactly
        snap_store(&mut store);
        Ok(Self { store, branch })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.branch.cfg
    }

    pub fn modality(&self) -> Modality {
        self.branch.modality
    }

    /// Velocity for a batch of token-space latents.
    pub fn velocity(&self, z: &Tensor, t: &[f64], cond: &CondBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let zi = g.input(z.clone())?;
        let out = self.branch.forward(&mut g, &self.store, zi, t, cond)?;
        Ok(g.value(out.v).clone())
    }
}

/// Sampling oracle for one branch: its own condition unless the regime is
/// unconditional.
pub struct BranchField<'a> {
    pub model: &'a BranchModel,
    pub cond: CondBatch,
}

impl VelocityField for BranchField<'_> {
    fn velocity(&mut self, z: &Tensor, t: f64, regime: ConditionRegime) -> Result<Tensor> {
        let b = self.cond.batch();
        let keep = match (regime, self.model.modality()) {
            (ConditionRegime::Uncond, _) => false,
            (r, Modality::Image) => r.keeps_image(),
            (r, Modality::Text) => r.keeps_text(),
        };
        let cond = self.cond.masked(&vec![keep; b])?;
        self.model.velocity(z, &vec![t; b], &cond)
    }
}
