use super::checkpoint::snap_store;
use super::fusion::{fuse_sim, fuse_weighted};
use super::{Branch, BranchModel, CondBatch, FusionModule, FusionStrategy, Modality, ModelConfig};
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::regime::ConditionRegime;
use crate::rng::SeedRng;

/// Per-block `D×D` maps between the branches, all zero at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSet {
    pub t2i: Vec<ParamId>,
    pub i2t: Vec<ParamId>,
}

impl BridgeSet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut t2i = Vec::with_capacity(cfg.depth);
        let mut i2t = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            t2i.push(store.add(format!("{prefix}.{i}.t2i"), Tensor::zeros(vec![cfg.width, cfg.width]))?);
            i2t.push(store.add(format!("{prefix}.{i}.i2t"), Tensor::zeros(vec![cfg.width, cfg.width]))?);
        }
        Ok(Self { t2i, i2t })
    }

    pub fn depth(&self) -> usize {
        self.t2i.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.t2i.iter().chain(&self.i2t).copied()
    }
}

#[derive(Clone, Debug)]
pub struct BridgedOutput {
    pub v_img: NodeId,
    pub v_txt: NodeId,
    /// Final bridged features.
    pub f_img: NodeId,
    pub f_txt: NodeId,
    /// Encoded condition tokens of each branch.
    pub c_img: NodeId,
    pub c_txt: NodeId,
}

/// Both branches, their bridges and an optional fusion module, over one
/// parameter store with `img.`, `txt.`, `bridge.` and `fusion.` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub img: Branch,
    pub txt: Branch,
    pub bridges: BridgeSet,
    pub strategy: FusionStrategy,
    pub fusion: Option<FusionModule>,
}

impl Bundle {
    pub fn new(cfg: &ModelConfig, strategy: FusionStrategy, seed: u64) -> Result<Self> {
        Self::with_modalities(cfg, [Modality::Image, Modality::Text], strategy, seed)
    }

    /// A bundle whose two slots may use any condition modality; the standard
    /// layout is `[Image, Text]`.
    pub fn with_modalities(cfg: &ModelConfig, modalities: [Modality; 2], strategy: FusionStrategy, seed: u64) -> Result<Self> {
        let root = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let img = Branch::new(&mut store, "img", cfg, modalities[0], &mut root.split(1))?;
        let txt = Branch::new(&mut store, "txt", cfg, modalities[1], &mut root.split(2))?;
        let bridges = BridgeSet::new(&mut store, "bridge", cfg)?;
        let fusion = match strategy {
            FusionStrategy::Sim => None,
            s => Some(FusionModule::new(&mut store, "fusion", cfg, s, &mut root.split(3))?),
        };
        snap_store(&mut store);
        Ok(Self {
            cfg: *cfg,
            store,
            img,
            txt,
            bridges,
            strategy,
            fusion,
        })
    }

    /// Copy a pretrained branch into the slot with the same prefix, or into
    /// `slot` (`"img"`/`"txt"`) when given.
    pub fn load_branch(&mut self, model: &BranchModel, slot: Option<&str>) -> Result<()> {
        let from = &model.branch.prefix;
        let to = slot.unwrap_or(from);
        let target = if to == "img" { &self.img } else { &self.txt };
        if target.modality != model.branch.modality || target.cfg != model.branch.cfg {
            return Err(Error::Invalid(format!("branch {from} does not fit slot {to}")));
        }
        for (_, name, value) in model.store.iter() {
            let mapped = format!("{to}{}", &name[from.len()..]);
            let id = self
                .store
                .id(&mapped)
                .ok_or_else(|| Error::Invalid(format!("bundle has no parameter {mapped}")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(Error::shape("load-branch", value.shape(), self.store.get(id).shape()));
            }
            *self.store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// The parameters of one slot as a standalone branch.
    pub fn extract_branch(&self, slot: &str) -> Result<BranchModel> {
        let src = if slot == "img" { &self.img } else { &self.txt };
        let mut store = ParamStore::new();
        let branch = Branch::new(&mut store, &src.prefix, &src.cfg, src.modality, &mut SeedRng::new(0))?;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let from = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Invalid(format!("bundle has no parameter {name}")))?;
            *store.get_mut(id) = self.store.get(from).clone();
        }
        Ok(BranchModel { store, branch })
    }

    pub fn branch(&self, modality: Modality) -> Option<&Branch> {
        [&self.img, &self.txt].into_iter().find(|b| b.modality == modality)
    }

    /// Both branches in lockstep; after block `i` the features are exchanged:
    /// `f_img += f_txt·P_t2i`, `f_txt += f_img·P_i2t`, using the pre-exchange
    /// values on both right-hand sides.
    pub fn bridged_forward(
        &self,
        g: &mut Graph,
        z: NodeId,
        t: &[f64],
        cond_img: &CondBatch,
        cond_txt: &CondBatch,
    ) -> Result<BridgedOutput> {
        if self.img.depth() != self.txt.depth() || self.bridges.depth() != self.img.depth() {
            return Err(Error::Invalid(format!(
                "depth mismatch: img {}, txt {}, bridges {}",
                self.img.depth(),
                self.txt.depth(),
                self.bridges.depth()
            )));
        }
        let s = &self.store;
        let si = self.img.begin(g, s, z, t, cond_img)?;
        let st = self.txt.begin(g, s, z, t, cond_txt)?;
        let (mut hi, mut ht) = (si.h, st.h);
        for i in 0..self.img.depth() {
            let fi = self.img.block(i, g, s, &si, hi)?;
            let ft = self.txt.block(i, g, s, &st, ht)?;
            let p_t2i = g.param(s, self.bridges.t2i[i])?;
            let p_i2t = g.param(s, self.bridges.i2t[i])?;
            let to_img = g.matmul(ft, p_t2i)?;
            let to_txt = g.matmul(fi, p_i2t)?;
            hi = g.add(fi, to_img)?;
            ht = g.add(ft, to_txt)?;
        }
        let v_img = self.img.head(g, s, hi)?;
        let v_txt = self.txt.head(g, s, ht)?;
        Ok(BridgedOutput {
            v_img,
            v_txt,
            f_img: hi,
            f_txt: ht,
            c_img: si.cond,
            c_txt: st.cond,
        })
    }

    /// Combine bridged outputs with the bundle's strategy.
    pub fn fuse(&self, g: &mut Graph, out: &BridgedOutput, t: &[f64]) -> Result<NodeId> {
        match (self.strategy, &self.fusion) {
            (FusionStrategy::Sim, _) => fuse_sim(g, out.v_txt, out.v_img),
            (FusionStrategy::Aw, Some(m)) => {
                let fused = m.forward(g, &self.store, out.f_txt, out.f_img, t, out.c_txt, out.c_img)?;
                let w = m.weights(g, &self.store, fused)?;
                fuse_weighted(g, w, out.v_txt, out.v_img)
            }
            (FusionStrategy::At, Some(m)) => {
                let fused = m.forward(g, &self.store, out.f_txt, out.f_img, t, out.c_txt, out.c_img)?;
                let halves = g.split(fused, &[self.cfg.width, self.cfg.width])?;
                let vt = self.txt.head(g, &self.store, halves[0])?;
                let vi = self.img.head(g, &self.store, halves[1])?;
                fuse_sim(g, vt, vi)
            }
            (s, None) => Err(Error::Invalid(format!("{} fusion needs a fusion module", s.name()))),
        }
    }

    /// Bridged forward followed by fusion: the velocity used for sampling.
    pub fn fused_velocity(&self, g: &mut Graph, z: NodeId, t: &[f64], cond_img: &CondBatch, cond_txt: &CondBatch) -> Result<NodeId> {
        let out = self.bridged_forward(g, z, t, cond_img, cond_txt)?;
        self.fuse(g, &out, t)
    }

    /// Conditions for `regime`: the regime's required conditions must be
    /// given, the rest are replaced by null conditions.
    pub fn regime_conditions(
        &self,
        regime: ConditionRegime,
        batch: usize,
        image: Option<&CondBatch>,
        text: Option<&CondBatch>,
    ) -> Result<(CondBatch, CondBatch)> {
        let pick = |slot: &Branch, given: Option<&CondBatch>, needed: bool| -> Result<CondBatch> {
            match (given, needed) {
                (Some(c), true) => {
                    if c.batch() != batch {
                        return Err(Error::shape("condition-batch", &[c.batch()], &[batch]));
                    }
                    if c.keep().iter().any(|k| !k) {
                        return Err(Error::Invalid(format!("regime {regime} needs every {} condition", slot.modality.name())));
                    }
                    Ok(c.clone())
                }
                (None, true) => Err(Error::Invalid(format!(
                    "regime {regime} requires a {} condition",
                    slot.modality.name()
                ))),
                (Some(c), false) => c.masked(&vec![false; batch]),
                (None, false) => Ok(CondBatch::null(slot.modality, batch, &self.cfg)),
            }
        };
        Ok((
            pick(&self.img, image, regime.keeps_image())?,
            pick(&self.txt, text, regime.keeps_text())?,
        ))
    }

    /// Velocity for a batch of latents, outside any training graph.
    pub fn velocity(&self, z: &Tensor, t: &[f64], cond_img: &CondBatch, cond_txt: &CondBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let zi = g.input(z.clone())?;
        let v = self.fused_velocity(&mut g, zi, t, cond_img, cond_txt)?;
        Ok(g.value(v).clone())
    }
}

/// Sampling oracle for a bundle: each call keeps the conditions its regime
/// allows and nulls the others.
pub struct BundleField<'a> {
    pub bundle: &'a Bundle,
    pub image: CondBatch,
    pub text: CondBatch,
}

impl VelocityField for BundleField<'_> {
    fn velocity(&mut self, z: &Tensor, t: f64, regime: ConditionRegime) -> Result<Tensor> {
        let b = self.image.batch();
        let img = self.image.masked(&vec![regime.keeps_image(); b])?;
        let txt = self.text.masked(&vec![regime.keeps_text(); b])?;
        self.bundle.velocity(z, &vec![t; b], &img, &txt)
    }
}
