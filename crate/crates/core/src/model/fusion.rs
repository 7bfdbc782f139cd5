use serde::{Deserialize, Serialize};

use super::layers::{modulate, Attention, Init, Linear, TimeMlp};
use super::ModelConfig;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// How the two branch predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// `(v_txt + v_img) / 2`.
    #[default]
    Sim,
    /// Per-token sigmoid weight: `w·v_txt + (1−w)·v_img`.
    Aw,
    /// Fused features split in two and decoded by the branch heads.
    At,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Sim => "sim",
            FusionStrategy::Aw => "aw",
            FusionStrategy::At => "at",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FusionStrategy::Sim, FusionStrategy::Aw, FusionStrategy::At]
            .into_iter()
            .find(|f| f.name() == s)
    }
}

/// Fusion module over the concatenated `[f_txt, f_img]` features (width 2D):
/// adaptive normalization from its own time embedding, one cross-attention per
/// condition modality, and `skip ⊙ x + post(a_txt + a_img)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub strategy: FusionStrategy,
    pub time: TimeMlp,
    pub ada: Linear,
    pub attn_txt: Attention,
    pub attn_img: Attention,
    pub post: Linear,
    pub skip: ParamId,
    /// Per-token logit head (AW only).
    pub logit: Option<Linear>,
    pub width: usize,
}

impl FusionModule {
    /// Zero-initialized heads. AW starts with `skip = 1` and `w = 0.5`; AT
    /// starts with `skip = 0`, so its fused feature is exactly zero.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, strategy: FusionStrategy, rng: &mut SeedRng) -> Result<Self> {
        if strategy == FusionStrategy::Sim {
            return Err(Error::Invalid("sim fusion has no module".into()));
        }
        let (d, w) = (cfg.width, 2 * cfg.width);
        let time = TimeMlp::new(store, &format!("{prefix}.time"), cfg.time_features, w, rng)?;
        let ada = Linear::new(store, &format!("{prefix}.ada"), w, 2 * w, true, Init::Zero, rng)?;
        let attn_txt = Attention::new(store, &format!("{prefix}.attn_txt"), w, d, w, w, cfg.heads, Init::Fan, rng)?;
        let attn_img = Attention::new(store, &format!("{prefix}.attn_img"), w, d, w, w, cfg.heads, Init::Fan, rng)?;
        let post = Linear::new(store, &format!("{prefix}.post"), w, w, true, Init::Zero, rng)?;
        let skip_init = if strategy == FusionStrategy::Aw { 1.0 } else { 0.0 };
        let skip = store.add(format!("{prefix}.skip"), Tensor::full(vec![w], skip_init))?;
        let logit = match strategy {
            FusionStrategy::Aw => Some(Linear::new(store, &format!("{prefix}.logit"), w, 1, true, Init::Zero, rng)?),
            _ => None,
        };
        Ok(Self {
            strategy,
            time,
            ada,
            attn_txt,
            attn_img,
            post,
            skip,
            logit,
            width: w,
        })
    }

    /// Fused features `[B, N, 2D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_txt: NodeId,
        f_img: NodeId,
        t: &[f64],
        c_txt: NodeId,
        c_img: NodeId,
    ) -> Result<NodeId> {
        let x = g.concat(&[f_txt, f_img])?;
        let temb = self.time.forward(g, store, t)?;
        let mods = self.ada.forward(g, store, temb)?;
        let m = g.split(mods, &[self.width, self.width])?;
        let h = modulate(g, x, m[0], m[1])?;
        let a_t = self.attn_txt.forward(g, store, h, c_txt)?;
        let a_i = self.attn_img.forward(g, store, h, c_img)?;
        let a = g.add(a_t, a_i)?;
        let a = self.post.forward(g, store, a)?;
        let skip = g.param(store, self.skip)?;
        let s = g.mul(x, skip)?;
        g.add(s, a)
    }

    /// Per-token weights `w = σ(logit(fused))`, `[B, N, 1]`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, fused: NodeId) -> Result<NodeId> {
        let head = self
            .logit
            .as_ref()
            .ok_or_else(|| Error::Invalid("fusion module has no logit head".into()))?;
        let l = head.forward(g, store, fused)?;
        g.sigmoid(l)
    }
}

/// `(v_txt + v_img) / 2`.
pub fn fuse_sim(g: &mut Graph, v_txt: NodeId, v_img: NodeId) -> Result<NodeId> {
    let s = g.add(v_txt, v_img)?;
    g.scale(s, 0.5)
}

/// `w·v_txt + (1−w)·v_img`.
pub fn fuse_weighted(g: &mut Graph, w: NodeId, v_txt: NodeId, v_img: NodeId) -> Result<NodeId> {
    if g.shape(v_txt) != g.shape(v_img) {
        return Err(Error::shape("fuse", g.shape(v_txt), g.shape(v_img)));
    }
    let one = g.scalar(1.0)?;
    let neg = g.scale(w, -1.0)?;
    let om = g.add(neg, one)?;
    let a = g.mul(w, v_txt)?;
    let b = g.mul(om, v_img)?;
    g.add(a, b)
}
