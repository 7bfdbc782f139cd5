//! Two DiT-style velocity networks with per-block cross-modal bridges and
//! late fusion of their predictions.
//!
//! All networks work in token space: a `[G,G,G,4]` latent becomes `N = (G/2)³`
//! tokens of width 32 via [`crate::world::patchify`], and velocities come back
//! in the same `[B, N, 32]` layout.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::world::{self, Condition, View, CHANNELS, NULL_TOKEN, TEXT_TOKENS};

mod branch;
mod bundle;
pub mod check;
pub mod checkpoint;
mod fusion;
pub mod layers;

pub use branch::{Branch, BranchField, BranchModel, BranchOutput, BranchState, CondEncoder, DitBlock};
pub use bundle::{BridgeSet, BridgedOutput, Bundle, BundleField};
pub use fusion::{fuse_sim, fuse_weighted, FusionModule, FusionStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
    pub image_size: usize,
    pub image_patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: world::DEFAULT_GRID,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            time_features: 32,
            image_size: world::DEFAULT_IMAGE,
            image_patch: world::DEFAULT_PATCH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.grid < 2 || self.grid % 2 != 0 {
            return bad(format!("grid {} must be even and >= 2", self.grid));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible into {} heads", self.width, self.heads));
        }
        if self.mlp_ratio == 0 || self.time_features < 2 {
            return bad("mlp_ratio and time_features must be positive".into());
        }
        if self.image_patch == 0 || self.image_size % self.image_patch != 0 {
            return bad(format!("image patch {} does not divide {}", self.image_patch, self.image_size));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        world::latent_token_count(self.grid)
    }

    pub fn token_width(&self) -> usize {
        8 * CHANNELS
    }

    pub fn image_tokens(&self) -> usize {
        (self.image_size / self.image_patch).pow(2)
    }

    pub fn image_token_width(&self) -> usize {
        self.image_patch * self.image_patch * 4
    }

    /// Shape of one batch of latents in token space.
    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.tokens(), self.token_width()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// A batch of conditions for one branch. Elements with `keep = false` are
/// replaced by the branch's learned null condition.
#[derive(Clone, Debug, PartialEq)]
pub enum CondBatch {
    Image {
        /// `[B, T, patch·patch·4]`.
        patches: Tensor,
        views: Vec<View>,
        keep: Vec<bool>,
    },
    Text {
        tokens: Vec<[usize; TEXT_TOKENS]>,
        keep: Vec<bool>,
    },
}

impl CondBatch {
    pub fn null(modality: Modality, batch: usize, cfg: &ModelConfig) -> Self {
        match modality {
            Modality::Image => CondBatch::Image {
                patches: Tensor::zeros(vec![batch, cfg.image_tokens(), cfg.image_token_width()]),
                views: vec![View::Front; batch],
                keep: vec![false; batch],
            },
            Modality::Text => CondBatch::Text {
                tokens: vec![[NULL_TOKEN; TEXT_TOKENS]; batch],
                keep: vec![false; batch],
            },
        }
    }

    /// Stack per-element conditions; `Condition::Null` entries are dropped.
    pub fn from_conditions(modality: Modality, conds: &[Condition], cfg: &ModelConfig) -> Result<Self> {
        let mut out = Self::null(modality, conds.len(), cfg);
        for (i, c) in conds.iter().enumerate() {
            match (c, &mut out) {
                (Condition::Null, _) => {}
                (
                    Condition::Image { patches: p, view },
                    CondBatch::Image {
                        patches,
                        views,
                        keep,
                    },
                ) => {
                    let per = cfg.image_tokens() * cfg.image_token_width();
                    if p.numel() != per {
                        return Err(Error::shape("image-condition", p.shape(), &[cfg.image_tokens(), cfg.image_token_width()]));
                    }
                    patches.data_mut()[i * per..(i + 1) * per].copy_from_slice(p.data());
                    views[i] = *view;
                    keep[i] = true;
                }
                (Condition::Text(ids), CondBatch::Text { tokens, keep }) => {
                    if ids.iter().any(|&t| t >= NULL_TOKEN) {
                        return Err(Error::Invalid(format!("text token out of range in {ids:?}")));
                    }
                    tokens[i] = *ids;
                    keep[i] = true;
                }
                _ => {
                    return Err(Error::Invalid(format!(
                        "{} branch cannot take this condition kind",
                        modality.name()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn modality(&self) -> Modality {
        match self {
            CondBatch::Image { .. } => Modality::Image,
            CondBatch::Text { .. } => Modality::Text,
        }
    }

    pub fn keep(&self) -> &[bool] {
        match self {
            CondBatch::Image { keep, .. } | CondBatch::Text { keep, .. } => keep,
        }
    }

    pub fn batch(&self) -> usize {
        self.keep().len()
    }

    /// The same conditions, additionally dropping elements whose flag is false.
    pub fn masked(&self, flags: &[bool]) -> Result<Self> {
        if flags.len() != self.batch() {
            return Err(Error::shape("keep-flags", &[flags.len()], &[self.batch()]));
        }
        let mut out = self.clone();
        match &mut out {
            CondBatch::Image { keep, .. } | CondBatch::Text { keep, .. } => {
                for (k, &f) in keep.iter_mut().zip(flags) {
                    *k = *k && f;
                }
            }
        }
        Ok(out)
    }

    /// Elements `[start, end)` of the batch.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        match self {
            CondBatch::Image { patches, views, keep } => {
                let per: usize = patches.shape()[1..].iter().product();
                let mut shape = patches.shape().to_vec();
                shape[0] = end - start;
                CondBatch::Image {
                    patches: Tensor::new(shape, patches.data()[start * per..end * per].to_vec()).expect("slice"),
                    views: views[start..end].to_vec(),
                    keep: keep[start..end].to_vec(),
                }
            }
            CondBatch::Text { tokens, keep } => CondBatch::Text {
                tokens: tokens[start..end].to_vec(),
                keep: keep[start..end].to_vec(),
            },
        }
    }
}

#[cfg(test)]
mod tests;
