//! Finite-difference check of a tiny bundle with bridges and a fusion module.

use super::{Bundle, CondBatch, FusionStrategy, ModelConfig};
use crate::autodiff::gradcheck::{grad_check_params, weighted_sum, DEFAULT_STEP};
use crate::autodiff::{OpKind, ParamStore, Tensor};
use crate::error::Result;
use crate::rng::SeedRng;
use crate::world::View;

/// Smallest configuration that still has several tokens, heads and blocks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: 4,
        width: 4,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        time_features: 4,
        image_size: 4,
        image_patch: 2,
    }
}

/// Add `N(0, std²)` noise to every parameter, so that zero-initialized
/// pieces (bridges, gates, heads) take part.
pub fn perturb(store: &mut ParamStore, rng: &mut SeedRng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

/// A random two-element condition batch pair: element 0 keeps both
/// conditions, element 1 drops the text.
pub fn random_conditions(cfg: &ModelConfig, rng: &mut SeedRng) -> (CondBatch, CondBatch) {
    let b = 2;
    let img = CondBatch::Image {
        patches: Tensor::from_fn(vec![b, cfg.image_tokens(), cfg.image_token_width()], |_| rng.uniform()),
        views: vec![View::Front, View::Bottom],
        keep: vec![true, true],
    };
    let txt = CondBatch::Text {
        tokens: vec![[0, 5, 8, 15, 20], [3, 4, 12, 13, 21]],
        keep: vec![true, false],
    };
    (img, txt)
}

/// Max relative error over every parameter of a perturbed 2-block AW bundle.
pub fn check_model(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    check_model_with(seed, fault, DEFAULT_STEP)
}

pub fn check_model_with(seed: u64, fault: Option<OpKind>, step: f64) -> Result<f64> {
    let cfg = tiny_config();
    let mut rng = SeedRng::new(seed);
    let mut bundle = Bundle::new(&cfg, FusionStrategy::Aw, seed)?;
    perturb(&mut bundle.store, &mut rng, 0.3);
    let (img, txt) = random_conditions(&cfg, &mut rng);
    let z = Tensor::from_fn(cfg.latent_shape(2), |_| rng.normal());
    let t = [0.3, 0.8];
    let wseed = rng.split(7).seed();
    let b = &bundle;
    grad_check_params(
        &bundle.store,
        |g, store| {
            let probe = Bundle {
                store: store.clone(),
                ..b.clone()
            };
            let zi = g.input(z.clone())?;
            let v = probe.fused_velocity(g, zi, &t, &img, &txt)?;
            weighted_sum(g, v, &mut SeedRng::new(wseed))
        },
        step,
        fault,
    )
}
