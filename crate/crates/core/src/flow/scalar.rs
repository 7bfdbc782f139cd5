//! Rectified flow on scalar data with a small MLP velocity network. Used as
//! an end-to-end check of the training loss, optimizer and sampler on a
//! problem whose optimal velocity is known in closed form.

use serde::{Deserialize, Serialize};

use super::{FlowBatch, FlowSchedule, GuidanceConfig, TimeDistribution};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::checkpoint::snap_store;
use crate::model::layers::{Init, Linear};
use crate::regime::ConditionRegime;
use crate::rng::SeedRng;
use crate::trainer::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalarConfig {
    /// Data distribution `N(mean, var)`.
    pub mean: f64,
    pub var: f64,
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ScalarConfig {
    fn default() -> Self {
        Self {
            mean: 2.0,
            var: 0.25,
            hidden: 32,
            steps: 4000,
            batch: 1024,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// `v(z, t)` from `[z, t, z·t]` through two gelu layers.
pub struct ScalarNet {
    pub store: ParamStore,
    layers: [Linear; 3],
}

impl ScalarNet {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Invalid("hidden width must be positive".into()));
        }
        let mut rng = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::new(&mut store, "fc1", 3, hidden, true, Init::Fan, &mut rng)?,
            Linear::new(&mut store, "fc2", hidden, hidden, true, Init::Fan, &mut rng)?,
            Linear::new(&mut store, "out", hidden, 1, true, Init::Fan, &mut rng)?,
        ];
        snap_store(&mut store);
        Ok(Self { store, layers })
    }

    fn inputs(z: &[f64], t: &[f64]) -> Result<Tensor> {
        let data = z.iter().zip(t).flat_map(|(&z, &t)| [z, t, z * t]).collect();
        Tensor::new(vec![z.len(), 3], data)
    }

    /// `[B, 1]` velocities.
    pub fn forward(&self, g: &mut Graph, z: &[f64], t: &[f64]) -> Result<NodeId> {
        if z.len() != t.len() {
            return Err(Error::shape("scalar-net", &[z.len()], &[t.len()]));
        }
        let mut h = g.input(Self::inputs(z, t)?)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &self.store, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn velocity(&self, z: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, z, t)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Parameters as little-endian f32 bytes, in store order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.store
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()))
            .collect()
    }

    /// Euler sampling of `n` points with `steps` uniform steps.
    pub fn sample(&self, n: usize, steps: usize, rng: &mut SeedRng) -> Result<Vec<f64>> {
        let schedule = FlowSchedule::uniform(steps)?;
        let mut field = |z: &Tensor, t: f64, _: ConditionRegime| {
            let v = self.velocity(z.data(), &vec![t; z.numel()])?;
            Tensor::new(z.shape().to_vec(), v)
        };
        let z = super::sample(
            &mut field,
            &schedule,
            GuidanceConfig::new(1.0)?,
            ConditionRegime::Uncond,
            rng,
            &[n],
        )?;
        Ok(z.data().to_vec())
    }
}

/// Train on draws from `N(mean, var)`; returns the net and the per-step loss.
/// The rate is held for the first half and decays linearly to zero over the
/// second, which removes most of the gradient-noise jitter at the end.
pub fn train_scalar(cfg: &ScalarConfig) -> Result<(ScalarNet, Vec<f64>)> {
    if !(cfg.var > 0.0) || cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::Invalid("scalar flow needs var > 0, batch ≥ 1 and steps ≥ 1".into()));
    }
    let root = SeedRng::new(cfg.seed);
    let mut net = ScalarNet::new(cfg.hidden, root.split(0).seed())?;
    let mut adam = Adam::new(&net.store);
    let all = vec![true; net.store.len()];
    let opt = AdamConfig {
        clip_norm: None,
        ..AdamConfig::default()
    };
    let sd = cfg.var.sqrt();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = root.split(step + 1);
        let x: Vec<f64> = (0..cfg.batch).map(|_| cfg.mean + sd * rng.normal()).collect();
        let x = Tensor::new(vec![cfg.batch, 1], x)?;
        let batch = FlowBatch::draw(&x, &mut rng, TimeDistribution::Uniform)?;
        let mut g = Graph::new();
        let pred = net.forward(&mut g, batch.z_t.data(), &batch.t)?;
        let target = g.input(batch.target.clone())?;
        let loss = g.mse(pred, target)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                reason: format!("loss is {value}"),
            });
        }
        let grads = g.backward(loss)?.dense(&net.store);
        let lr = cfg.lr * (2.0 * (1.0 - step as f64 / cfg.steps as f64)).min(1.0);
        adam.step(&mut net.store, &grads, &all, lr, step + 1, &opt)?;
        losses.push(value);
    }
    snap_store(&mut net.store);
    Ok((net, losses))
}
