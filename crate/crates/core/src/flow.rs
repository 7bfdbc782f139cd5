//! Linear rectified flow: noise at `t = 1`, data at `t = 0`.
//!
//! The path is `z_t = t·noise + (1−t)·data`, its velocity `noise − data`,
//! and sampling integrates `dz/dt = v` with explicit Euler steps on a
//! descending schedule `1 = t₀ > … > t_K = 0`:
//! `z_{k+1} = z_k − (t_k − t_{k+1})·v(z_k, t_k)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::regime::ConditionRegime;
use crate::rng::SeedRng;

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_GUIDANCE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSchedule {
    times: Vec<f64>,
}

impl FlowSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::Invalid("schedule must start at 1 and end at 0".into()));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("schedule must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    /// `K+1` evenly spaced points from 1 down to 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        Self::new((0..=steps).map(|i| (steps - i) as f64 / steps as f64).collect())
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::Invalid(format!("guidance scale {scale} must be finite and >= 0")));
        }
        Ok(Self { scale })
    }
}

/// `t·noise + (1−t)·data`.
pub fn interpolate(z_data: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0,1]")));
    }
    z_data.zip_map(noise, "interpolate", |x, n| t * n + (1.0 - t) * x)
}

/// `noise − data`, the (time-constant) velocity of the linear path.
pub fn velocity_target(z_data: &Tensor, noise: &Tensor) -> Result<Tensor> {
    z_data.zip_map(noise, "velocity-target", |x, n| n - x)
}

pub fn euler_step(z: &Tensor, t_k: f64, t_next: f64, v: &Tensor) -> Result<Tensor> {
    if t_next >= t_k {
        return Err(Error::Invalid(format!("euler step needs t_k > t_next, got {t_k} -> {t_next}")));
    }
    let dt = t_k - t_next;
    z.zip_map(v, "euler-step", |a, b| a - dt * b)
}

/// `v_uncond + s·(v_cond − v_uncond)`. The endpoints `s = 1` and `s = 0`
/// return the corresponding input unchanged.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::shape("cfg-combine", v_cond.shape(), v_uncond.shape()));
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_cond.zip_map(v_uncond, "cfg-combine", |c, u| u + s * (c - u))
}

/// Anything that predicts a velocity for a batch of latents at one time.
pub trait VelocityField {
    fn velocity(&mut self, z: &Tensor, t: f64, regime: ConditionRegime) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Tensor, f64, ConditionRegime) -> Result<Tensor>,
{
    fn velocity(&mut self, z: &Tensor, t: f64, regime: ConditionRegime) -> Result<Tensor> {
        self(z, t, regime)
    }
}

/// Euler sampling from `N(0, I)` noise drawn from `rng`. For any regime other
/// than `Uncond` and a scale other than 1 the field is also queried
/// unconditionally and the two are combined with [`cfg_combine`].
pub fn sample<V: VelocityField + ?Sized>(
    field: &mut V,
    schedule: &FlowSchedule,
    guidance: GuidanceConfig,
    regime: ConditionRegime,
    rng: &mut SeedRng,
    shape: &[usize],
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let z0 = Tensor::new(shape.to_vec(), rng.normals(n))?;
    integrate(field, schedule, guidance, regime, z0)
}

/// [`sample`] from an explicit starting latent.
pub fn integrate<V: VelocityField + ?Sized>(
    field: &mut V,
    schedule: &FlowSchedule,
    guidance: GuidanceConfig,
    regime: ConditionRegime,
    mut z: Tensor,
) -> Result<Tensor> {
    let guided = regime != ConditionRegime::Uncond && guidance.scale != 1.0;
    let check = |v: Tensor, k: usize, z: &Tensor| -> Result<Tensor> {
        if v.shape() != z.shape() {
            return Err(Error::Invalid(format!(
                "velocity at step {k} has shape {:?}, latent is {:?}",
                v.shape(),
                z.shape()
            )));
        }
        Ok(v)
    };
    for (k, w) in schedule.times().windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let vc = check(field.velocity(&z, t, regime)?, k, &z)?;
        let v = if guided {
            let vu = check(field.velocity(&z, t, ConditionRegime::Uncond)?, k, &z)?;
            cfg_combine(&vc, &vu, guidance.scale)?
        } else {
            vc
        };
        z = euler_step(&z, t, t_next, &v)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeDistribution {
    #[default]
    Uniform,
    LogitNormal {
        mean: f64,
        std: f64,
    },
}

impl TimeDistribution {
    pub fn draw(&self, rng: &mut SeedRng) -> f64 {
        match *self {
            TimeDistribution::Uniform => rng.uniform(),
            TimeDistribution::LogitNormal { mean, std } => {
                let x = mean + std * rng.normal();
                1.0 / (1.0 + (-x).exp())
            }
        }
    }
}

/// One training batch on the linear path. `z_data` is `[B, ...]`; each batch
/// element gets its own time and noise.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub t: Vec<f64>,
    pub noise: Tensor,
    pub z_t: Tensor,
    pub target: Tensor,
}

impl FlowBatch {
    pub fn draw(z_data: &Tensor, rng: &mut SeedRng, dist: TimeDistribution) -> Result<Self> {
        let b = z_data.shape()[0];
        let per = z_data.numel() / b;
        let t: Vec<f64> = (0..b).map(|_| dist.draw(rng)).collect();
        let noise = Tensor::new(z_data.shape().to_vec(), rng.normals(z_data.numel()))?;
        let mut z_t = Vec::with_capacity(z_data.numel());
        for (i, (x, n)) in z_data.data().iter().zip(noise.data()).enumerate() {
            let ti = t[i / per];
            z_t.push(ti * n + (1.0 - ti) * x);
        }
        let z_t = Tensor::new(z_data.shape().to_vec(), z_t)?;
        let target = velocity_target(z_data, &noise)?;
        Ok(Self { t, noise, z_t, target })
    }
}

/// Mean squared error between the model's prediction at `(z_t, t)` and the
/// path velocity.
pub fn flow_loss<F>(g: &mut Graph, batch: &FlowBatch, model: F) -> Result<NodeId>
where
    F: FnOnce(&mut Graph, &Tensor, &[f64]) -> Result<NodeId>,
{
    let pred = model(g, &batch.z_t, &batch.t)?;
    let target = g.input(batch.target.clone())?;
    g.mse(pred, target)
}

pub mod scalar;

#[cfg(test)]
mod tests;
