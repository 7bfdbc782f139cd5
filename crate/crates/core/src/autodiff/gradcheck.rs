//! Central-difference verification of backward rules.

use super::{Graph, NodeId, OpKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Threshold used by the op and model checks.
pub const MAX_REL_ERR: f64 = 1e-4;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step <= 1e-2 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("finite-difference step {step} outside (0, 1e-2]")))
    }
}

fn scalar_of(g: &Graph, out: NodeId) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Max relative error between the backward gradient of `f` at `point` and
/// central differences with the given step.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_with(f, point, step, None)
}

pub fn grad_check_with<F>(f: F, point: &Tensor, step: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_step(step)?;
    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p)?;
        let out = f(&mut g, x)?;
        scalar_of(&g, out)
    };
    let mut g = fault.map(Graph::with_fault).unwrap_or_default();
    let x = g.input(point.clone())?;
    let out = f(&mut g, x)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .node(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to every coordinate of
/// every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    check_step(step)?;
    let mut g = fault.map(Graph::with_fault).unwrap_or_default();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.dense(store);

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let mut gp = Graph::new();
            let op = f(&mut gp, &probe)?;
            let fp = scalar_of(&gp, op)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let mut gm = Graph::new();
            let om = f(&mut gm, &probe)?;
            let fm = scalar_of(&gm, om)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic[id.index()].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn randn(rng: &mut SeedRng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.normal())
}

/// `sum(out ⊙ r)` for a fixed random `r`, built from graph ops so that every
/// output coordinate gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, out: NodeId, rng: &mut SeedRng) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).numel() as f64;
    let w = g.input(randn(rng, &shape, 1.0))?;
    let p = g.mul(out, w)?;
    let m = g.mean(p)?;
    g.scale(m, n)
}

/// Gradient check of a single op kind on random conforming inputs.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = SeedRng::new(seed);
    let mut store = ParamStore::new();
    let wseed = rng.split(0xFEED).seed();
    let weight = move || SeedRng::new(wseed);

    macro_rules! p {
        ($name:expr, $shape:expr) => {
            store.add($name, randn(&mut rng, &$shape, 1.0))?
        };
    }

    match kind {
        OpKind::MatMul => {
            let a = p!("a", [2, 3, 4]);
            let b = p!("b", [4, 5]);
            let c = p!("c", [2, 4, 5]);
            grad_check_params(
                &store,
                |g, s| {
                    let (a, b, c) = (g.param(s, a)?, g.param(s, b)?, g.param(s, c)?);
                    let ab = g.matmul(a, b)?;
                    // batched, transposed second operand
                    let abc = g.matmul_t(ab, c)?;
                    weighted_sum(g, abc, &mut weight())
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::Add | OpKind::Mul => {
            let a = p!("a", [2, 3, 4]);
            let b = p!("b", [2, 1, 4]);
            let c = p!("c", [4]);
            grad_check_params(
                &store,
                |g, s| {
                    let (a, b, c) = (g.param(s, a)?, g.param(s, b)?, g.param(s, c)?);
                    let out = if kind == OpKind::Add {
                        let ab = g.add(a, b)?;
                        g.add(c, ab)?
                    } else {
                        let ab = g.mul(a, b)?;
                        g.mul(c, ab)?
                    };
                    weighted_sum(g, out, &mut weight())
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::Concat => {
            let a = p!("a", [2, 3, 2]);
            let b = p!("b", [2, 3, 3]);
            grad_check_params(
                &store,
                |g, s| {
                    let (a, b) = (g.param(s, a)?, g.param(s, b)?);
                    let out = g.concat(&[a, b, a])?;
                    weighted_sum(g, out, &mut weight())
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::Split => {
            let a = p!("a", [3, 6]);
            grad_check_params(
                &store,
                |g, s| {
                    let a = g.param(s, a)?;
                    let parts = g.split(a, &[2, 1, 3])?;
                    let mut rng = weight();
                    let mut total = weighted_sum(g, parts[0], &mut rng)?;
                    for &p in &parts[1..] {
                        let t = weighted_sum(g, p, &mut rng)?;
                        total = g.add(total, t)?;
                    }
                    Ok(total)
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::Mean => {
            let a = p!("a", [3, 4]);
            grad_check_params(
                &store,
                |g, s| {
                    let a = g.param(s, a)?;
                    let w = g.input(randn(&mut weight(), &[3, 4], 1.0))?;
                    let aw = g.mul(a, w)?;
                    g.mean(aw)
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::Mse => {
            let a = p!("a", [3, 4]);
            let b = p!("b", [3, 4]);
            grad_check_params(
                &store,
                |g, s| {
                    let (a, b) = (g.param(s, a)?, g.param(s, b)?);
                    g.mse(a, b)
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::LayerNorm | OpKind::Softmax | OpKind::Sigmoid | OpKind::Gelu | OpKind::Scale => {
            let a = p!("a", [3, 5]);
            grad_check_params(
                &store,
                |g, s| {
                    let a = g.param(s, a)?;
                    let out = match kind {
                        OpKind::LayerNorm => g.layer_norm(a)?,
                        OpKind::Softmax => g.softmax(a)?,
                        OpKind::Sigmoid => g.sigmoid(a)?,
                        OpKind::Gelu => g.gelu(a)?,
                        _ => g.scale(a, -1.7)?,
                    };
                    weighted_sum(g, out, &mut weight())
                },
                DEFAULT_STEP,
                fault,
            )
        }
        OpKind::EmbedLookup => {
            let t = p!("table", [5, 3]);
            grad_check_params(
                &store,
                |g, s| {
                    let t = g.param(s, t)?;
                    let out = g.embed(t, &[0, 2, 2, 4], &[2, 2])?;
                    weighted_sum(g, out, &mut weight())
                },
                DEFAULT_STEP,
                fault,
            )
        }
    }
}
