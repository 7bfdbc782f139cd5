use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, 1/fan_in)`.
    Fan,
    Normal(f64),
    Zero,
}

fn init_tensor(shape: Vec<usize>, init: Init, fan_in: usize, rng: &mut SeedRng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Fan => {
            let std = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| std * rng.normal())
        }
        Init::Normal(std) => Tensor::from_fn(shape, |_| std * rng.normal()),
    }
}

pub(crate) fn param(store: &mut ParamStore, name: String, shape: Vec<usize>, init: Init, rng: &mut SeedRng) -> Result<ParamId> {
    let fan_in = shape.first().copied().unwrap_or(1);
    store.add(name, init_tensor(shape, init, fan_in, rng))
}

/// `x·W + b` on the last axis. `W` is `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let w = param(store, format!("{name}.w"), vec![fan_in, fan_out], init, rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Multi-head attention from `x_q` tokens to `x_kv` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        inner: usize,
        out: usize,
        heads: usize,
        out_init: Init,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Invalid(format!("{inner} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), q_in, inner, false, Init::Fan, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_in, inner, false, Init::Fan, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_in, inner, false, Init::Fan, rng)?,
            o: Linear::new(store, &format!("{name}.o"), inner, out, true, out_init, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_q: NodeId, x_kv: NodeId) -> Result<NodeId> {
        let q = self.q.forward(g, store, x_q)?;
        let k = self.k.forward(g, store, x_kv)?;
        let v = self.v.forward(g, store, x_kv)?;
        let dh = self.q.fan_out / self.heads;
        let widths = vec![dh; self.heads];
        let (qs, ks, vs) = (g.split(q, &widths)?, g.split(k, &widths)?, g.split(v, &widths)?);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let s = g.matmul_t(qs[h], ks[h])?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s)?;
            outs.push(g.matmul(a, vs[h])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        self.o.forward(g, store, cat)
    }
}

/// Two-layer GELU MLP used for the time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub features: usize,
}

impl TimeMlp {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, width: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), features, width, true, Init::Fan, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, true, Init::Fan, rng)?,
            features,
        })
    }

    /// `gelu(MLP(sinusoid(t)))`, shape `[B, 1, width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t: &[f64]) -> Result<NodeId> {
        let x = g.input(time_features(t, self.features))?;
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        g.gelu(h)
    }
}

/// Sinusoidal features of `1000·t`, shape `[B, 1, F]`: F/2 sines then F/2 cosines.
pub fn time_features(t: &[f64], features: usize) -> Tensor {
    let half = features / 2;
    let mut data = Vec::with_capacity(t.len() * features);
    for &ti in t {
        let x = 1000.0 * ti;
        let freq = |i: usize| (-(10000f64).ln() * i as f64 / half as f64).exp();
        data.extend((0..half).map(|i| (x * freq(i)).sin()));
        data.extend((0..half).map(|i| (x * freq(i)).cos()));
        data.extend(std::iter::repeat_n(0.0, features - 2 * half));
    }
    Tensor::new(vec![t.len(), 1, features], data).expect("time feature shape")
}

/// Fixed sinusoidal code for positions on a `side^dims` lattice, used to
/// initialize learned positional tables. Rows follow row-major lattice order.
pub fn lattice_code(side: usize, dims: usize, width: usize) -> Tensor {
    let count = side.pow(dims as u32);
    Tensor::from_fn(vec![count, width], |i| {
        let (row, j) = (i / width, i % width);
        let axis = j % dims;
        let coord = (row / side.pow((dims - 1 - axis) as u32)) % side;
        let r = j / dims;
        let w = 1.5 * 0.5f64.powi((r / 2) as i32);
        let a = coord as f64 * w;
        if r % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// `LN(x)·(1 + scale) + shift`.
pub fn modulate(g: &mut Graph, x: NodeId, shift: NodeId, scale: NodeId) -> Result<NodeId> {
    let ln = g.layer_norm(x)?;
    let one = g.scalar(1.0)?;
    let s = g.add(scale, one)?;
    let y = g.mul(ln, s)?;
    g.add(y, shift)
}

/// `[B]` keep flags as a `[B,1,1]` 0/1 mask.
pub fn keep_mask(keep: &[bool]) -> Tensor {
    Tensor::new(vec![keep.len(), 1, 1], keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
        .expect("mask shape")
}
