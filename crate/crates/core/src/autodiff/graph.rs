use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, gemm, Bcast};
use super::tensor::Tensor;
use super::{LAYER_NORM_EPS, SIGMOID_CLAMP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operation kinds. Networks are expressed only in these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Split,
    Mean,
    Mse,
    LayerNorm,
    Softmax,
    Sigmoid,
    Gelu,
    Scale,
    EmbedLookup,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Mean,
        OpKind::Mse,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Scale,
        OpKind::EmbedLookup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise-mul",
            OpKind::Concat => "concat-last-axis",
            OpKind::Split => "split-last-axis",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Softmax => "softmax-last-axis",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Scale => "scale",
            OpKind::EmbedLookup => "embed-lookup",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { trans_b: bool },
    Add,
    Mul,
    Concat,
    Split { offset: usize },
    Mean,
    Mse,
    LayerNorm,
    Softmax,
    Sigmoid,
    Gelu,
    Scale(f64),
    Embed { indices: Vec<usize> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Input | Op::Param(_) => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Concat => OpKind::Concat,
            Op::Split { .. } => OpKind::Split,
            Op::Mean => OpKind::Mean,
            Op::Mse => OpKind::Mse,
            Op::LayerNorm => OpKind::LayerNorm,
            Op::Softmax => OpKind::Softmax,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Gelu => OpKind::Gelu,
            Op::Scale(_) => OpKind::Scale,
            Op::Embed { .. } => OpKind::EmbedLookup,
        })
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Per-op saved data (layer-norm inverse std per row).
    cache: Vec<f64>,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Gradients of one backward pass, for every leaf that received one.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    /// One gradient per parameter of `store`; parameters that did not
    /// contribute to the loss get zeros.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, v)| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

/// A single-use tape. Nodes are appended in evaluation order, so inputs
/// always precede their consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    fault: Option<OpKind>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong. Used to
    /// prove that gradient checking catches a broken rule.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, cache: Vec<f64>) -> Result<NodeId> {
        let name = op.kind().map(OpKind::name).unwrap_or("leaf");
        check_finite(name, &value)?;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            cache,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf. Gradients still flow to it and can be read back.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, vec![], value, vec![])
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.input(Tensor::scalar(value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.params.get(&id) {
            return Ok(n);
        }
        let n = self.push(Op::Param(id), vec![], store.get(id).clone(), vec![])?;
        self.params.insert(id, n);
        Ok(n)
    }

    /// `a·b` over the last two axes. `b` is either a shared 2-D matrix or has
    /// the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatGeo::new(&sa, &sb, trans_b).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out = vec![0.0; geo.batch * geo.n * geo.m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if geo.shared {
            gemm(geo.batch * geo.n, geo.k, geo.m, av, false, bv, trans_b, 0.0, &mut out);
        } else {
            for i in 0..geo.batch {
                gemm(
                    geo.n,
                    geo.k,
                    geo.m,
                    &av[i * geo.n * geo.k..(i + 1) * geo.n * geo.k],
                    false,
                    &bv[i * geo.k * geo.m..(i + 1) * geo.k * geo.m],
                    trans_b,
                    0.0,
                    &mut out[i * geo.n * geo.m..(i + 1) * geo.n * geo.m],
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(geo.m);
        let value = Tensor::new(shape, out)?;
        self.push(Op::MatMul { trans_b }, vec![a, b], value, vec![])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let kind = op.kind().unwrap().name();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(kind, &sa, &sb))?;
        let (ma, mb) = (Bcast::new(&shape, &sa), Bcast::new(&shape, &sb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        kernels::for_runs(n, &ma, &mb, |_, len, oa, ob| {
            data.extend(av[oa..oa + len].iter().zip(&bv[ob..ob + len]).map(|(&x, &y)| f(x, y)));
        });
        let value = Tensor::new(shape, data)?;
        self.push(op, vec![a, b], value, vec![])
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat-last-axis", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Concat, parts.to_vec(), value, vec![])
    }

    /// Split the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, x: NodeId, widths: &[usize]) -> Result<Vec<NodeId>> {
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap();
        if widths.iter().sum::<usize>() != last || widths.contains(&0) {
            return Err(Error::shape("split-last-axis", &s, widths));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let mut out = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            let src = self.value(x).data();
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&src[r * last + offset..r * last + offset + w]);
            }
            let mut shape = s[..s.len() - 1].to_vec();
            shape.push(w);
            let value = Tensor::new(shape, data)?;
            out.push(self.push(Op::Split { offset }, vec![x], value, vec![])?);
            offset += w;
        }
        Ok(out)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(m), vec![])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", va.shape(), vb.shape()));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = s / va.numel() as f64;
        self.push(Op::Mse, vec![a, b], Tensor::scalar(m), vec![])
    }

    /// Normalize over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        let rows = v.numel() / d;
        let mut out = vec![0.0; v.numel()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[r] = is;
            for (o, a) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (a - mu) * is;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::LayerNorm, vec![x], value, inv)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Softmax, vec![x], value, vec![])
    }

    /// Logistic function; logits are clamped to `±SIGMOID_CLAMP`.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(kernels::sigmoid_clamped);
        self.push(Op::Sigmoid, vec![x], value, vec![])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu, vec![x], value, vec![])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let value = self.value(x).map(|a| a * c);
        self.push(Op::Scale(c), vec![x], value, vec![])
    }

    /// Gather rows of a `[V, D]` table. Output shape is `index_shape + [D]`.
    pub fn embed(&mut self, table: NodeId, indices: &[usize], index_shape: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("embed-lookup", &ts, index_shape));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!("embed-lookup: index {bad} out of range {rows}")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        self.push(
            Op::Embed {
                indices: indices.to_vec(),
            },
            vec![table],
            value,
            vec![],
        )
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(ls.shape().to_vec(), vec![1.0])?);
        let mut result = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Param(pid) => {
                    result.params.insert(pid, g);
                    continue;
                }
                Op::Input => {
                    result.leaves.insert(NodeId(idx), g);
                    continue;
                }
                _ => {}
            }
            let mut local = self.local_grads(node, &g)?;
            if node.op.kind() == self.fault {
                for t in local.iter_mut() {
                    for v in t.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (inp, lg) in node.inputs.iter().zip(local) {
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(lg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(lg),
                }
            }
        }
        Ok(result)
    }

    /// Gradient contribution to each input of `node`, given its output gradient.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let out = &node.value;
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { trans_b } => {
                let (a, b) = (inp(0), inp(1));
                let geo = MatGeo::new(a.shape(), b.shape(), *trans_b).unwrap();
                let (n, k, m) = (geo.n, geo.k, geo.m);
                let mut da = vec![0.0; a.numel()];
                let mut db = vec![0.0; b.numel()];
                if geo.shared {
                    let rows = geo.batch * n;
                    // dA = dC · Bᵀ (or dC · B when b is stored transposed)
                    gemm(rows, m, k, g.data(), false, b.data(), !trans_b, 0.0, &mut da);
                    if *trans_b {
                        gemm(m, rows, k, g.data(), true, a.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, rows, m, a.data(), true, g.data(), false, 0.0, &mut db);
                    }
                } else {
                    for i in 0..geo.batch {
                        let gs = &g.data()[i * n * m..(i + 1) * n * m];
                        let as_ = &a.data()[i * n * k..(i + 1) * n * k];
                        let bs = &b.data()[i * k * m..(i + 1) * k * m];
                        gemm(n, m, k, gs, false, bs, !trans_b, 0.0, &mut da[i * n * k..(i + 1) * n * k]);
                        let dbs = &mut db[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            gemm(m, n, k, gs, true, as_, false, 0.0, dbs);
                        } else {
                            gemm(k, n, m, as_, true, gs, false, 0.0, dbs);
                        }
                    }
                }
                vec![
                    Tensor::new(a.shape().to_vec(), da)?,
                    Tensor::new(b.shape().to_vec(), db)?,
                ]
            }
            Op::Add | Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let ma = Bcast::new(out.shape(), a.shape());
                let mb = Bcast::new(out.shape(), b.shape());
                let mut da = vec![0.0; a.numel()];
                let mut db = vec![0.0; b.numel()];
                let is_mul = matches!(node.op, Op::Mul);
                let (av, bv, gv) = (a.data(), b.data(), g.data());
                kernels::for_runs(gv.len(), &ma, &mb, |s, len, oa, ob| {
                    let gs = &gv[s..s + len];
                    if is_mul {
                        for j in 0..len {
                            da[oa + j] += gs[j] * bv[ob + j];
                            db[ob + j] += gs[j] * av[oa + j];
                        }
                    } else {
                        for j in 0..len {
                            da[oa + j] += gs[j];
                            db[ob + j] += gs[j];
                        }
                    }
                });
                vec![
                    Tensor::new(a.shape().to_vec(), da)?,
                    Tensor::new(b.shape().to_vec(), db)?,
                ]
            }
            Op::Concat => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let w = inp(i).last_dim();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    res.push(Tensor::new(inp(i).shape().to_vec(), d)?);
                    offset += w;
                }
                res
            }
            Op::Split { offset } => {
                let x = inp(0);
                let last = x.last_dim();
                let w = out.last_dim();
                let mut d = vec![0.0; x.numel()];
                for (r, chunk) in g.data().chunks(w).enumerate() {
                    d[r * last + offset..r * last + offset + w].copy_from_slice(chunk);
                }
                vec![Tensor::new(x.shape().to_vec(), d)?]
            }
            Op::Mean => {
                let x = inp(0);
                let c = g.data()[0] / x.numel() as f64;
                vec![Tensor::full(x.shape().to_vec(), c)]
            }
            Op::Mse => {
                let (a, b) = (inp(0), inp(1));
                let c = 2.0 * g.data()[0] / a.numel() as f64;
                let da = a.zip_map(b, "mse", |x, y| c * (x - y))?;
                let db = da.map(|v| -v);
                vec![da, db]
            }
            Op::LayerNorm => {
                let d = out.last_dim();
                let mut dx = vec![0.0; out.numel()];
                for (r, &is) in node.cache.iter().enumerate() {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let mg = gy.iter().sum::<f64>() / d as f64;
                    let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is * (gy[j] - mg - y[j] * mgy);
                    }
                }
                vec![Tensor::new(out.shape().to_vec(), dx)?]
            }
            Op::Softmax => {
                let d = out.last_dim();
                let mut dx = vec![0.0; out.numel()];
                for r in 0..out.numel() / d {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let s: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = y[j] * (gy[j] - s);
                    }
                }
                vec![Tensor::new(out.shape().to_vec(), dx)?]
            }
            Op::Sigmoid => {
                let x = inp(0);
                let data = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xi, &y), &gi)| {
                        if xi.abs() < SIGMOID_CLAMP {
                            gi * y * (1.0 - y)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data)?]
            }
            Op::Gelu => {
                let x = inp(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * kernels::gelu_grad(xi))
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data)?]
            }
            Op::Scale(c) => vec![g.map(|v| v * c)],
            Op::Embed { indices } => {
                let t = inp(0);
                let d = t.last_dim();
                let mut dt = vec![0.0; t.numel()];
                for (k, &row) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[row * d + j] += g.data()[k * d + j];
                    }
                }
                vec![Tensor::new(t.shape().to_vec(), dt)?]
            }
        })
    }
}

struct MatGeo {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    shared: bool,
}

impl MatGeo {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Option<MatGeo> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if kb != k {
            return None;
        }
        let batch = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return None;
        }
        Some(MatGeo { batch, n, k, m, shared })
    }
}
