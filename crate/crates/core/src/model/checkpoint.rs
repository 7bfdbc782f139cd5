//! `ckpt.json` manifest plus `ckpt.bin` payload of little-endian f32 values.
//!
//! Branch and bundle checkpoints share the format. Optimizer moments, when
//! present, are stored as extra tensors under `opt.m.` and `opt.v.`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BranchModel, Bundle, FusionStrategy, Modality, ModelConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "duoflow-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "ckpt.json";
pub const PAYLOAD_FILE: &str = "ckpt.bin";
pub const OPT_M: &str = "opt.m.";
pub const OPT_V: &str = "opt.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Branch,
    Bundle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// One entry for a branch, `[img slot, txt slot]` for a bundle.
    pub modalities: Vec<Modality>,
    pub strategy: FusionStrategy,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor)>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

/// Round every value to the nearest f32, the precision checkpoints keep.
pub fn snap_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// [`snap_f32`] over every parameter.
pub fn snap_store(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        snap_f32(store.get_mut(id));
    }
}

impl Checkpoint {
    fn build(
        kind: CheckpointKind,
        model: ModelConfig,
        modalities: Vec<Modality>,
        strategy: FusionStrategy,
        step: u64,
        tensors: Vec<(String, Tensor)>,
        meta: BTreeMap<String, String>,
    ) -> Self {
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format: FORMAT.into(),
                version: VERSION,
                kind,
                model,
                modalities,
                strategy,
                step,
                tensors: entries,
                payload_bytes: offset,
                payload_sha256: String::new(),
                meta,
            },
            tensors,
        }
    }

    fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
        store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn from_branch(model: &BranchModel, step: u64, meta: BTreeMap<String, String>) -> Self {
        Self::build(
            CheckpointKind::Branch,
            *model.cfg(),
            vec![model.modality()],
            FusionStrategy::Sim,
            step,
            Self::store_tensors(&model.store),
            meta,
        )
    }

    pub fn from_bundle(bundle: &Bundle, step: u64, meta: BTreeMap<String, String>) -> Self {
        Self::build(
            CheckpointKind::Bundle,
            bundle.cfg,
            vec![bundle.img.modality, bundle.txt.modality],
            bundle.strategy,
            step,
            Self::store_tensors(&bundle.store),
            meta,
        )
    }

    /// Append optimizer moments, one pair per parameter of `store`.
    pub fn with_moments(mut self, store: &ParamStore, m: &[Tensor], v: &[Tensor]) -> Self {
        let mut extra = Vec::new();
        for (prefix, set) in [(OPT_M, m), (OPT_V, v)] {
            for ((_, name, _), t) in store.iter().zip(set) {
                extra.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        let mut all = std::mem::take(&mut self.tensors);
        all.extend(extra);
        let man = self.manifest;
        Self::build(man.kind, man.model, man.modalities, man.strategy, man.step, all, man.meta)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Optimizer moments for every parameter of `store`, if all are present.
    pub fn moments(&self, store: &ParamStore) -> Option<(Vec<Tensor>, Vec<Tensor>)> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, p) in store.iter() {
            let a = self.get(&format!("{OPT_M}{name}"))?;
            let b = self.get(&format!("{OPT_V}{name}"))?;
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return None;
            }
            m.push(a.clone());
            v.push(b.clone());
        }
        Some((m, v))
    }

    fn fill(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.get(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(bad(format!("parameter {name} has shape {:?}", t.shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        let known: HashSet<&str> = store.iter().map(|(_, n, _)| n).collect();
        if let Some((n, _)) = self
            .tensors
            .iter()
            .find(|(n, _)| !n.starts_with("opt.") && !known.contains(n.as_str()))
        {
            return Err(bad(format!("unexpected parameter {n}")));
        }
        Ok(())
    }

    pub fn to_branch(&self) -> Result<BranchModel> {
        let m = &self.manifest;
        if m.kind != CheckpointKind::Branch || m.modalities.len() != 1 {
            return Err(bad("not a branch checkpoint"));
        }
        let mut model = BranchModel::new(&m.model, m.modalities[0], 0)?;
        self.fill(&mut model.store)?;
        Ok(model)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let m = &self.manifest;
        if m.kind != CheckpointKind::Bundle || m.modalities.len() != 2 {
            return Err(bad("not a bundle checkpoint"));
        }
        let mut bundle = Bundle::with_modalities(&m.model, [m.modalities[0], m.modalities[1]], m.strategy, 0)?;
        self.fill(&mut bundle.store)?;
        Ok(bundle)
    }

    /// Manifest JSON and payload bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut payload = Vec::with_capacity(self.manifest.payload_bytes as usize);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut man = self.manifest.clone();
        man.payload_sha256 = sha_hex(&payload);
        let mut json = serde_json::to_vec_pretty(&man)?;
        json.push(b'\n');
        Ok((json, payload))
    }

    pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Self> {
        let man: CheckpointManifest = serde_json::from_slice(manifest).map_err(|e| bad(e.to_string()))?;
        if man.format != FORMAT {
            return Err(bad(format!("format {:?}", man.format)));
        }
        if man.version != VERSION {
            return Err(bad(format!("unsupported version {}", man.version)));
        }
        man.model.validate().map_err(|e| bad(e.to_string()))?;
        let want_mods = match man.kind {
            CheckpointKind::Branch => 1,
            CheckpointKind::Bundle => 2,
        };
        if man.modalities.len() != want_mods {
            return Err(bad("modality count does not match kind"));
        }
        if man.payload_bytes != payload.len() as u64 {
            return Err(bad(format!("payload is {} bytes, manifest says {}", payload.len(), man.payload_bytes)));
        }
        if sha_hex(payload) != man.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut names = HashSet::new();
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(man.tensors.len());
        for e in &man.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            if e.offset != offset {
                return Err(bad(format!("tensor {} at offset {}, expected {offset}", e.name, e.offset)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                .filter(|&n| n > 0)
                .ok_or_else(|| bad(format!("tensor {} has bad shape {:?}", e.name, e.shape)))?;
            let end = numel
                .checked_mul(4)
                .and_then(|b| offset.checked_add(b))
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
            let data: Vec<f64> = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {} has non-finite values", e.name)));
            }
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            offset = end;
        }
        if offset != payload.len() as u64 {
            return Err(bad("trailing payload bytes"));
        }
        Ok(Self { manifest: man, tensors })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (json, payload) = self.encode()?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        std::fs::write(dir.join(PAYLOAD_FILE), payload)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let json = std::fs::read(dir.join(MANIFEST_FILE))?;
        let payload = std::fs::read(dir.join(PAYLOAD_FILE))?;
        Self::decode(&json, &payload)
    }

    /// SHA-256 over manifest and payload, for reproducibility checks.
    pub fn checksum(&self) -> Result<String> {
        let (json, payload) = self.encode()?;
        let mut h = Sha256::new();
        h.update(&json);
        h.update(&payload);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
