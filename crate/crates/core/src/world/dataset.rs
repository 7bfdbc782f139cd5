//! `manifest.json` + `payload.bin` dataset files.
//!
//! The payload holds one fixed-size record per asset, in manifest order:
//! the `G³·4` grid, then one `P²·4` render per manifest view (all
//! little-endian `f32`), then the text token ids as little-endian `i32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_view, sample_asset, Attributes, Image, ToyAsset, View, VoxelGrid, CHANNELS, NULL_TOKEN, TEXT_TOKENS};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub const FORMAT: &str = "duoflow-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

const MAX_GRID: usize = 64;
const MAX_IMAGE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Ground-truth assets from the generator.
    Toy,
    /// Model outputs; may be empty grids and may carry null tokens.
    Generated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: [usize; 2],
    pub test: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
    pub grid_resolution: usize,
    pub image_size: usize,
    pub views: Vec<View>,
    pub text_tokens: usize,
    pub record_bytes: u64,
    pub splits: Splits,
    pub offsets: Vec<u64>,
    pub payload_sha256: String,
    /// For generated sets: the ground-truth asset each record was
    /// conditioned on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_ids: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub grid: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Fraction of assets (from the end) held out as the test split.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            grid: super::DEFAULT_GRID,
            image_size: super::DEFAULT_IMAGE,
            patch: super::DEFAULT_PATCH,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Invalid("empty dataset".into()));
        }
        if self.grid < 8 || self.grid % 2 != 0 || self.grid > MAX_GRID {
            return Err(Error::Invalid(format!("grid resolution {} must be even and in 8..={MAX_GRID}", self.grid)));
        }
        if self.image_size % self.grid != 0 || self.image_size > MAX_IMAGE {
            return Err(Error::Invalid(format!(
                "image size {} must be a multiple of the grid resolution",
                self.image_size
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Invalid(format!("patch {} does not divide image size", self.patch)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Invalid("test_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub grid: VoxelGrid,
    /// One render per manifest view.
    pub views: Vec<Image>,
    pub tokens: [usize; TEXT_TOKENS],
}

impl Record {
    pub fn from_asset(asset: &ToyAsset, image_size: usize) -> Result<Self> {
        Ok(Self {
            views: View::ALL
                .iter()
                .map(|&v| render_view(&asset.grid, v, image_size))
                .collect::<Result<_>>()?,
            grid: asset.grid.clone(),
            tokens: asset.attrs.token_ids(),
        })
    }

    pub fn attrs(&self) -> Option<Attributes> {
        Attributes::from_token_ids(&self.tokens).ok()
    }

    pub fn view(&self, view: View) -> &Image {
        &self.views[view.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<Record>,
}

fn record_floats(g: usize, p: usize, views: usize) -> usize {
    g * g * g * CHANNELS + views * p * p * 4
}

fn record_bytes(g: usize, p: usize, views: usize) -> u64 {
    (4 * (record_floats(g, p, views) + TEXT_TOKENS)) as u64
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Test split size for `count` assets.
pub fn test_count(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction).round() as usize).min(count.saturating_sub(1))
}

impl Dataset {
    /// Pure function of `(seed, config)`: asset `i` is drawn from stream
    /// `SeedRng::new(seed).split(i)`.
    pub fn generate(seed: u64, cfg: &DataConfig) -> Result<Dataset> {
        cfg.validate()?;
        let root = SeedRng::new(seed);
        let records = (0..cfg.count)
            .map(|i| {
                let asset = sample_asset(&mut root.split(i as u64), cfg.grid)?;
                Record::from_asset(&asset, cfg.image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let test = test_count(cfg.count, cfg.test_fraction);
        Dataset::from_records(DatasetKind::Toy, seed, cfg.grid, cfg.image_size, records, test, None)
    }

    pub fn from_records(
        kind: DatasetKind,
        seed: u64,
        grid_resolution: usize,
        image_size: usize,
        records: Vec<Record>,
        test: usize,
        asset_ids: Option<Vec<usize>>,
    ) -> Result<Dataset> {
        let count = records.len();
        if test > count {
            return Err(Error::Invalid("test split larger than dataset".into()));
        }
        if asset_ids.as_ref().is_some_and(|ids| ids.len() != count) {
            return Err(Error::Invalid("asset_ids length differs from record count".into()));
        }
        let rb = record_bytes(grid_resolution, image_size, View::ALL.len());
        let mut ds = Dataset {
            manifest: DatasetManifest {
                format: FORMAT.into(),
                version: VERSION,
                kind,
                seed,
                count,
                grid_resolution,
                image_size,
                views: View::ALL.to_vec(),
                text_tokens: TEXT_TOKENS,
                record_bytes: rb,
                splits: Splits {
                    train: [0, count - test],
                    test: [count - test, count],
                },
                offsets: (0..count as u64).map(|i| i * rb).collect(),
                payload_sha256: String::new(),
                asset_ids,
            },
            records,
        };
        let payload = ds.payload_bytes();
        ds.manifest.payload_sha256 = sha_hex(&payload);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn checksum(&self) -> &str {
        &self.manifest.payload_sha256
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        self.manifest.splits.train[0]..self.manifest.splits.train[1]
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.manifest.splits.test[0]..self.manifest.splits.test[1]
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * self.manifest.record_bytes as usize);
        for r in &self.records {
            for v in r.grid.data().iter().chain(r.views.iter().flat_map(|im| im.data.iter())) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for &t in &r.tokens {
                out.extend_from_slice(&(t as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        Ok((manifest, self.payload_bytes()))
    }

    /// Parse and fully validate a manifest/payload pair.
    pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Dataset> {
        let bad = |reason: String| Error::format("dataset", reason);
        let m: DatasetManifest = serde_json::from_slice(manifest).map_err(|e| bad(format!("manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", m.format, m.version)));
        }
        let g = m.grid_resolution;
        if !(8..=MAX_GRID).contains(&g) || g % 2 != 0 {
            return Err(bad(format!("grid resolution {g}")));
        }
        if m.image_size == 0 || m.image_size > MAX_IMAGE || m.image_size % g != 0 {
            return Err(bad(format!("image size {}", m.image_size)));
        }
        if m.views != View::ALL {
            return Err(bad("views must be [front, top, bottom]".into()));
        }
        if m.text_tokens != TEXT_TOKENS {
            return Err(bad(format!("text_tokens {}", m.text_tokens)));
        }
        let rb = record_bytes(g, m.image_size, m.views.len());
        if m.record_bytes != rb {
            return Err(bad(format!("record_bytes {} (expected {rb})", m.record_bytes)));
        }
        let expected_len = (m.count as u64).checked_mul(rb).ok_or_else(|| bad("count overflow".into()))?;
        if payload.len() as u64 != expected_len {
            return Err(bad(format!("payload is {} bytes, manifest implies {expected_len}", payload.len())));
        }
        if m.offsets.len() != m.count {
            return Err(bad("offset count differs from asset count".into()));
        }
        for (i, &o) in m.offsets.iter().enumerate() {
            if o != i as u64 * rb {
                return Err(bad(format!("offset {i} is {o}, records are not contiguous")));
            }
        }
        let Splits { train, test } = &m.splits;
        if train[0] != 0 || train[1] != test[0] || test[1] != m.count || train[1] < train[0] || test[1] < test[0] {
            return Err(bad("splits must partition 0..count".into()));
        }
        if m.asset_ids.as_ref().is_some_and(|ids| ids.len() != m.count) {
            return Err(bad("asset_ids length differs from count".into()));
        }
        if sha_hex(payload) != m.payload_sha256 {
            return Err(bad("payload checksum mismatch".into()));
        }

        let floats = record_floats(g, m.image_size, m.views.len());
        let grid_len = g * g * g * CHANNELS;
        let img_len = m.image_size * m.image_size * 4;
        let mut records = Vec::with_capacity(m.count);
        for (i, chunk) in payload.chunks_exact(rb as usize).enumerate() {
            let mut vals = Vec::with_capacity(floats);
            for b in chunk[..floats * 4].chunks_exact(4) {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("record {i}: value {v} outside [0,1]")));
                }
                vals.push(v);
            }
            let mut tokens = [0usize; TEXT_TOKENS];
            for (t, b) in tokens.iter_mut().zip(chunk[floats * 4..].chunks_exact(4)) {
                let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                *t = usize::try_from(v).map_err(|_| bad(format!("record {i}: negative token id")))?;
            }
            let all_null = tokens.iter().all(|&t| t == NULL_TOKEN);
            let tokens_ok = Attributes::from_token_ids(&tokens).is_ok();
            match m.kind {
                DatasetKind::Toy if !tokens_ok => return Err(bad(format!("record {i}: invalid token ids"))),
                DatasetKind::Generated if !tokens_ok && !all_null => {
                    return Err(bad(format!("record {i}: invalid token ids")))
                }
                _ => {}
            }
            let grid = VoxelGrid::from_data(g, vals[..grid_len].to_vec())?;
            grid.check_invariants().map_err(|e| bad(format!("record {i}: {e}")))?;
            if m.kind == DatasetKind::Toy && grid.occupied_count() == 0 {
                return Err(bad(format!("record {i}: empty asset")));
            }
            let views = (0..m.views.len())
                .map(|v| Image {
                    size: m.image_size,
                    data: vals[grid_len + v * img_len..grid_len + (v + 1) * img_len].to_vec(),
                })
                .collect();
            records.push(Record { grid, views, tokens });
        }
        Ok(Dataset { manifest: m, records })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (manifest, payload) = self.encode()?;
        std::fs::write(dir.join(PAYLOAD_FILE), payload)?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let manifest = std::fs::read(dir.join(MANIFEST_FILE))?;
        let payload = std::fs::read(dir.join(PAYLOAD_FILE))?;
        Dataset::decode(&manifest, &payload)
    }
}
