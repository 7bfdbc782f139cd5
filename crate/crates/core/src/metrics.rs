//! Hungarian-matched view similarity and Fréchet distance over a seeded toy
//! feature space.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::world::{project, Image, View, VoxelGrid, CHANNELS};

pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 64;
/// Pooling cells per image side.
pub const POOL_GRID: usize = 4;
pub const FEATURES_FORMAT: &str = "duoflow-features";
pub const FEATURES_MANIFEST: &str = "features.json";
pub const FEATURES_PAYLOAD: &str = "features.bin";
pub const MAX_VIEWS: usize = 16;
/// Tolerance for asymmetry and negative eigenvalues, relative to the
/// largest entry (at least 1).
pub const PSD_TOL: f64 = 1e-8;
/// Largest negative Fréchet distance treated as round-off.
pub const FD_CLIP: f64 = -1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gt,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprint {
    pub seed: u64,
    pub version: u32,
    pub dim: usize,
    pub pool: usize,
}

/// Per-cell channel means and standard deviations over a `POOL_GRID²` grid,
/// projected by a fixed matrix with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    seed: u64,
    proj: DMatrix<f64>,
}

pub fn pooled_dim() -> usize {
    POOL_GRID * POOL_GRID * CHANNELS * 2
}

impl Extractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = SeedRng::new(seed);
        let n = pooled_dim();
        let gauss = DMatrix::from_fn(n, FEATURE_DIM, |_, _| rng.normal());
        let q = gauss.qr().q();
        Self {
            seed,
            proj: q.transpose(),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            seed: self.seed,
            version: FEATURE_VERSION,
            dim: FEATURE_DIM,
            pool: POOL_GRID,
        }
    }

    pub fn pooled(image: &Image) -> Result<Vec<f64>> {
        let p = image.size;
        if p == 0 || p % POOL_GRID != 0 || image.data.len() != p * p * CHANNELS {
            return Err(Error::Invalid(format!("image size {p} is not a positive multiple of {POOL_GRID}")));
        }
        let cell = p / POOL_GRID;
        let n = (cell * cell) as f64;
        let mut out = Vec::with_capacity(pooled_dim());
        for cr in 0..POOL_GRID {
            for cc in 0..POOL_GRID {
                for ch in 0..CHANNELS {
                    let vals = (0..cell * cell).map(|k| {
                        let (r, c) = (cr * cell + k / cell, cc * cell + k % cell);
                        image.data[(r * p + c) * CHANNELS + ch]
                    });
                    let mean = vals.clone().sum::<f64>() / n;
                    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    out.push(mean);
                    out.push(var.sqrt());
                }
            }
        }
        Ok(out)
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let pooled = DVector::from_vec(Self::pooled(image)?);
        Ok((&self.proj * pooled).iter().copied().collect())
    }

    /// One row per image; all images must share a size.
    pub fn extract(&self, images: &[Image], source: Source, views_per_object: usize) -> Result<FeatureSet> {
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.size != first.size) {
                return Err(Error::Invalid("images differ in size".into()));
            }
        }
        let mut data = Vec::with_capacity(images.len() * FEATURE_DIM);
        for im in images {
            data.extend(self.features(im)?);
        }
        FeatureSet::new(data, FEATURE_DIM, source, self.fingerprint(), views_per_object)
    }
}

/// `M×d` feature rows. Rows come in groups of `views` consecutive rows, one
/// group per object.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: DMatrix<f64>,
    pub source: Source,
    pub fingerprint: Fingerprint,
    pub views: usize,
}

impl FeatureSet {
    pub fn new(data: Vec<f64>, dim: usize, source: Source, fingerprint: Fingerprint, views: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Invalid(format!("{} values do not form rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "features" });
        }
        let m = data.len() / dim;
        if views == 0 || m % views != 0 {
            return Err(Error::Invalid(format!("{m} rows do not split into groups of {views} views")));
        }
        Ok(Self {
            rows: DMatrix::from_row_slice(m, dim, &data),
            source,
            fingerprint,
            views,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn objects(&self) -> usize {
        self.len() / self.views
    }

    /// Rows of object `i`.
    pub fn object(&self, i: usize) -> DMatrix<f64> {
        self.rows.rows(i * self.views, self.views).into_owned()
    }

    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut payload = Vec::with_capacity(4 * self.rows.len());
        for r in 0..self.len() {
            for c in 0..self.dim() {
                payload.extend_from_slice(&(self.rows[(r, c)] as f32).to_le_bytes());
            }
        }
        let man = FeaturesManifest {
            format: FEATURES_FORMAT.into(),
            version: FEATURE_VERSION,
            source: self.source,
            extractor: self.fingerprint,
            rows: self.len(),
            dim: self.dim(),
            views: self.views,
            payload_sha256: sha_hex(&payload),
        };
        let mut json = serde_json::to_vec_pretty(&man)?;
        json.push(b'\n');
        Ok((json, payload))
    }

    pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("features", r);
        let man: FeaturesManifest = serde_json::from_slice(manifest).map_err(|e| bad(e.to_string()))?;
        if man.format != FEATURES_FORMAT {
            return Err(bad(format!("format {:?}", man.format)));
        }
        if man.version != FEATURE_VERSION {
            return Err(bad(format!("unsupported version {}", man.version)));
        }
        let want = man
            .rows
            .checked_mul(man.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("size overflow".into()))?;
        if payload.len() != want {
            return Err(bad(format!("payload is {} bytes, expected {want}", payload.len())));
        }
        if sha_hex(payload) != man.payload_sha256 {
            return Err(bad("payload checksum mismatch".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(data, man.dim, man.source, man.extractor, man.views).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (json, payload) = self.encode()?;
        std::fs::write(dir.join(FEATURES_MANIFEST), json)?;
        std::fs::write(dir.join(FEATURES_PAYLOAD), payload)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let json = std::fs::read(dir.join(FEATURES_MANIFEST))?;
        let payload = std::fs::read(dir.join(FEATURES_PAYLOAD))?;
        Self::decode(&json, &payload)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesManifest {
    pub format: String,
    pub version: u32,
    pub source: Source,
    pub extractor: Fingerprint,
    pub rows: usize,
    pub dim: usize,
    pub views: usize,
    pub payload_sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Entry `(i, j)` is the cosine of row `i` of `a` and row `j` of `b`.
pub fn similarity_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::shape("similarity", &[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    Ok(DMatrix::from_fn(a.nrows(), a.nrows(), |i, j| cosine(&ra[i], &rb[j])))
}

/// Maximum-weight perfect matching. Returns the mean matched entry and
/// `assignment[i]`, the column matched to row `i`.
///
/// Shortest augmenting paths with row/column potentials (Kuhn–Munkres in
/// the O(n³) form), run on the negated matrix.
pub fn hungarian_match_score(s: &DMatrix<f64>) -> Result<(f64, Vec<usize>)> {
    let n = s.nrows();
    if n != s.ncols() {
        return Err(Error::shape("hungarian", &[s.nrows(), s.ncols()], &[n, n]));
    }
    if n == 0 || n > MAX_VIEWS {
        return Err(Error::Invalid(format!("matrix size {n} outside 1..={MAX_VIEWS}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    // 1-based arrays; index 0 is the virtual start column.
    let cost = |i: usize, j: usize| -s[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    Ok((matched_mean(s, &assignment), assignment))
}

/// Mean of `s[i, p[i]]`. The entries are summed in sorted order so the
/// result does not depend on how rows and columns are labeled.
pub fn matched_mean(s: &DMatrix<f64>, p: &[usize]) -> f64 {
    let mut vals: Vec<f64> = p.iter().enumerate().map(|(i, &j)| s[(i, j)]).collect();
    vals.sort_by(f64::total_cmp);
    vals.iter().sum::<f64>() / p.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Column mean and unbiased covariance of the rows, symmetrized.
pub fn gaussian_summary(rows: &DMatrix<f64>) -> Result<GaussianSummary> {
    let m = rows.nrows();
    if m < 2 {
        return Err(Error::Invalid(format!("need at least 2 rows, got {m}")));
    }
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (m - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary { mean, cov })
}

fn scale_of(a: &DMatrix<f64>) -> f64 {
    a.amax().max(1.0)
}

/// Principal square root of a symmetric PSD matrix via its eigendecomposition.
/// Eigenvalues in `[−tol, 0)` are clipped to 0; more negative ones are an
/// error. Eigenvalues at round-off level, below `d·ε·λ_max`, are also set
/// to 0, since their square roots would turn round-off into `√ε`-sized
/// entries.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::shape("matrix-sqrt", &[a.nrows(), a.ncols()], &[a.nrows(), a.nrows()]));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "matrix-sqrt" });
    }
    let tol = PSD_TOL * scale_of(a);
    let asym = (a - a.transpose()).amax();
    if asym > tol {
        return Err(Error::Numerical(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    let top = roots.max().max(0.0);
    let floor = a.nrows() as f64 * f64::EPSILON * top;
    for l in roots.iter_mut() {
        if *l < -tol {
            return Err(Error::Numerical(format!("negative eigenvalue {l:e}")));
        }
        *l = if *l <= floor { 0.0 } else { l.sqrt() };
    }
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₁^½ Σ₂ Σ₁^½)^½)`.
///
/// `(Σ₁^½ Σ₂ Σ₁^½)^½` has the singular values of `Σ₁^½ Σ₂^½` as its
/// eigenvalues, so its trace is their sum; this avoids a second square root
/// of a possibly singular matrix.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.mean.len() != g2.mean.len() || g1.cov.shape() != g2.cov.shape() {
        return Err(Error::shape("frechet", &[g1.mean.len()], &[g2.mean.len()]));
    }
    let s1 = matrix_sqrt_psd(&g1.cov)?;
    let s2 = matrix_sqrt_psd(&g2.cov)?;
    let cross = (s1 * s2).singular_values().sum();
    let d = (&g1.mean - &g2.mean).norm_squared() + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    if d >= 0.0 {
        Ok(d)
    } else if d >= FD_CLIP {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("Fréchet distance {d:e} below the round-off threshold")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub objects: usize,
    pub views: Vec<View>,
    /// Mean over objects of the matched mean view similarity.
    pub hungarian: f64,
    pub fd: f64,
    pub per_object: Vec<f64>,
    pub extractor: Fingerprint,
    /// How FD rows are formed.
    pub pooling: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub const POOLING: &str = "all views of all objects in one set";

/// Score already extracted features. Both sets need the same objects in the
/// same order.
pub fn evaluate_features(gt: &FeatureSet, generated: &FeatureSet, views: &[View]) -> Result<MetricsReport> {
    if gt.fingerprint != generated.fingerprint {
        return Err(Error::Invalid("feature sets come from different extractors".into()));
    }
    if gt.views != generated.views || gt.views != views.len() {
        return Err(Error::Invalid(format!(
            "view counts differ: gt {}, generated {}, protocol {}",
            gt.views,
            generated.views,
            views.len()
        )));
    }
    if gt.objects() != generated.objects() {
        return Err(Error::Invalid(format!(
            "count mismatch: {} ground-truth objects, {} generated",
            gt.objects(),
            generated.objects()
        )));
    }
    if gt.objects() == 0 {
        return Err(Error::Invalid("no objects to evaluate".into()));
    }
    let per_object = (0..gt.objects())
        .map(|i| {
            let s = similarity_matrix(&gt.object(i), &generated.object(i))?;
            Ok(hungarian_match_score(&s)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let fd = frechet_distance(&gaussian_summary(&gt.rows)?, &gaussian_summary(&generated.rows)?)?;
    Ok(MetricsReport {
        objects: gt.objects(),
        views: views.to_vec(),
        hungarian: per_object.iter().sum::<f64>() / per_object.len() as f64,
        fd,
        per_object,
        extractor: gt.fingerprint,
        pooling: POOLING.into(),
        meta: BTreeMap::new(),
    })
}

/// Render every grid in each of `views` and extract features.
pub fn grid_features(ex: &Extractor, grids: &[VoxelGrid], views: &[View], image_size: usize, source: Source) -> Result<FeatureSet> {
    let mut images = Vec::with_capacity(grids.len() * views.len());
    for g in grids {
        for &v in views {
            images.push(project(g, v, image_size)?);
        }
    }
    ex.extract(&images, source, views.len())
}

/// Render ground-truth and generated grids with the same protocol and score.
pub fn evaluate_run(gt: &[VoxelGrid], generated: &[VoxelGrid], views: &[View], image_size: usize, seed: u64) -> Result<MetricsReport> {
    if gt.len() != generated.len() {
        return Err(Error::Invalid(format!(
            "count mismatch: {} ground-truth assets, {} generated",
            gt.len(),
            generated.len()
        )));
    }
    let ex = Extractor::new(seed);
    let a = grid_features(&ex, gt, views, image_size, Source::Gt)?;
    let b = grid_features(&ex, generated, views, image_size, Source::Generated)?;
    evaluate_features(&a, &b, views)
}

impl MetricsReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(dir.join("report.json"), json)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_err)?;
        w.write_record(["objects", "hungarian", "fd", "extractor_seed", "extractor_version"])
            .map_err(csv_err)?;
        w.write_record([
            self.objects.to_string(),
            format!("{:.12}", self.hungarian),
            format!("{:.12}", self.fd),
            self.extractor.seed.to_string(),
            self.extractor.version.to_string(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
