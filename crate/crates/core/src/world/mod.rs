//! Synthetic colored voxel assets, their orthographic views and condition
//! tokens.
//!
//! The generator is built so that image and text carry complementary
//! information: the bottom view never shows the top color or the marking,
//! while the text tokens say nothing about the ±1 voxel size jitter.

pub mod dataset;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Occupancy plus RGB.
pub const CHANNELS: usize = 4;
pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_IMAGE: usize = 16;
pub const DEFAULT_PATCH: usize = 4;
/// One text token per attribute field.
pub const TEXT_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Box,
    Sphere,
    Cylinder,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Marking {
    Plain,
    Striped,
    Dotted,
}

const SHAPES: [ShapeClass; 4] = [ShapeClass::Box, ShapeClass::Sphere, ShapeClass::Cylinder, ShapeClass::Cross];
const SIZES: [Size; 3] = [Size::Small, Size::Medium, Size::Large];
const COLORS: [Color; 6] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Cyan,
    Color::Magenta,
];
const MARKINGS: [Marking; 3] = [Marking::Plain, Marking::Striped, Marking::Dotted];

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }
}

/// Vocabulary layout is field-major, value-minor:
///
/// | field       | ids     |
/// |-------------|---------|
/// | shape_class | 0..4    |
/// | size        | 4..7    |
/// | top_color   | 7..13   |
/// | body_color  | 13..19  |
/// | marking     | 19..22  |
///
/// Id 22 is the learned null token.
pub const FIELD_OFFSETS: [usize; TEXT_TOKENS] = [0, 4, 7, 13, 19];
pub const FIELD_SIZES: [usize; TEXT_TOKENS] = [4, 3, 6, 6, 3];
pub const VOCAB_SIZE: usize = 22;
pub const NULL_TOKEN: usize = VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape_class: ShapeClass,
    pub size: Size,
    pub top_color: Color,
    pub body_color: Color,
    pub marking: Marking,
}

fn position<T: PartialEq>(all: &[T], v: &T) -> usize {
    all.iter().position(|x| x == v).unwrap()
}

impl Attributes {
    /// Uniform, independent draw of every field.
    pub fn sample(rng: &mut SeedRng) -> Self {
        Self {
            shape_class: SHAPES[rng.below(SHAPES.len())],
            size: SIZES[rng.below(SIZES.len())],
            top_color: COLORS[rng.below(COLORS.len())],
            body_color: COLORS[rng.below(COLORS.len())],
            marking: MARKINGS[rng.below(MARKINGS.len())],
        }
    }

    pub fn token_ids(&self) -> [usize; TEXT_TOKENS] {
        let local = [
            position(&SHAPES, &self.shape_class),
            position(&SIZES, &self.size),
            position(&COLORS, &self.top_color),
            position(&COLORS, &self.body_color),
            position(&MARKINGS, &self.marking),
        ];
        std::array::from_fn(|i| FIELD_OFFSETS[i] + local[i])
    }

    pub fn from_token_ids(ids: &[usize]) -> Result<Self> {
        if ids.len() != TEXT_TOKENS {
            return Err(Error::Invalid(format!("expected {TEXT_TOKENS} token ids, got {}", ids.len())));
        }
        let mut local = [0usize; TEXT_TOKENS];
        for (i, &id) in ids.iter().enumerate() {
            let lo = FIELD_OFFSETS[i];
            if id < lo || id >= lo + FIELD_SIZES[i] {
                return Err(Error::Invalid(format!("token id {id} is not a valid value for field {i}")));
            }
            local[i] = id - lo;
        }
        Ok(Self {
            shape_class: SHAPES[local[0]],
            size: SIZES[local[1]],
            top_color: COLORS[local[2]],
            body_color: COLORS[local[3]],
            marking: MARKINGS[local[4]],
        })
    }

    /// Parse `shape,size,top_color,body_color,marking`, e.g.
    /// `box,small,red,red,plain`.
    pub fn parse(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if fields.len() != TEXT_TOKENS {
            return Err(Error::Invalid(format!("attributes need {TEXT_TOKENS} comma-separated fields: {s:?}")));
        }
        let json = format!(
            r#"{{"shape_class":"{}","size":"{}","top_color":"{}","body_color":"{}","marking":"{}"}}"#,
            fields[0], fields[1], fields[2], fields[3], fields[4]
        );
        serde_json::from_str(&json).map_err(|_| Error::Invalid(format!("unknown attribute value in {s:?}")))
    }

    /// Every point of the attribute space, in vocabulary order.
    pub fn all() -> impl Iterator<Item = Attributes> {
        SHAPES.into_iter().flat_map(|shape_class| {
            SIZES.into_iter().flat_map(move |size| {
                COLORS.into_iter().flat_map(move |top_color| {
                    COLORS.into_iter().flat_map(move |body_color| {
                        MARKINGS.into_iter().map(move |marking| Attributes {
                            shape_class,
                            size,
                            top_color,
                            body_color,
                            marking,
                        })
                    })
                })
            })
        })
    }
}

impl std::fmt::Display for Attributes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let j = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
        write!(
            f,
            "{},{},{},{},{}",
            name(j["shape_class"].clone()),
            name(j["size"].clone()),
            name(j["top_color"].clone()),
            name(j["body_color"].clone()),
            name(j["marking"].clone())
        )
    }
}

/// A `G×G×G×4` grid, indexed `[x][y][z][c]`, `y` pointing up.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    g: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn empty(g: usize) -> Self {
        Self {
            g,
            data: vec![0.0; g * g * g * CHANNELS],
        }
    }

    pub fn from_data(g: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != g * g * g * CHANNELS {
            return Err(Error::shape("voxel-grid", &[g, g, g, CHANNELS], &[data.len()]));
        }
        Ok(Self { g, data })
    }

    pub fn resolution(&self) -> usize {
        self.g
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        ((x * self.g + y) * self.g + z) * CHANNELS
    }

    pub fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.idx(x, y, z)] > 0.5
    }

    pub fn color(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = self.idx(x, y, z);
        [self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y, z);
        self.data[i] = 1.0;
        self.data[i + 1..i + 4].copy_from_slice(&rgb);
    }

    pub fn occupied_count(&self) -> usize {
        self.data.chunks(CHANNELS).filter(|v| v[0] > 0.5).count()
    }

    /// Occupancy in {0,1}, colors in [0,1] and zero on empty voxels.
    pub fn check_invariants(&self) -> Result<()> {
        for v in self.data.chunks(CHANNELS) {
            let occ = v[0];
            if occ != 0.0 && occ != 1.0 {
                return Err(Error::Invalid(format!("occupancy {occ} not in {{0,1}}")));
            }
            if v[1..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid("color outside [0,1]".into()));
            }
            if occ == 0.0 && v[1..].iter().any(|&c| c != 0.0) {
                return Err(Error::Invalid("color on an empty voxel".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyAsset {
    pub grid: VoxelGrid,
    pub attrs: Attributes,
}

/// Extent of an object along one axis before jitter.
pub fn base_extent(size: Size, g: usize) -> usize {
    match size {
        Size::Small => g / 2,
        Size::Medium => 3 * g / 4,
        Size::Large => g,
    }
}

/// Rasterize an object with explicit per-axis extents (x, y, z).
pub fn rasterize(attrs: &Attributes, extents: [usize; 3], g: usize) -> Result<VoxelGrid> {
    if g < 8 {
        return Err(Error::Invalid(format!("grid resolution {g} < 8")));
    }
    if extents.iter().any(|&e| e < 1 || e > g) {
        return Err(Error::Invalid(format!("extents {extents:?} outside 1..={g}")));
    }
    let start: [usize; 3] = std::array::from_fn(|a| (g - extents[a]) / 2);
    let center: [f64; 3] = std::array::from_fn(|a| start[a] as f64 + extents[a] as f64 / 2.0);
    let radius: [f64; 3] = std::array::from_fn(|a| extents[a] as f64 / 2.0);

    let inside = |x: usize, y: usize, z: usize| -> bool {
        let p = [x, y, z];
        if (0..3).any(|a| p[a] < start[a] || p[a] >= start[a] + extents[a]) {
            return false;
        }
        let d: [f64; 3] = std::array::from_fn(|a| (p[a] as f64 + 0.5 - center[a]) / radius[a]);
        match attrs.shape_class {
            ShapeClass::Box => true,
            ShapeClass::Sphere => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0,
            ShapeClass::Cylinder => d[0] * d[0] + d[2] * d[2] <= 1.0,
            ShapeClass::Cross => d[0].abs() <= 1.0 / 3.0 || d[2].abs() <= 1.0 / 3.0,
        }
    };

    let body = attrs.body_color.rgb();
    let dark = body.map(|c| 0.5 * c);
    let top = attrs.top_color.rgb();
    let mut grid = VoxelGrid::empty(g);
    for x in 0..g {
        for z in 0..g {
            let ys: Vec<usize> = (0..g).filter(|&y| inside(x, y, z)).collect();
            let (Some(&lo), Some(&hi)) = (ys.first(), ys.last()) else { continue };
            for &y in &ys {
                let rgb = if y == hi && ys.len() >= 2 {
                    top
                } else if y == lo {
                    // the bottom face is always plain body color
                    body
                } else {
                    let marked = match attrs.marking {
                        Marking::Plain => false,
                        Marking::Striped => (y - start[1]) % 2 == 1,
                        Marking::Dotted => (x + y + z) % 2 == 0,
                    };
                    if marked {
                        dark
                    } else {
                        body
                    }
                };
                grid.set(x, y, z, rgb);
            }
        }
    }
    if grid.occupied_count() == 0 {
        return Err(Error::Invalid("rasterized object is empty".into()));
    }
    Ok(grid)
}

/// Draw attributes uniformly, then render with ±1 voxel jitter per axis.
pub fn sample_asset(rng: &mut SeedRng, g: usize) -> Result<ToyAsset> {
    let attrs = Attributes::sample(rng);
    let base = base_extent(attrs.size, g);
    let extents: [usize; 3] = std::array::from_fn(|_| {
        let delta = rng.below(3) as isize - 1;
        (base as isize + delta).clamp(3, g as isize) as usize
    });
    let grid = rasterize(&attrs, extents, g)?;
    Ok(ToyAsset { grid, attrs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Looking along +z; image up is +y.
    Front,
    /// Looking down along -y.
    Top,
    /// Looking up along +y.
    Bottom,
}

impl View {
    pub const ALL: [View; 3] = [View::Front, View::Top, View::Bottom];

    pub fn index(self) -> usize {
        match self {
            View::Front => 0,
            View::Top => 1,
            View::Bottom => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Top => "top",
            View::Bottom => "bottom",
        }
    }

    pub fn parse(s: &str) -> Result<View> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown view {s:?}")))
    }
}

/// A `P×P×4` image: RGB plus silhouette, row-major `[row][col][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size * 4],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.size + col) * 4;
        &self.data[i..i + 4]
    }

    pub fn silhouette_area(&self) -> usize {
        self.data.chunks(4).filter(|p| p[3] > 0.5).count()
    }

    /// Distinct RGB triples among silhouette pixels.
    pub fn distinct_colors(&self) -> Vec<[u64; 3]> {
        let mut seen: Vec<[u64; 3]> = Vec::new();
        for p in self.data.chunks(4).filter(|p| p[3] > 0.5) {
            let key = [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    }
}

/// Orthographic first-hit projection. Errors on an empty grid.
pub fn render_view(grid: &VoxelGrid, view: View, image_size: usize) -> Result<Image> {
    if grid.occupied_count() == 0 {
        return Err(Error::Invalid("cannot render an empty asset".into()));
    }
    project(grid, view, image_size)
}

/// Like [`render_view`] but an empty grid renders as a blank image.
pub fn project(grid: &VoxelGrid, view: View, image_size: usize) -> Result<Image> {
    let g = grid.resolution();
    if image_size == 0 || image_size % g != 0 {
        return Err(Error::Invalid(format!("image size {image_size} is not a multiple of grid {g}")));
    }
    let scale = image_size / g;
    let mut img = Image::zeros(image_size);
    for r in 0..g {
        for c in 0..g {
            // (row, col) in voxel units -> first occupied voxel along the ray
            let hit = (0..g).find_map(|depth| {
                let (x, y, z) = match view {
                    View::Front => (c, g - 1 - r, depth),
                    View::Top => (c, g - 1 - depth, r),
                    View::Bottom => (c, depth, g - 1 - r),
                };
                grid.occupied(x, y, z).then(|| grid.color(x, y, z))
            });
            let Some(rgb) = hit else { continue };
            for dr in 0..scale {
                for dc in 0..scale {
                    let i = ((r * scale + dr) * image_size + c * scale + dc) * 4;
                    img.data[i..i + 3].copy_from_slice(&rgb);
                    img.data[i + 3] = 1.0;
                }
            }
        }
    }
    Ok(img)
}

/// Split an image into non-overlapping `patch×patch` tiles, each flattened
/// as `[row][col][c]`. Returns a `[T, patch·patch·4]` tensor.
pub fn image_patches(image: &Image, patch: usize) -> Result<Tensor> {
    let p = image.size;
    if patch == 0 || p % patch != 0 {
        return Err(Error::Invalid(format!("patch {patch} does not divide image size {p}")));
    }
    let per_side = p / patch;
    let width = patch * patch * 4;
    let mut data = Vec::with_capacity(per_side * per_side * width);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..patch {
                let start = ((pr * patch + r) * p + pc * patch) * 4;
                data.extend_from_slice(&image.data[start..start + patch * 4]);
            }
        }
    }
    Tensor::new(vec![per_side * per_side, width], data)
}

/// Condition payload before encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// Patch tokens of one view, `[T, patch·patch·4]`.
    Image { patches: Tensor, view: View },
    /// Attribute token ids.
    Text([usize; TEXT_TOKENS]),
    Null,
}

impl Condition {
    pub fn token_count(&self) -> usize {
        match self {
            Condition::Image { patches, .. } => patches.shape()[0],
            Condition::Text(ids) => ids.len(),
            Condition::Null => 1,
        }
    }
}

pub fn text_tokens(attrs: &Attributes) -> Condition {
    Condition::Text(attrs.token_ids())
}

pub fn image_tokens(image: &Image, view: View, patch: usize) -> Result<Condition> {
    Ok(Condition::Image {
        patches: image_patches(image, patch)?,
        view,
    })
}

/// Map `[0,1]` values to `[-1,1]`: `latent = 2·value − 1`.
pub fn asset_to_latent(grid: &VoxelGrid) -> Tensor {
    let g = grid.resolution();
    Tensor::new(
        vec![g, g, g, CHANNELS],
        grid.data().iter().map(|v| 2.0 * v - 1.0).collect(),
    )
    .expect("grid shape")
}

/// Inverse of [`asset_to_latent`]: occupancy is `(l+1)/2 > 0.5`, colors are
/// clamped to `[0,1]` and zeroed on empty voxels. A zero latent sits exactly
/// on the midpoint and decodes to an empty grid.
pub fn latent_to_grid(latent: &Tensor) -> Result<VoxelGrid> {
    let s = latent.shape();
    if s.len() != 4 || s[0] != s[1] || s[1] != s[2] || s[3] != CHANNELS {
        return Err(Error::shape("latent-to-grid", s, &[0, 0, 0, CHANNELS]));
    }
    let mut data = Vec::with_capacity(latent.numel());
    for v in latent.data().chunks(CHANNELS) {
        let occ = (v[0] + 1.0) / 2.0 > 0.5;
        data.push(if occ { 1.0 } else { 0.0 });
        for &c in &v[1..] {
            data.push(if occ { ((c + 1.0) / 2.0).clamp(0.0, 1.0) } else { 0.0 });
        }
    }
    VoxelGrid::from_data(s[0], data)
}

/// Latent grid `[G,G,G,C]` to `[(G/2)³, 8·C]` tokens of 2×2×2 voxels.
pub fn patchify(latent: &[f64], g: usize) -> Result<Vec<f64>> {
    if g % 2 != 0 || latent.len() != g * g * g * CHANNELS {
        return Err(Error::shape("patchify", &[latent.len()], &[g, g, g, CHANNELS]));
    }
    let h = g / 2;
    let mut out = Vec::with_capacity(latent.len());
    for bx in 0..h {
        for by in 0..h {
            for bz in 0..h {
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let (x, y, z) = (2 * bx + dx, 2 * by + dy, 2 * bz + dz);
                            let i = ((x * g + y) * g + z) * CHANNELS;
                            out.extend_from_slice(&latent[i..i + CHANNELS]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &[f64], g: usize) -> Result<Vec<f64>> {
    if g % 2 != 0 || tokens.len() != g * g * g * CHANNELS {
        return Err(Error::shape("unpatchify", &[tokens.len()], &[g, g, g, CHANNELS]));
    }
    let h = g / 2;
    let mut out = vec![0.0; tokens.len()];
    let mut k = 0;
    for bx in 0..h {
        for by in 0..h {
            for bz in 0..h {
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let (x, y, z) = (2 * bx + dx, 2 * by + dy, 2 * bz + dz);
                            let i = ((x * g + y) * g + z) * CHANNELS;
                            out[i..i + CHANNELS].copy_from_slice(&tokens[k..k + CHANNELS]);
                            k += CHANNELS;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn latent_token_count(g: usize) -> usize {
    (g / 2).pow(3)
}

pub fn latent_token_width() -> usize {
    8 * CHANNELS
}

#[cfg(test)]
mod tests;
