//! Hyperspectral scenes, tiling and per-band normalization.
//!
//! Scenes live on disk as a raw little-endian `f32` payload (`<name>.hsr`,
//! pixel-interleaved, row-major `height × width × bands`) next to a JSON
//! sidecar (`<name>.json`). Optional labels are a raw little-endian `i32`
//! payload of `height × width` ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A full scene before tiling.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `height × width × bands`, band index fastest.
    pub pixels: Vec<f64>,
    pub labels: Option<Vec<i32>>,
    pub wavelengths: Option<Vec<f64>>,
}

impl Scene {
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        bands: usize,
        pixels: Vec<f64>,
        labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "scene dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if pixels.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                height * width * bands
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(non_finite(i, width, bands));
        }
        if let Some(labels) = &labels {
            if labels.len() != height * width {
                return Err(Error::Shape(format!(
                    "label map holds {} ids, expected {}",
                    labels.len(),
                    height * width
                )));
            }
            if let Some(i) = labels.iter().position(|&l| l < 0) {
                return Err(Error::Data(format!(
                    "negative label id {} at ({}, {})",
                    labels[i],
                    i / width,
                    i % width
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            bands,
            pixels,
            labels,
            wavelengths: None,
        })
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize, band: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.bands + band]
    }
}

fn non_finite(flat: usize, width: usize, bands: usize) -> Error {
    Error::NonFinite {
        row: flat / (width * bands),
        col: (flat / bands) % width,
        band: flat % bands,
    }
}

/// Where a cube was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CubeOrigin {
    pub scene: String,
    pub row: usize,
    pub col: usize,
}

impl std::fmt::Display for CubeOrigin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.scene, self.row, self.col)
    }
}

/// One `height × width × bands` tile.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band index fastest, like [`Scene::pixels`].
    pub values: Vec<f64>,
    pub origin: CubeOrigin,
    pub labels: Option<Vec<i32>>,
}

impl DataCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube buffer holds {} values, expected {height}x{width}x{bands}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            origin: CubeOrigin {
                scene: String::new(),
                row: 0,
                col: 0,
            },
            labels: None,
        })
    }

    /// Builds a cube from a function of `(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * bands);
        for r in 0..height {
            for c in 0..width {
                for b in 0..bands {
                    values.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, bands, values).expect("length matches by construction")
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (row * self.width + col) * self.bands + band
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[self.index(row, col, band)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same geometry and provenance, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn id(&self) -> String {
        self.origin.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Half-open rectangle `[x0, x1) × [y0, y1)` in scene coordinates
/// (`x` = column, `y` = row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub split: Split,
    /// Restricts the region to one scene; `None` applies it to every scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

impl Region {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, split: Split) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            split,
            scene: None,
        }
    }

    fn applies_to(&self, scene: &str) -> bool {
        self.scene.as_deref().map_or(true, |s| s == scene)
    }

    fn overlaps(&self, other: &Region) -> bool {
        let same_scene = match (&self.scene, &other.scene) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        same_scene
            && self.x0 < other.x1
            && other.x0 < self.x1
            && self.y0 < other.y1
            && other.y0 < self.y1
    }

    /// Pretraining draws from explicit pretrain regions and from training regions.
    fn serves(&self, split: Split) -> bool {
        match split {
            Split::Pretrain => matches!(self.split, Split::Pretrain | Split::Train),
            s => self.split == s,
        }
    }
}

/// Tiling geometry plus the explicit region assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub tile_size: usize,
    pub pretrain_stride: usize,
    pub regions: Vec<Region>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            tile_size: 16,
            pretrain_stride: 8,
            regions: Vec::new(),
        }
    }
}

impl SplitSpec {
    /// Checks region geometry and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.pretrain_stride == 0 {
            return Err(Error::Config(
                "tile_size and pretrain_stride must be positive".into(),
            ));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.x0 >= r.x1 || r.y0 >= r.y1 {
                return Err(Error::Config(format!("region {i} is empty: {r:?}")));
            }
            for (j, other) in self.regions.iter().enumerate().skip(i + 1) {
                if r.overlaps(other) {
                    return Err(Error::Config(format!("regions {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Whether any region of the named scene feeds `split`.
    pub fn covers(&self, scene: &str, split: Split) -> bool {
        self.regions.iter().any(|r| r.applies_to(scene) && r.serves(split))
    }
}

/// Cuts the parts of `scene` assigned to `split` into cubes.
///
/// Pretraining uses `pretrain_stride`; every other split tiles without
/// overlap. Tiles that would cross a region border are dropped.
pub fn tile_scene(scene: &Scene, spec: &SplitSpec, split: Split) -> Result<Vec<DataCube>> {
    spec.validate()?;
    let tile = spec.tile_size;
    if tile > scene.height.min(scene.width) {
        return Err(Error::Config(format!(
            "tile size {tile} exceeds scene {}x{}",
            scene.height, scene.width
        )));
    }
    let stride = if split == Split::Pretrain {
        spec.pretrain_stride
    } else {
        tile
    };
    let regions: Vec<&Region> = spec
        .regions
        .iter()
        .filter(|r| r.applies_to(&scene.name) && r.serves(split))
        .collect();
    if regions.is_empty() {
        return Err(Error::Config(format!(
            "no region of scene `{}` is assigned to {split:?}",
            scene.name
        )));
    }

    let mut cubes = Vec::new();
    for r in regions {
        if r.x1 > scene.width || r.y1 > scene.height {
            return Err(Error::Config(format!(
                "region {r:?} exceeds scene `{}` ({}x{})",
                scene.name, scene.height, scene.width
            )));
        }
        let mut row = r.y0;
        while row + tile <= r.y1 {
            let mut col = r.x0;
            while col + tile <= r.x1 {
                cubes.push(extract_cube(scene, row, col, tile));
                col += stride;
            }
            row += stride;
        }
    }
    Ok(cubes)
}

/// Tiles a whole scene regardless of regions (used for unlabeled pretraining
/// scenes and for scoring).
pub fn tile_full(scene: &Scene, tile: usize, stride: usize) -> Result<Vec<DataCube>> {
    let spec = SplitSpec {
        tile_size: tile,
        pretrain_stride: stride,
        regions: vec![Region::new(0, 0, scene.width, scene.height, Split::Pretrain)],
    };
    tile_scene(scene, &spec, Split::Pretrain)
}

fn extract_cube(scene: &Scene, row: usize, col: usize, tile: usize) -> DataCube {
    let bands = scene.bands;
    let mut values = Vec::with_capacity(tile * tile * bands);
    for r in row..row + tile {
        let start = (r * scene.width + col) * bands;
        values.extend_from_slice(&scene.pixels[start..start + tile * bands]);
    }
    let labels = scene.labels.as_ref().map(|labels| {
        let mut out = Vec::with_capacity(tile * tile);
        for r in row..row + tile {
            let start = r * scene.width + col;
            out.extend_from_slice(&labels[start..start + tile]);
        }
        out
    });
    DataCube {
        height: tile,
        width: tile,
        bands,
        values,
        origin: CubeOrigin {
            scene: scene.name.clone(),
            row,
            col,
        },
        labels,
    }
}

/// Per-band mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Bands whose standard deviation does not exceed this are divided by 1.
pub const STD_EPSILON: f64 = 1e-12;

impl BandStats {
    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    fn divisor(&self, band: usize) -> f64 {
        let s = self.std[band];
        if s > STD_EPSILON {
            s
        } else {
            1.0
        }
    }
}

/// Two-pass per-band statistics over every pixel of every cube.
pub fn fit_normalizer(cubes: &[DataCube]) -> Result<BandStats> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::Degenerate("cannot fit normalizer on zero cubes".into()))?;
    let bands = first.bands;
    if let Some(c) = cubes.iter().find(|c| c.bands != bands) {
        return Err(Error::Shape(format!(
            "mixed band counts: {bands} and {} ({})",
            c.bands,
            c.id()
        )));
    }
    let count: usize = cubes.iter().map(|c| c.len() / bands).sum();
    if count == 0 {
        return Err(Error::Degenerate("cubes contain no pixels".into()));
    }

    let mut mean = vec![0.0; bands];
    for cube in cubes {
        for px in cube.values.chunks_exact(bands) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut var = vec![0.0; bands];
    for cube in cubes {
        for px in cube.values.chunks_exact(bands) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
    }
    let std = var.into_iter().map(|s| (s / count as f64).sqrt()).collect();
    Ok(BandStats { mean, std })
}

pub fn normalize(cube: &DataCube, stats: &BandStats) -> Result<DataCube> {
    check_bands(cube, stats)?;
    let bands = cube.bands;
    let mut values = cube.values.clone();
    for px in values.chunks_exact_mut(bands) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = (*v - stats.mean[b]) / stats.divisor(b);
        }
    }
    Ok(cube.with_values(values))
}

pub fn denormalize(cube: &DataCube, stats: &BandStats) -> Result<DataCube> {
    check_bands(cube, stats)?;
    let bands = cube.bands;
    let mut values = cube.values.clone();
    for px in values.chunks_exact_mut(bands) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = *v * stats.divisor(b) + stats.mean[b];
        }
    }
    Ok(cube.with_values(values))
}

fn check_bands(cube: &DataCube, stats: &BandStats) -> Result<()> {
    if stats.bands() != cube.bands {
        return Err(Error::Shape(format!(
            "statistics cover {} bands, cube has {}",
            stats.bands(),
            cube.bands
        )));
    }
    Ok(())
}

pub fn normalize_all(cubes: &[DataCube], stats: &BandStats) -> Result<Vec<DataCube>> {
    cubes.iter().map(|c| normalize(c, stats)).collect()
}

// ---------------------------------------------------------------------------
// On-disk containers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFormat {
    /// `<name>.hsr` raw little-endian f32 payload.
    RawTensor,
    /// `<name>.csv`: `height·width` rows of `bands` comma-separated values.
    DelimitedMatrix,
}

/// Sidecar metadata, `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
}

fn stem_of(path: &Path) -> Result<(PathBuf, String)> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("cannot derive scene name from {}", path.display())))?
        .to_string();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name))
}

/// Loads a scene given the path of its payload, its sidecar, or its bare stem.
pub fn load_scene(path: &Path, format: SceneFormat) -> Result<Scene> {
    let (dir, name) = stem_of(path)?;
    let meta_path = dir.join(format!("{name}.json"));
    let meta: SceneMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.height == 0 || meta.width == 0 || meta.bands == 0 {
        return Err(Error::Format(format!(
            "{}: dimensions must be positive",
            meta_path.display()
        )));
    }
    let expected = meta.height * meta.width * meta.bands;

    let pixels = match format {
        SceneFormat::RawTensor => {
            let payload_path = dir.join(format!("{name}.hsr"));
            let bytes = fs::read(&payload_path)?;
            if bytes.len() != expected * 4 {
                return Err(Error::Format(format!(
                    "{}: payload is {} bytes, expected {} ({}x{}x{} f32)",
                    payload_path.display(),
                    bytes.len(),
                    expected * 4,
                    meta.height,
                    meta.width,
                    meta.bands
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect::<Vec<_>>()
        }
        SceneFormat::DelimitedMatrix => {
            let payload_path = dir.join(format!("{name}.csv"));
            read_delimited(&payload_path, meta.height * meta.width, meta.bands)?
        }
    };
    if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
        return Err(non_finite(i, meta.width, meta.bands));
    }

    let labels = match &meta.label_file {
        Some(file) => {
            let label_path = dir.join(file);
            let bytes = fs::read(&label_path)?;
            if bytes.len() != meta.height * meta.width * 4 {
                return Err(Error::Format(format!(
                    "{}: label payload is {} bytes, expected {}",
                    label_path.display(),
                    bytes.len(),
                    meta.height * meta.width * 4
                )));
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )
        }
        None => None,
    };

    let mut scene = Scene::new(name, meta.height, meta.width, meta.bands, pixels, labels)?;
    scene.wavelengths = meta.wavelengths;
    Ok(scene)
}

fn read_delimited(path: &Path, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() != cols {
            return Err(Error::Format(format!(
                "{}: row {i} has {} columns, expected {cols}",
                path.display(),
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Format(format!("{}: row {i}: `{field}` is not a number", path.display()))
            })?;
            values.push(v);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Format(format!(
            "{}: {seen} rows, expected {rows}",
            path.display()
        )));
    }
    Ok(values)
}

/// Writes `<dir>/<name>.hsr`, `<name>.json` and, with labels, `<name>.labels`.
/// Returns the sidecar path.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let payload: Vec<u8> = scene
        .pixels
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(dir.join(format!("{}.hsr", scene.name)), payload)?;

    let label_file = match &scene.labels {
        Some(labels) => {
            let file = format!("{}.labels", scene.name);
            let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            Some(file)
        }
        None => None,
    };
    let meta = SceneMeta {
        height: scene.height,
        width: scene.width,
        bands: scene.bands,
        label_file,
        wavelengths: scene.wavelengths.clone(),
    };
    let meta_path = dir.join(format!("{}.json", scene.name));
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta_path)
}

/// Lists the scene sidecars (`*.json` with a matching payload) in `dir`.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let stem = path.with_extension("");
            if stem.with_extension("hsr").exists() || stem.with_extension("csv").exists() {
                found.insert(path.clone(), ());
            }
        }
    }
    Ok(found.into_keys().collect())
}

/// Picks the container format from the files present next to `path`.
pub fn detect_format(path: &Path) -> SceneFormat {
    let stem = path.with_extension("");
    if !stem.with_extension("hsr").exists() && stem.with_extension("csv").exists() {
        SceneFormat::DelimitedMatrix
    } else {
        SceneFormat::RawTensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_scene(h: usize, w: usize, c: usize) -> Scene {
        let pixels = (0..h * w * c).map(|i| i as f64).collect();
        Scene::new("ramp", h, w, c, pixels, None).unwrap()
    }

    fn one_region(split: Split, w: usize, h: usize, stride: usize) -> SplitSpec {
        SplitSpec {
            tile_size: 16,
            pretrain_stride: stride,
            regions: vec![Region::new(0, 0, w, h, split)],
        }
    }

    #[test]
    fn train_tiling_is_a_grid() {
        let scene = ramp_scene(32, 32, 2);
        let cubes = tile_scene(&scene, &one_region(Split::Train, 32, 32, 8), Split::Train).unwrap();
        assert_eq!(cubes.len(), 4);
        let origins: Vec<_> = cubes.iter().map(|c| (c.origin.row, c.origin.col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 16), (16, 0), (16, 16)]);
        assert_eq!(cubes[3].get(0, 0, 1), scene.value(16, 16, 1));
    }

    #[test]
    fn pretrain_tiling_uses_stride() {
        let scene = ramp_scene(32, 32, 2);
        let spec = one_region(Split::Pretrain, 32, 32, 8);
        assert_eq!(tile_scene(&scene, &spec, Split::Pretrain).unwrap().len(), 9);
    }

    #[test]
    fn pretrain_draws_from_training_regions() {
        let scene = ramp_scene(32, 32, 1);
        let spec = one_region(Split::Train, 32, 32, 8);
        assert_eq!(tile_scene(&scene, &spec, Split::Pretrain).unwrap().len(), 9);
    }

    #[test]
    fn half_width_regions_fit_no_tile() {
        let scene = ramp_scene(16, 16, 1);
        let spec = SplitSpec {
            tile_size: 16,
            pretrain_stride: 8,
            regions: vec![
                Region::new(0, 0, 8, 16, Split::Train),
                Region::new(8, 0, 16, 16, Split::Test),
            ],
        };
        assert!(tile_scene(&scene, &spec, Split::Train).unwrap().is_empty());
        assert!(tile_scene(&scene, &spec, Split::Test).unwrap().is_empty());
    }

    #[test]
    fn missing_split_is_a_config_error() {
        let scene = ramp_scene(16, 16, 1);
        let spec = one_region(Split::Train, 16, 16, 8);
        assert!(matches!(
            tile_scene(&scene, &spec, Split::Test),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let spec = SplitSpec {
            regions: vec![
                Region::new(0, 0, 10, 10, Split::Train),
                Region::new(5, 5, 20, 20, Split::Test),
            ],
            ..SplitSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn constant_band_statistics() {
        let cube = DataCube::from_fn(4, 4, 2, |r, c, b| if b == 0 { 5.0 } else { (r + c) as f64 });
        let stats = fit_normalizer(&[cube]).unwrap();
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], 0.0);
    }

    #[test]
    fn two_point_statistics() {
        let a = DataCube::new(1, 1, 1, vec![0.0]).unwrap();
        let b = DataCube::new(1, 1, 1, vec![2.0]).unwrap();
        let stats = fit_normalizer(&[a, b]).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn mixed_band_counts_rejected() {
        let a = DataCube::new(1, 1, 1, vec![0.0]).unwrap();
        let b = DataCube::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(fit_normalizer(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn normalizing_the_mean_gives_zero() {
        let stats = BandStats {
            mean: vec![1.0, -2.0],
            std: vec![3.0, 0.0],
        };
        let cube = DataCube::from_fn(2, 2, 2, |_, _, b| stats.mean[b]);
        let out = normalize(&cube, &stats).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_statistics_are_identity() {
        let cube = DataCube::from_fn(3, 3, 2, |r, c, b| (r * 7 + c * 3 + b) as f64 * 0.1);
        let out = normalize(&cube, &BandStats::identity(2)).unwrap();
        assert_eq!(out.values, cube.values);
    }

    #[test]
    fn nan_reported_with_index() {
        let mut pixels = vec![0.0; 4 * 4 * 2];
        pixels[1] = f64::NAN;
        match Scene::new("s", 4, 4, 2, pixels, None) {
            Err(Error::NonFinite { row, col, band }) => assert_eq!((row, col, band), (0, 0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
