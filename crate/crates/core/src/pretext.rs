//! Self-supervised task generation: spatial jigsaw, spectral jigsaw and
//! masked-cube modelling.
//!
//! Jigsaw targets are flattened `N × N` permutation matrices:
//! `target[i·N + j] = 1` iff slot `i` of the shuffled cube holds the patch
//! that originally sat at position `j`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataCube;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialJigsawConfig {
    pub patch_height: usize,
    pub patch_width: usize,
}

impl Default for SpatialJigsawConfig {
    fn default() -> Self {
        Self {
            patch_height: 8,
            patch_width: 8,
        }
    }
}

impl SpatialJigsawConfig {
    /// Patch grid `(rows, cols)` for a `height × width` cube.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (self.patch_height, self.patch_width);
        if ph == 0 || pw == 0 || ph >= height || pw >= width || height % ph != 0 || width % pw != 0
        {
            return Err(Error::Config(format!(
                "spatial patch {ph}x{pw} must be a proper divisor of {height}x{width}"
            )));
        }
        Ok((height / ph, width / pw))
    }

    pub fn patch_count(&self, height: usize, width: usize) -> Result<usize> {
        self.grid(height, width).map(|(r, c)| r * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectralJigsawConfig {
    /// Number of contiguous band blocks.
    pub blocks: usize,
}

impl Default for SpectralJigsawConfig {
    fn default() -> Self {
        Self { blocks: 4 }
    }
}

impl SpectralJigsawConfig {
    /// Bands per block.
    pub fn block_depth(&self, bands: usize) -> Result<usize> {
        if self.blocks < 2 || bands % self.blocks != 0 {
            return Err(Error::Config(format!(
                "{} spectral blocks must be at least 2 and divide {bands} bands",
                self.blocks
            )));
        }
        Ok(bands / self.blocks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    /// Number of band groups; each masked patch spans `bands / band_groups` bands.
    pub band_groups: usize,
    pub ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            patch_height: 8,
            patch_width: 8,
            band_groups: 4,
            ratio: 0.6,
        }
    }
}

/// Patch grid of a masking configuration on one cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskGeometry {
    pub rows: usize,
    pub cols: usize,
    pub groups: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub patch_depth: usize,
}

impl MaskGeometry {
    pub fn total(&self) -> usize {
        self.rows * self.cols * self.groups
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_height * self.patch_width * self.patch_depth
    }
}

impl MaskingConfig {
    pub fn geometry(&self, height: usize, width: usize, bands: usize) -> Result<MaskGeometry> {
        let (ph, pw, g) = (self.patch_height, self.patch_width, self.band_groups);
        let fits = |p: usize, n: usize| p > 0 && p < n && n % p == 0;
        if !fits(ph, height) || !fits(pw, width) || g < 2 || bands % g != 0 {
            return Err(Error::Config(format!(
                "mask patch {ph}x{pw} with {g} band groups does not tile {height}x{width}x{bands}"
            )));
        }
        Ok(MaskGeometry {
            rows: height / ph,
            cols: width / pw,
            groups: g,
            patch_height: ph,
            patch_width: pw,
            patch_depth: bands / g,
        })
    }

    pub fn masked_count(&self, total: usize) -> Result<usize> {
        masked_patch_count(total, self.ratio)
    }
}

/// `round(ratio · total)` with halves rounded up, clamped to `[1, total - 1]`.
pub fn masked_patch_count(total: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    if total < 2 {
        return Err(Error::Config(format!(
            "masking needs at least 2 patches, got {total}"
        )));
    }
    let m = (ratio * total as f64 + 0.5).floor() as usize;
    Ok(m.clamp(1, total - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JigsawSample {
    pub shuffled: DataCube,
    /// `permutation[slot]` = original position of the patch placed in `slot`.
    pub permutation: Vec<usize>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    /// Input with masked voxels set to zero.
    pub visible: DataCube,
    /// One flag per voxel, laid out like the cube.
    pub mask: Vec<bool>,
    /// Original values of the masked voxels, in voxel order.
    pub target: Vec<f64>,
    /// Flat indices `(row · cols + col) · groups + group` of masked patches.
    pub masked_patches: Vec<usize>,
}

impl MaskedSample {
    /// Puts the stored targets back into the visible cube.
    pub fn reassemble(&self) -> Vec<f64> {
        let mut out = self.visible.values.clone();
        let mut targets = self.target.iter();
        for (v, &m) in out.iter_mut().zip(&self.mask) {
            if m {
                *v = *targets.next().expect("one target per masked voxel");
            }
        }
        out
    }

    /// Full-size reference tensor: original values inside the mask, zero elsewhere.
    pub fn dense_target(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.len()];
        let mut targets = self.target.iter();
        for (v, &m) in out.iter_mut().zip(&self.mask) {
            if m {
                *v = *targets.next().expect("one target per masked voxel");
            }
        }
        out
    }

    pub fn masked_voxels(&self) -> usize {
        self.target.len()
    }
}

pub fn permutation_target(permutation: &[usize]) -> Vec<f64> {
    let n = permutation.len();
    let mut target = vec![0.0; n * n];
    for (slot, &orig) in permutation.iter().enumerate() {
        target[slot * n + orig] = 1.0;
    }
    target
}

pub fn inverse_permutation(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (slot, &orig) in permutation.iter().enumerate() {
        inv[orig] = slot;
    }
    inv
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    if p.len() != n || !is_permutation(p) {
        return Err(Error::Config(format!("not a permutation of 0..{n}: {p:?}")));
    }
    Ok(())
}

/// Rearranges spatial patches: slot `i` receives the patch at `permutation[i]`.
pub fn apply_spatial_permutation(
    cube: &DataCube,
    cfg: &SpatialJigsawConfig,
    permutation: &[usize],
) -> Result<JigsawSample> {
    let (_, grid_cols) = cfg.grid(cube.height, cube.width)?;
    let n = cfg.patch_count(cube.height, cube.width)?;
    check_permutation(permutation, n)?;
    let (ph, pw, c) = (cfg.patch_height, cfg.patch_width, cube.bands);
    let mut out = vec![0.0; cube.len()];
    for (slot, &orig) in permutation.iter().enumerate() {
        let (dr, dc) = ((slot / grid_cols) * ph, (slot % grid_cols) * pw);
        let (sr, sc) = ((orig / grid_cols) * ph, (orig % grid_cols) * pw);
        for r in 0..ph {
            let dst = cube.index(dr + r, dc, 0);
            let src = cube.index(sr + r, sc, 0);
            out[dst..dst + pw * c].copy_from_slice(&cube.values[src..src + pw * c]);
        }
    }
    Ok(JigsawSample {
        shuffled: cube.with_values(out),
        permutation: permutation.to_vec(),
        target: permutation_target(permutation),
    })
}

pub fn spatial_jigsaw(
    cube: &DataCube,
    cfg: &SpatialJigsawConfig,
    rng: &mut impl Rng,
) -> Result<JigsawSample> {
    let n = cfg.patch_count(cube.height, cube.width)?;
    apply_spatial_permutation(cube, cfg, &random_permutation(n, rng))
}

/// Undoes [`apply_spatial_permutation`].
pub fn restore_spatial(
    shuffled: &DataCube,
    cfg: &SpatialJigsawConfig,
    permutation: &[usize],
) -> Result<DataCube> {
    apply_spatial_permutation(shuffled, cfg, &inverse_permutation(permutation)).map(|s| s.shuffled)
}

/// Rearranges contiguous band blocks: block slot `i` receives block `permutation[i]`.
pub fn apply_spectral_permutation(
    cube: &DataCube,
    cfg: &SpectralJigsawConfig,
    permutation: &[usize],
) -> Result<JigsawSample> {
    let depth = cfg.block_depth(cube.bands)?;
    check_permutation(permutation, cfg.blocks)?;
    let c = cube.bands;
    let mut out = vec![0.0; cube.len()];
    for (dst_px, src_px) in out.chunks_exact_mut(c).zip(cube.values.chunks_exact(c)) {
        for (slot, &orig) in permutation.iter().enumerate() {
            dst_px[slot * depth..(slot + 1) * depth]
                .copy_from_slice(&src_px[orig * depth..(orig + 1) * depth]);
        }
    }
    Ok(JigsawSample {
        shuffled: cube.with_values(out),
        permutation: permutation.to_vec(),
        target: permutation_target(permutation),
    })
}

pub fn spectral_jigsaw(
    cube: &DataCube,
    cfg: &SpectralJigsawConfig,
    rng: &mut impl Rng,
) -> Result<JigsawSample> {
    cfg.block_depth(cube.bands)?;
    apply_spectral_permutation(cube, cfg, &random_permutation(cfg.blocks, rng))
}

pub fn restore_spectral(
    shuffled: &DataCube,
    cfg: &SpectralJigsawConfig,
    permutation: &[usize],
) -> Result<DataCube> {
    apply_spectral_permutation(shuffled, cfg, &inverse_permutation(permutation)).map(|s| s.shuffled)
}

/// Masks the listed patches (flat indices as in [`MaskedSample::masked_patches`]).
pub fn mask_patches(cube: &DataCube, geo: &MaskGeometry, patches: &[usize]) -> MaskedSample {
    let mut mask = vec![false; cube.len()];
    for &p in patches {
        let group = p % geo.groups;
        let cell = p / geo.groups;
        let (r0, c0) = (
            (cell / geo.cols) * geo.patch_height,
            (cell % geo.cols) * geo.patch_width,
        );
        let b0 = group * geo.patch_depth;
        for r in r0..r0 + geo.patch_height {
            for c in c0..c0 + geo.patch_width {
                let base = cube.index(r, c, b0);
                mask[base..base + geo.patch_depth].fill(true);
            }
        }
    }
    let mut visible = cube.values.clone();
    let mut target = Vec::new();
    for (v, &m) in visible.iter_mut().zip(&mask) {
        if m {
            target.push(*v);
            *v = 0.0;
        }
    }
    let mut masked_patches = patches.to_vec();
    masked_patches.sort_unstable();
    MaskedSample {
        visible: cube.with_values(visible),
        mask,
        target,
        masked_patches,
    }
}

/// Masks `M` patches drawn uniformly without replacement.
pub fn mask_cube(cube: &DataCube, cfg: &MaskingConfig, rng: &mut impl Rng) -> Result<MaskedSample> {
    let geo = cfg.geometry(cube.height, cube.width, cube.bands)?;
    let m = cfg.masked_count(geo.total())?;
    let patches = rand::seq::index::sample(rng, geo.total(), m).into_vec();
    Ok(mask_patches(cube, &geo, &patches))
}

/// Greedy one-to-one assignment over an `N × N` score matrix: repeatedly
/// takes the highest remaining `(slot, origin)` score whose row and column
/// are both still free.
pub fn decode_permutation(logits: &[f64]) -> Result<Vec<usize>> {
    let n = (logits.len() as f64).sqrt().round() as usize;
    if n * n != logits.len() {
        return Err(Error::Shape(format!(
            "{} logits do not form a square matrix",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut assigned = 0;
    for idx in order {
        let (slot, orig) = (idx / n, idx % n);
        if perm[slot] == usize::MAX && !used[orig] {
            perm[slot] = orig;
            used[orig] = true;
            assigned += 1;
            if assigned == n {
                break;
            }
        }
    }
    Ok(perm)
}
