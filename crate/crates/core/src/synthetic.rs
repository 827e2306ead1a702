//! Synthetic labelled scenes with controllable texture.
//!
//! The scene is split into Voronoi regions. Each region carries a class and a
//! texture level; a pixel is its class prototype plus `level × texture` plus
//! white noise. Prototypes are smooth low-order cosine mixtures over the band
//! axis. The texture is a sum of random plane waves whose spectral loading is
//! itself a smooth curve, so spatial and spectral gradients grow together with
//! the level.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: usize,
    /// Explicit spectra, one per class. Generated when empty.
    pub prototypes: Vec<Vec<f64>>,
    /// Minimum pairwise L2 distance between prototypes.
    pub prototype_margin: f64,
    /// Number of Voronoi regions (at least `num_classes`).
    pub regions: usize,
    /// Texture amplitudes, assigned to regions in turn.
    pub texture_levels: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            height: 128,
            width: 128,
            bands: 32,
            num_classes: 3,
            prototypes: Vec::new(),
            prototype_margin: 0.5,
            regions: 24,
            texture_levels: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            noise_std: 0.01,
            seed: 0,
        }
    }
}

const PLANE_WAVES: usize = 12;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands < 2 {
            return Err(Error::Config(format!(
                "synthetic scene must be at least 1x1x2, got {}x{}x{}",
                self.height, self.width, self.bands
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic scene needs at least 2 classes".into()));
        }
        if self.regions < self.num_classes || self.regions > self.height * self.width {
            return Err(Error::Config(format!(
                "{} regions cannot hold {} classes in {}x{} pixels",
                self.regions, self.num_classes, self.height, self.width
            )));
        }
        if self.texture_levels.is_empty() || self.texture_levels.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config(format!(
                "texture levels must be non-empty and >= 0: {:?}",
                self.texture_levels
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        if !self.prototypes.is_empty() {
            if self.prototypes.len() < self.num_classes {
                return Err(Error::Config(format!(
                    "{} prototypes for {} classes",
                    self.prototypes.len(),
                    self.num_classes
                )));
            }
            if self.prototypes.iter().any(|p| p.len() != self.bands) {
                return Err(Error::Config(format!("every prototype needs {} bands", self.bands)));
            }
            if min_distance(&self.prototypes[..self.num_classes]) < self.prototype_margin {
                return Err(Error::Config(format!(
                    "prototypes closer than margin {}",
                    self.prototype_margin
                )));
            }
        }
        Ok(())
    }
}

fn min_distance(protos: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in protos.iter().enumerate() {
        for b in &protos[i + 1..] {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Smooth curve `c0 + Σ_j a_j cos(π j t + φ_j)` sampled at `t = b / (bands − 1)`.
fn cosine_mixture(bands: usize, offset: f64, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let terms: Vec<(f64, f64)> = (1..=3)
        .map(|j| {
            (
                rng.gen_range(-amplitude..amplitude) / j as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / (bands - 1) as f64;
            offset
                + terms
                    .iter()
                    .enumerate()
                    .map(|(j, (a, phi))| a * (std::f64::consts::PI * (j + 1) as f64 * t + phi).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Random smooth class spectra at least `margin` apart.
pub fn generate_prototypes(num_classes: usize, bands: usize, margin: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..1000 {
        let protos: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                let offset = rng.gen_range(0.2..0.8);
                cosine_mixture(bands, offset, 0.3, rng)
            })
            .collect();
        if min_distance(&protos) >= margin {
            return Ok(protos);
        }
    }
    Err(Error::Config(format!(
        "could not draw {num_classes} prototypes over {bands} bands at margin {margin}"
    )))
}

/// Builds the scene and its label map.
pub fn generate_scene(spec: &SyntheticSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let mut rng = seed::rng(spec.seed, &[stream::SYNTHETIC]);

    let protos = if spec.prototypes.is_empty() {
        generate_prototypes(spec.num_classes, c, spec.prototype_margin, &mut rng)?
    } else {
        spec.prototypes[..spec.num_classes].to_vec()
    };

    // Region centres, classes (every class at least once) and texture levels.
    let centres: Vec<(f64, f64)> = (0..spec.regions)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect();
    let mut classes: Vec<usize> = (0..spec.regions)
        .map(|r| if r < spec.num_classes { r } else { rng.gen_range(0..spec.num_classes) })
        .collect();
    rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
    let levels: Vec<f64> = (0..spec.regions)
        .map(|r| spec.texture_levels[r % spec.texture_levels.len()])
        .collect();

    // Two texture fields, each a sum of plane waves with its own spectral loading.
    let fields: Vec<(Vec<(f64, f64, f64)>, Vec<f64>)> = (0..2)
        .map(|_| {
            let waves = (0..PLANE_WAVES)
                .map(|_| {
                    let k = rng.gen_range(0.6..2.2);
                    let theta = rng.gen_range(0.0..std::f64::consts::PI);
                    (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            (waves, cosine_mixture(c, 1.0, 0.5, &mut rng))
        })
        .collect();
    let wave_norm = (2.0 / PLANE_WAVES as f64).sqrt();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let mut pixels = Vec::with_capacity(h * w * c);
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
            let region = centres
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("at least one region");
            let class = classes[region];
            labels.push(class as i32);
            let level = levels[region];
            let t: Vec<f64> = fields
                .iter()
                .map(|(waves, _)| {
                    wave_norm * waves.iter().map(|(ky, kx, phi)| (ky * y + kx * x + phi).sin()).sum::<f64>()
                })
                .collect();
            for b in 0..c {
                let texture = (t[0] * fields[0].1[b] + t[1] * fields[1].1[b]) / std::f64::consts::SQRT_2;
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push(protos[class][b] + level * texture + n);
            }
        }
    }
    Scene::new(spec.name.clone(), h, w, c, pixels, Some(labels))
}

/// A labelled scene plus `extra` unlabelled scenes that share its class
/// spectra but differ in layout, texture phases and noise.
pub fn generate_family(spec: &SyntheticSpec, extra: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut base = spec.clone();
    if base.prototypes.is_empty() {
        let mut rng = seed::rng(spec.seed, &[stream::SYNTHETIC, u64::MAX]);
        base.prototypes = generate_prototypes(spec.num_classes, spec.bands, spec.prototype_margin, &mut rng)?;
    }
    let mut scenes = vec![generate_scene(&base)?];
    for i in 0..extra {
        let member = SyntheticSpec {
            name: format!("{}-u{}", spec.name, i + 1),
            seed: seed::derive(spec.seed, &[stream::SYNTHETIC, i as u64 + 1]),
            ..base.clone()
        };
        let mut scene = generate_scene(&member)?;
        scene.labels = None;
        scenes.push(scene);
    }
    Ok(scenes)
}
