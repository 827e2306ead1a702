//! Gradient-magnitude difficulty scores.
//!
//! Spatial derivatives are Scharr responses computed band by band with
//! replicate padding; the spectral derivative is a forward difference
//! `I[.., c+1] - I[.., c]` with the last band's difference set to zero. All
//! three fields share the cube's `height × width × bands` grid.

use serde::{Deserialize, Serialize};

use crate::data::DataCube;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientKernels {
    pub kx: [[f64; 3]; 3],
    pub ky: [[f64; 3]; 3],
    pub kz: [f64; 2],
}

impl GradientKernels {
    /// Unnormalized 3×3 Scharr pair and the `[1, -1]` spectral difference.
    pub fn scharr() -> Self {
        let kx = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];
        let mut ky = [[0.0; 3]; 3];
        for (i, row) in kx.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                ky[j][i] = v;
            }
        }
        Self {
            kx,
            ky,
            kz: [1.0, -1.0],
        }
    }
}

impl Default for GradientKernels {
    fn default() -> Self {
        Self::scharr()
    }
}

/// Directional derivative fields, each laid out like [`DataCube::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFields {
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub gz: Vec<f64>,
}

impl GradientFields {
    pub fn magnitude(&self) -> Vec<f64> {
        self.gx
            .iter()
            .zip(&self.gy)
            .zip(&self.gz)
            .map(|((x, y), z)| (x * x + y * y + z * z).sqrt())
            .collect()
    }
}

pub fn gradient_fields(cube: &DataCube, kernels: &GradientKernels) -> Result<GradientFields> {
    let (h, w, c) = (cube.height, cube.width, cube.bands);
    if h < 3 || w < 3 || c < 2 {
        return Err(Error::Shape(format!(
            "gradient kernels need at least 3x3x2, cube is {h}x{w}x{c}"
        )));
    }
    let n = cube.len();
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut gz = vec![0.0; n];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    for r in 0..h {
        for col in 0..w {
            let base = cube.index(r, col, 0);
            // True convolution: the kernel is flipped relative to the image.
            for (i, (kx_row, ky_row)) in kernels.kx.iter().zip(&kernels.ky).enumerate() {
                let rr = clamp(r as isize + 1 - i as isize, h);
                for j in 0..3 {
                    let cc = clamp(col as isize + 1 - j as isize, w);
                    let (wx, wy) = (kx_row[j], ky_row[j]);
                    if wx == 0.0 && wy == 0.0 {
                        continue;
                    }
                    let src = cube.index(rr, cc, 0);
                    let px = &cube.values[src..src + c];
                    for (b, &v) in px.iter().enumerate() {
                        gx[base + b] += wx * v;
                        gy[base + b] += wy * v;
                    }
                }
            }
            let px = &cube.values[base..base + c];
            for b in 0..c - 1 {
                gz[base + b] = kernels.kz[0] * px[b + 1] + kernels.kz[1] * px[b];
            }
        }
    }
    Ok(GradientFields { gx, gy, gz })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Average,
    Maximum,
    Std,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "mean" => Ok(Self::Average),
            "maximum" | "max" => Ok(Self::Maximum),
            "std" => Ok(Self::Std),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> f64 {
        let n = values.len() as f64;
        match self {
            Aggregation::Average => values.iter().sum::<f64>() / n,
            Aggregation::Maximum => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Std => {
                let mean = values.iter().sum::<f64>() / n;
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub cube_index: usize,
    pub value: f64,
    pub aggregation: Aggregation,
}

/// Aggregated 3D gradient magnitude of one cube.
pub fn difficulty(cube: &DataCube, aggregation: Aggregation) -> Result<f64> {
    let fields = gradient_fields(cube, &GradientKernels::scharr())?;
    Ok(aggregation.apply(&fields.magnitude()))
}

pub fn score_cubes(cubes: &[DataCube], aggregation: Aggregation) -> Result<Vec<DifficultyScore>> {
    cubes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(DifficultyScore {
                cube_index: i,
                value: difficulty(c, aggregation)?,
                aggregation,
            })
        })
        .collect()
}

/// Stable ascending order of `scores`, as indices into the input.
pub fn sort_by_difficulty(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mim,
    Jps,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mim" => Ok(Self::Mim),
            "jps" => Ok(Self::Jps),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub aggregation: Aggregation,
    pub task: TaskKind,
    pub pearson_r: f64,
    pub sample_count: usize,
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "correlated lists differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 samples, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlated list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn correlate_difficulty_with_loss(
    scores: &[f64],
    losses: &[f64],
    aggregation: Aggregation,
    task: TaskKind,
) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        aggregation,
        task,
        pearson_r: pearson(scores, losses)?,
        sample_count: scores.len(),
    })
}
