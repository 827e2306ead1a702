//! Shared encoder and task heads.
//!
//! The default encoder is a small U-Net over the band axis treated as input
//! channels. Any type implementing [`Encoder`] can replace it. Heads:
//!
//! * spatial jigsaw: average-pool the feature map over the jigsaw patch grid,
//!   then a linear map to `N²` logits;
//! * spectral jigsaw: global average pool, then a linear map to `N²` logits;
//! * masked modelling: 1×1 convolution back to the input bands;
//! * segmentation: 1×1 convolution to per-pixel class logits.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BandStats, DataCube};
use crate::nn::{self, Conv2d, Linear, Volume};
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Default cap on encoder plus head parameters.
pub const DEFAULT_PARAM_BUDGET: usize = 25_000;

/// A trainable feature extractor producing a `feature_dim × H × W` map.
pub trait Encoder: Clone + Debug + Send + Sync {
    type Cache;

    /// `(height, width, bands)` the encoder accepts.
    fn input_shape(&self) -> (usize, usize, usize);
    fn feature_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, input: &Volume) -> (Volume, Self::Cache);
    /// Accumulates `∂L/∂θ` into `grad_params` given `∂L/∂features`.
    fn backward(&self, cache: &Self::Cache, grad_features: &Volume, grad_params: &mut [f64]);

    fn param_count(&self) -> usize {
        self.params().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Channel width of each resolution level, finest first.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
}

impl EncoderSpec {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            widths: vec![8, 16, 16],
            feature_dim: 16,
        }
    }
}

/// U-Net-style encoder: two 3×3 convolutions at full resolution, one per
/// coarser level after 2×2 average pooling, then nearest upsampling with skip
/// concatenation back to full resolution. ReLU after every convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LiteUNet {
    spec: EncoderSpec,
    stem: [Conv2d; 2],
    down: Vec<Conv2d>,
    /// `up[i]` produces level `i` from upsampled level `i+1` plus skip `i`.
    up: Vec<Conv2d>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LiteUNetCache {
    input: Volume,
    stem_mid: Volume,
    skips: Vec<Volume>,
    pooled: Vec<Volume>,
    up_inputs: Vec<Volume>,
    up_outputs: Vec<Volume>,
}

impl LiteUNet {
    pub fn new(spec: EncoderSpec, rng: &mut seed::Rng) -> Result<Self> {
        let levels = spec.widths.len();
        if levels < 2 || spec.widths.iter().any(|&w| w == 0) || spec.feature_dim == 0 || spec.bands == 0 {
            return Err(Error::Config(format!(
                "encoder needs at least two non-zero widths and a feature dim: {spec:?}"
            )));
        }
        let factor = 1 << (levels - 1);
        if spec.height % factor != 0 || spec.width % factor != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by {factor} for {levels} levels",
                spec.height, spec.width
            )));
        }
        let w = &spec.widths;
        let mut offset = 0;
        let mut next = |i, o, k| {
            let c = Conv2d::new(i, o, k, offset);
            offset = c.end();
            c
        };
        let stem = [next(spec.bands, w[0], 3), next(w[0], w[0], 3)];
        let down: Vec<Conv2d> = (1..levels).map(|l| next(w[l - 1], w[l], 3)).collect();
        let mut up = vec![Conv2d::new(1, 1, 1, 0); levels - 1];
        for l in (0..levels - 1).rev() {
            let from = if l == levels - 2 { w[levels - 1] } else { w[l + 1] };
            let out = if l == 0 { spec.feature_dim } else { w[l] };
            up[l] = next(from + w[l], out, 3);
        }
        let total = up[0].end().max(up.iter().map(Conv2d::end).max().unwrap_or(0));
        let mut params = vec![0.0; total];
        let gain = std::f64::consts::SQRT_2;
        for c in stem.iter().chain(&down).chain(up.iter().rev()) {
            c.init(&mut params, gain, rng);
        }
        Ok(Self {
            spec,
            stem,
            down,
            up,
            params,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }
}

impl Encoder for LiteUNet {
    type Cache = LiteUNetCache;

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.spec.height, self.spec.width, self.spec.bands)
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, input: &Volume) -> (Volume, LiteUNetCache) {
        let p = &self.params;
        let mut stem_mid = self.stem[0].forward(p, input);
        nn::relu(&mut stem_mid);
        let mut top = self.stem[1].forward(p, &stem_mid);
        nn::relu(&mut top);

        let mut skips = vec![top];
        let mut pooled = Vec::with_capacity(self.down.len());
        for conv in &self.down {
            let pin = nn::avg_pool2(skips.last().expect("non-empty"));
            let mut s = conv.forward(p, &pin);
            nn::relu(&mut s);
            pooled.push(pin);
            skips.push(s);
        }

        let levels = skips.len();
        let mut up_inputs = vec![Volume::zeros(0, 0, 0); levels - 1];
        let mut up_outputs = vec![Volume::zeros(0, 0, 0); levels - 1];
        let mut current = skips[levels - 1].clone();
        for l in (0..levels - 1).rev() {
            let cat = nn::concat(&nn::upsample2(&current), &skips[l]);
            let mut out = self.up[l].forward(p, &cat);
            nn::relu(&mut out);
            current = out.clone();
            up_inputs[l] = cat;
            up_outputs[l] = out;
        }
        (
            current,
            LiteUNetCache {
                input: input.clone(),
                stem_mid,
                skips,
                pooled,
                up_inputs,
                up_outputs,
            },
        )
    }

    fn backward(&self, cache: &LiteUNetCache, grad_features: &Volume, grad_params: &mut [f64]) {
        let p = &self.params;
        let levels = cache.skips.len();
        let mut skip_grads: Vec<Volume> = cache
            .skips
            .iter()
            .map(|s| Volume::zeros(s.channels, s.height, s.width))
            .collect();

        // Up path, finest level first.
        let mut grad = grad_features.clone();
        for l in 0..levels - 1 {
            nn::relu_backward(&mut grad, &cache.up_outputs[l]);
            let gcat = self.up[l]
                .backward(p, &cache.up_inputs[l], &grad, grad_params, true)
                .expect("input grad requested");
            let upsampled_channels = gcat.channels - cache.skips[l].channels;
            let (gup, gskip) = nn::split_channels(&gcat, upsampled_channels);
            skip_grads[l].add_assign(&gskip);
            grad = nn::upsample2_backward(&gup);
        }
        skip_grads[levels - 1].add_assign(&grad);

        // Down path, coarsest level first.
        for l in (1..levels).rev() {
            let mut g = skip_grads[l].clone();
            nn::relu_backward(&mut g, &cache.skips[l]);
            let gpool = self.down[l - 1]
                .backward(p, &cache.pooled[l - 1], &g, grad_params, true)
                .expect("input grad requested");
            skip_grads[l - 1].add_assign(&nn::avg_pool2_backward(&gpool));
        }

        let mut g = skip_grads.swap_remove(0);
        nn::relu_backward(&mut g, &cache.skips[0]);
        let mut g = self.stem[1]
            .backward(p, &cache.stem_mid, &g, grad_params, true)
            .expect("input grad requested");
        nn::relu_backward(&mut g, &cache.stem_mid);
        self.stem[0].backward(p, &cache.input, &g, grad_params, false);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    SpatialJigsaw { grid_rows: usize, grid_cols: usize },
    SpectralJigsaw { blocks: usize },
    Mim { bands: usize },
    Segmentation { num_classes: usize },
}

/// Pooled-feature multi-label head producing `pieces²` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct JigsawHead {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pieces: usize,
    linear: Linear,
    pub params: Vec<f64>,
}

impl JigsawHead {
    fn new(feature_dim: usize, grid_rows: usize, grid_cols: usize, pieces: usize, rng: &mut seed::Rng) -> Self {
        let linear = Linear::new(feature_dim * grid_rows * grid_cols, pieces * pieces, 0);
        let mut params = vec![0.0; linear.param_len()];
        linear.init(&mut params, 1.0, rng);
        Self {
            grid_rows,
            grid_cols,
            pieces,
            linear,
            params,
        }
    }

    pub fn outputs(&self) -> usize {
        self.linear.outputs
    }

    /// Returns logits and the pooled feature vector (needed for backward).
    pub fn forward(&self, features: &Volume) -> (Vec<f64>, Vec<f64>) {
        let pooled = nn::grid_pool(features, self.grid_rows, self.grid_cols);
        (self.linear.forward(&self.params, &pooled), pooled)
    }

    pub fn backward(&self, features: &Volume, pooled: &[f64], grad_logits: &[f64], grad_params: &mut [f64]) -> Volume {
        let gpool = self.linear.backward(&self.params, pooled, grad_logits, grad_params);
        nn::grid_pool_backward(
            &gpool,
            features.channels,
            features.height,
            features.width,
            self.grid_rows,
            self.grid_cols,
        )
    }
}

/// Per-pixel 1×1 convolution head.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelHead {
    conv: Conv2d,
    pub params: Vec<f64>,
}

impl PixelHead {
    fn new(feature_dim: usize, outputs: usize, rng: &mut seed::Rng) -> Self {
        let conv = Conv2d::new(feature_dim, outputs, 1, 0);
        let mut params = vec![0.0; conv.param_len()];
        conv.init(&mut params, 1.0, rng);
        Self { conv, params }
    }

    pub fn outputs(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward(&self, features: &Volume) -> Volume {
        self.conv.forward(&self.params, features)
    }

    pub fn backward(&self, features: &Volume, grad_out: &Volume, grad_params: &mut [f64]) -> Volume {
        self.conv
            .backward(&self.params, features, grad_out, grad_params, true)
            .expect("input grad requested")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Spatial,
    Spectral,
    Mim,
    Segmentation,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Spatial,
        Component::Spectral,
        Component::Mim,
        Component::Segmentation,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Spatial => "spatial",
            Component::Spectral => "spectral",
            Component::Mim => "mim",
            Component::Segmentation => "segmentation",
        }
    }
}

/// One encoder instance shared by every head.
#[derive(Debug, Clone)]
pub struct MultiTaskModel<E: Encoder = LiteUNet> {
    pub encoder: E,
    pub spatial: Option<JigsawHead>,
    pub spectral: Option<JigsawHead>,
    pub mim: Option<PixelHead>,
    pub segmentation: Option<PixelHead>,
    pub heads: Vec<HeadSpec>,
}

/// Gradient buffers mirroring a model's components. Absent heads have
/// empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<f64>,
    pub spatial: Vec<f64>,
    pub spectral: Vec<f64>,
    pub mim: Vec<f64>,
    pub segmentation: Vec<f64>,
}

impl ModelGrads {
    pub fn get(&self, c: Component) -> &[f64] {
        match c {
            Component::Encoder => &self.encoder,
            Component::Spatial => &self.spatial,
            Component::Spectral => &self.spectral,
            Component::Mim => &self.mim,
            Component::Segmentation => &self.segmentation,
        }
    }

    pub fn get_mut(&mut self, c: Component) -> &mut Vec<f64> {
        match c {
            Component::Encoder => &mut self.encoder,
            Component::Spatial => &mut self.spatial,
            Component::Spectral => &mut self.spectral,
            Component::Mim => &mut self.mim,
            Component::Segmentation => &mut self.segmentation,
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for c in Component::ALL {
            for (a, b) in self.get_mut(c).iter_mut().zip(other.get(c)) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in Component::ALL {
            self.get_mut(c).iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self, c: Component) -> f64 {
        self.get(c).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl<E: Encoder> MultiTaskModel<E> {
    /// Attaches heads to an existing encoder. Head initialization depends
    /// only on `seed` and the head kind, never on the encoder.
    pub fn with_encoder(encoder: E, heads: &[HeadSpec], seed: u64) -> Result<Self> {
        let (h, w, bands) = encoder.input_shape();
        let d = encoder.feature_dim();
        let mut model = Self {
            encoder,
            spatial: None,
            spectral: None,
            mim: None,
            segmentation: None,
            heads: Vec::new(),
        };
        for head in heads {
            model.attach(head, seed, h, w, bands, d)?;
        }
        Ok(model)
    }

    fn attach(&mut self, head: &HeadSpec, seed: u64, h: usize, w: usize, bands: usize, d: usize) -> Result<()> {
        match *head {
            HeadSpec::SpatialJigsaw { grid_rows, grid_cols } => {
                if grid_rows == 0 || grid_cols == 0 || h % grid_rows != 0 || w % grid_cols != 0 || grid_rows * grid_cols < 2 {
                    return Err(Error::Config(format!(
                        "spatial jigsaw grid {grid_rows}x{grid_cols} does not fit {h}x{w}"
                    )));
                }
                let mut rng = seed::rng(seed, &[stream::INIT_SPATIAL]);
                self.spatial = Some(JigsawHead::new(d, grid_rows, grid_cols, grid_rows * grid_cols, &mut rng));
            }
            HeadSpec::SpectralJigsaw { blocks } => {
                // The head only sees the block count; divisibility of the band
                // axis is checked when samples are generated.
                if blocks < 2 || blocks > bands {
                    return Err(Error::Config(format!(
                        "{blocks} spectral blocks do not fit {bands} bands"
                    )));
                }
                let mut rng = seed::rng(seed, &[stream::INIT_SPECTRAL]);
                self.spectral = Some(JigsawHead::new(d, 1, 1, blocks, &mut rng));
            }
            HeadSpec::Mim { bands: out } => {
                if out != bands {
                    return Err(Error::Config(format!(
                        "reconstruction head emits {out} bands, encoder takes {bands}"
                    )));
                }
                let mut rng = seed::rng(seed, &[stream::INIT_MIM]);
                self.mim = Some(PixelHead::new(d, bands, &mut rng));
            }
            HeadSpec::Segmentation { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::Config(format!(
                        "segmentation needs at least 2 classes, got {num_classes}"
                    )));
                }
                let mut rng = seed::rng(seed, &[stream::INIT_SEGMENTATION]);
                self.segmentation = Some(PixelHead::new(d, num_classes, &mut rng));
            }
        }
        self.heads.retain(|h| std::mem::discriminant(h) != std::mem::discriminant(head));
        self.heads.push(head.clone());
        Ok(())
    }

    /// Adds (or replaces) a head on a built model.
    pub fn attach_head(&mut self, head: &HeadSpec, seed: u64) -> Result<()> {
        let (h, w, bands) = self.encoder.input_shape();
        let d = self.encoder.feature_dim();
        self.attach(head, seed, h, w, bands, d)
    }

    pub fn params(&self, c: Component) -> Option<&[f64]> {
        match c {
            Component::Encoder => Some(self.encoder.params()),
            Component::Spatial => self.spatial.as_ref().map(|h| h.params.as_slice()),
            Component::Spectral => self.spectral.as_ref().map(|h| h.params.as_slice()),
            Component::Mim => self.mim.as_ref().map(|h| h.params.as_slice()),
            Component::Segmentation => self.segmentation.as_ref().map(|h| h.params.as_slice()),
        }
    }

    pub fn params_mut(&mut self, c: Component) -> Option<&mut [f64]> {
        match c {
            Component::Encoder => Some(self.encoder.params_mut()),
            Component::Spatial => self.spatial.as_mut().map(|h| h.params.as_mut_slice()),
            Component::Spectral => self.spectral.as_mut().map(|h| h.params.as_mut_slice()),
            Component::Mim => self.mim.as_mut().map(|h| h.params.as_mut_slice()),
            Component::Segmentation => self.segmentation.as_mut().map(|h| h.params.as_mut_slice()),
        }
    }

    pub fn component_param_count(&self, c: Component) -> usize {
        self.params(c).map_or(0, <[f64]>::len)
    }

    pub fn param_count(&self) -> usize {
        Component::ALL.iter().map(|&c| self.component_param_count(c)).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let z = |c| vec![0.0; self.component_param_count(c)];
        ModelGrads {
            encoder: z(Component::Encoder),
            spatial: z(Component::Spatial),
            spectral: z(Component::Spectral),
            mim: z(Component::Mim),
            segmentation: z(Component::Segmentation),
        }
    }

    pub fn to_input(&self, cube: &DataCube) -> Result<Volume> {
        let expected = self.encoder.input_shape();
        let got = (cube.height, cube.width, cube.bands);
        if expected != got {
            return Err(Error::Shape(format!(
                "model expects {expected:?} input, cube is {got:?}"
            )));
        }
        Ok(Volume::from_cube(cube))
    }

    fn head<'a, T>(head: &'a Option<T>, name: &str) -> Result<&'a T> {
        head.as_ref()
            .ok_or_else(|| Error::Config(format!("model has no {name} head")))
    }

    pub fn forward_spatial(&self, cube: &DataCube) -> Result<Vec<f64>> {
        let head = Self::head(&self.spatial, "spatial jigsaw")?;
        let (feat, _) = self.encoder.forward(&self.to_input(cube)?);
        Ok(head.forward(&feat).0)
    }

    pub fn forward_spectral(&self, cube: &DataCube) -> Result<Vec<f64>> {
        let head = Self::head(&self.spectral, "spectral jigsaw")?;
        let (feat, _) = self.encoder.forward(&self.to_input(cube)?);
        Ok(head.forward(&feat).0)
    }

    /// Full `height × width × bands` reconstruction.
    pub fn forward_mim(&self, cube: &DataCube) -> Result<DataCube> {
        let head = Self::head(&self.mim, "reconstruction")?;
        let (feat, _) = self.encoder.forward(&self.to_input(cube)?);
        Ok(cube.with_values(head.forward(&feat).to_hwc()))
    }

    /// Class logits as a `num_classes × height × width` volume.
    pub fn forward_segmentation(&self, cube: &DataCube) -> Result<Volume> {
        let head = Self::head(&self.segmentation, "segmentation")?;
        let (feat, _) = self.encoder.forward(&self.to_input(cube)?);
        Ok(head.forward(&feat))
    }

    pub fn forward_spatial_batch(&self, cubes: &[DataCube]) -> Result<Vec<Vec<f64>>> {
        cubes.iter().map(|c| self.forward_spatial(c)).collect()
    }

    pub fn forward_spectral_batch(&self, cubes: &[DataCube]) -> Result<Vec<Vec<f64>>> {
        cubes.iter().map(|c| self.forward_spectral(c)).collect()
    }

    /// Arg-max class per pixel, row-major.
    pub fn predict(&self, cube: &DataCube) -> Result<Vec<usize>> {
        let logits = self.forward_segmentation(cube)?;
        let plane = logits.plane_len();
        Ok((0..plane)
            .map(|p| {
                (0..logits.channels)
                    .max_by(|&a, &b| {
                        logits.data[a * plane + p]
                            .total_cmp(&logits.data[b * plane + p])
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0)
            })
            .collect())
    }
}

/// Builds the default encoder with the requested heads and checks the
/// parameter budget.
pub fn build_model(
    encoder: EncoderSpec,
    heads: &[HeadSpec],
    seed: u64,
    param_budget: Option<usize>,
) -> Result<MultiTaskModel<LiteUNet>> {
    let mut rng = seed::rng(seed, &[stream::INIT_ENCODER]);
    let enc = LiteUNet::new(encoder, &mut rng)?;
    let model = MultiTaskModel::with_encoder(enc, heads, seed)?;
    if let Some(budget) = param_budget {
        if model.param_count() > budget {
            return Err(Error::Config(format!(
                "model has {} parameters, budget is {budget}",
                model.param_count()
            )));
        }
    }
    Ok(model)
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Self-describing model snapshot: parameter tensors keyed by component,
/// architecture, normalization statistics and the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub encoder: EncoderSpec,
    pub heads: Vec<HeadSpec>,
    pub components: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub normalization: Option<BandStats>,
    #[serde(default)]
    pub stage: Option<usize>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

impl Checkpoint {
    pub fn capture(
        model: &MultiTaskModel<LiteUNet>,
        normalization: Option<BandStats>,
        stage: Option<usize>,
        config: serde_json::Value,
    ) -> Self {
        let components = Component::ALL
            .iter()
            .filter_map(|&c| model.params(c).map(|p| (c.key().to_string(), p.to_vec())))
            .collect();
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            encoder: model.encoder.spec().clone(),
            heads: model.heads.clone(),
            components,
            normalization,
            stage,
            config,
        }
    }

    pub fn restore(&self) -> Result<MultiTaskModel<LiteUNet>> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut model = build_model(self.encoder.clone(), &self.heads, 0, None)?;
        for c in Component::ALL {
            match (model.params_mut(c), self.components.get(c.key())) {
                (Some(dst), Some(src)) if dst.len() == src.len() => dst.copy_from_slice(src),
                (Some(dst), Some(src)) => {
                    return Err(Error::Format(format!(
                        "component `{}` has {} values, architecture needs {}",
                        c.key(),
                        src.len(),
                        dst.len()
                    )))
                }
                (Some(_), None) => {
                    return Err(Error::Format(format!("checkpoint lacks component `{}`", c.key())))
                }
                (None, Some(_)) => {
                    return Err(Error::Format(format!("unexpected component `{}`", c.key())))
                }
                (None, None) => {}
            }
        }
        Ok(model)
    }

    /// Writes to `path`; a directory gets a `checkpoint.json` inside it.
    pub fn save(&self, path: &Path) -> Result<std::path::PathBuf> {
        let file = if path.extension().is_some() {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            path.to_path_buf()
        } else {
            std::fs::create_dir_all(path)?;
            path.join(CHECKPOINT_FILE)
        };
        std::fs::write(&file, serde_json::to_vec(self)?)?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&file)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", file.display())))
    }
}

/// Heads for the three pretext tasks on a `height × width × bands` input.
pub fn pretext_heads(
    bands: usize,
    spatial_grid: (usize, usize),
    spectral_blocks: usize,
) -> Vec<HeadSpec> {
    vec![
        HeadSpec::SpatialJigsaw {
            grid_rows: spatial_grid.0,
            grid_cols: spatial_grid.1,
        },
        HeadSpec::SpectralJigsaw {
            blocks: spectral_blocks,
        },
        HeadSpec::Mim { bands },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_model(bands: usize) -> MultiTaskModel {
        build_model(
            EncoderSpec::new(16, 16, bands),
            &pretext_heads(bands, (2, 2), 4),
            3,
            Some(DEFAULT_PARAM_BUDGET),
        )
        .unwrap()
    }

    #[test]
    fn pavia_university_fits_budget() {
        let m = default_model(103);
        assert!(m.param_count() <= DEFAULT_PARAM_BUDGET, "{}", m.param_count());
        let per_component: usize = Component::ALL.iter().map(|&c| m.component_param_count(c)).sum();
        assert_eq!(per_component, m.param_count());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = default_model(32);
        let b = default_model(32);
        for c in Component::ALL {
            assert_eq!(a.params(c), b.params(c));
        }
    }

    #[test]
    fn jigsaw_head_outputs_square() {
        let m = default_model(32);
        assert_eq!(m.spatial.as_ref().unwrap().outputs(), 16);
        let cube = DataCube::from_fn(16, 16, 32, |r, c, b| ((r + 2 * c + 3 * b) % 7) as f64 * 0.1);
        assert_eq!(m.forward_spatial(&cube).unwrap().len(), 16);
        assert_eq!(m.forward_spectral(&cube).unwrap().len(), 16);
        let rec = m.forward_mim(&cube).unwrap();
        assert_eq!((rec.height, rec.width, rec.bands), (16, 16, 32));
    }

    #[test]
    fn wrong_input_shape_is_a_shape_error() {
        let m = default_model(32);
        let cube = DataCube::from_fn(16, 16, 8, |_, _, _| 0.0);
        assert!(matches!(m.forward_spatial(&cube), Err(Error::Shape(_))));
    }

    #[test]
    fn single_class_segmentation_rejected() {
        let r = build_model(
            EncoderSpec::new(16, 16, 8),
            &[HeadSpec::Segmentation { num_classes: 1 }],
            0,
            None,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn budget_enforced() {
        let r = build_model(EncoderSpec::new(16, 16, 32), &pretext_heads(32, (2, 2), 4), 0, Some(100));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = default_model(8);
        let ck = Checkpoint::capture(&m, Some(BandStats::identity(8)), Some(2), serde_json::json!({"seed": 3}));
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        for c in Component::ALL {
            assert_eq!(restored.params(c), m.params(c));
        }
    }
}
