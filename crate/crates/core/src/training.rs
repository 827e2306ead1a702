//! Losses, the multi-task pretraining loop and supervised fine-tuning.
//!
//! Each mini-batch regenerates the pretext samples of its cubes from seeds
//! derived from `(seed, stage, epoch, position)`, so a run is reproducible
//! regardless of how the samples are produced. Head parameters step on the
//! gradient of their own (unweighted) loss. The encoder steps on the gradient
//! of `α_spa·L_spa + α_spe·L_spe + α_mim·L_mim`. A task whose weight is zero is
//! not generated, not forwarded and its head is not stepped.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::data::DataCube;
use crate::difficulty::{self, Aggregation};
use crate::evaluation::{self, MetricReport};
use crate::model::{Component, Encoder, HeadSpec, ModelGrads, MultiTaskModel};
use crate::nn::{AdamState, AdamW, Volume};
use crate::pretext::{
    self, JigsawSample, MaskedSample, MaskingConfig, SpatialJigsawConfig, SpectralJigsawConfig,
};
use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spatial: f64,
    pub spectral: f64,
    pub mim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 1.0,
            spectral: 1.0,
            mim: 4.0,
        }
    }
}

impl LossWeights {
    pub fn new(spatial: f64, spectral: f64, mim: f64) -> Result<Self> {
        let w = Self {
            spatial,
            spectral,
            mim,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.spatial, self.spectral, self.mim];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Weighted sum; absent terms count as zero.
    pub fn combine(&self, spatial: Option<f64>, spectral: Option<f64>, mim: Option<f64>) -> f64 {
        self.spatial * spatial.unwrap_or(0.0)
            + self.spectral * spectral.unwrap_or(0.0)
            + self.mim * mim.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// No pretraining.
    Scratch,
    /// Masked modelling only.
    Mim,
    /// Both jigsaw tasks only.
    Jps,
    /// All three tasks, uniform order.
    Mtssl,
    /// All three tasks on the easy-to-hard curriculum.
    Cmtssl,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Scratch,
        Strategy::Mim,
        Strategy::Jps,
        Strategy::Mtssl,
        Strategy::Cmtssl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::Mim => "mim",
            Strategy::Jps => "jps",
            Strategy::Mtssl => "mtssl",
            Strategy::Cmtssl => "cmtssl",
        }
    }

    /// Effective weights, or `None` when the strategy does not pretrain.
    pub fn task_weights(self, base: LossWeights) -> Option<LossWeights> {
        match self {
            Strategy::Scratch => None,
            Strategy::Mim => Some(LossWeights {
                spatial: 0.0,
                spectral: 0.0,
                ..base
            }),
            Strategy::Jps => Some(LossWeights { mim: 0.0, ..base }),
            Strategy::Mtssl | Strategy::Cmtssl => Some(base),
        }
    }

    pub fn uses_curriculum(self) -> bool {
        self == Strategy::Cmtssl
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub spatial: SpatialJigsawConfig,
    pub spectral: SpectralJigsawConfig,
    pub masking: MaskingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamW,
    pub batch_size: usize,
    /// Epochs of a non-curriculum run; curriculum runs take theirs from the schedule.
    pub epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub pretext: PretextConfig,
    pub aggregation: Aggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamW::default(),
            batch_size: 16,
            epochs: 10,
            strategy: Strategy::Cmtssl,
            seed: 0,
            pretext: PretextConfig::default(),
            aggregation: Aggregation::Average,
        }
    }
}

fn check_optimizer(opt: &AdamW, batch_size: usize) -> Result<()> {
    if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be > 0, got {}",
            opt.learning_rate
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("mini-batch size must be at least 1".into()));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer(&self.optimizer, self.batch_size)
    }
}

// ---------------------------------------------------------------------------
// Losses

fn check_binary(target: &[f64], logits: &[f64]) -> Result<()> {
    if target.len() != logits.len() || target.is_empty() {
        return Err(Error::Shape(format!(
            "{} targets for {} logits",
            target.len(),
            logits.len()
        )));
    }
    if let Some(v) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data(format!("binary target holds {v}")));
    }
    Ok(())
}

/// Mean binary cross-entropy from logits, `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(target: &[f64], logits: &[f64]) -> Result<f64> {
    check_binary(target, logits)?;
    let sum: f64 = target
        .iter()
        .zip(logits)
        .map(|(&y, &x)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(sum / target.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of [`bce_with_logits`] with respect to the logits.
fn bce_grad(target: &[f64], logits: &[f64]) -> Vec<f64> {
    let n = target.len() as f64;
    target
        .iter()
        .zip(logits)
        .map(|(&y, &x)| (sigmoid(x) - y) / n)
        .collect()
}

pub fn loss_spatial(target: &[f64], logits: &[f64]) -> Result<f64> {
    bce_with_logits(target, logits)
}

pub fn loss_spectral(target: &[f64], logits: &[f64]) -> Result<f64> {
    bce_with_logits(target, logits)
}

/// Mean absolute error over voxels where `mask` is set.
pub fn loss_mim(original: &[f64], reconstruction: &[f64], mask: &[bool]) -> Result<f64> {
    if original.len() != reconstruction.len() || original.len() != mask.len() {
        return Err(Error::Shape(format!(
            "masked error over {} / {} values with {} mask flags",
            original.len(),
            reconstruction.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a, b), &m) in original.iter().zip(reconstruction).zip(mask) {
        if m {
            sum += (b - a).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("mask selects no voxels".into()));
    }
    Ok(sum / count as f64)
}

/// Masked MAE of a reconstruction (HWC) against a sample's stored targets,
/// with the gradient with respect to the reconstruction.
fn mim_loss_grad(sample: &MaskedSample, reconstruction: &[f64]) -> Result<(f64, Vec<f64>)> {
    let count = sample.masked_voxels();
    if count == 0 {
        return Err(Error::Degenerate("mask selects no voxels".into()));
    }
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; reconstruction.len()];
    let mut targets = sample.target.iter();
    let mut sum = 0.0;
    for ((g, &r), &m) in grad.iter_mut().zip(reconstruction).zip(&sample.mask) {
        if m {
            let d = r - targets.next().expect("one target per masked voxel");
            sum += d.abs();
            *g = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok((sum * inv, grad))
}

/// Summed softmax cross-entropy over labelled pixels of a
/// `classes × H × W` logit volume. Returns `(sum, labelled pixels, ∂sum/∂logits)`.
pub fn segmentation_loss(
    logits: &Volume,
    labels: &[i32],
    ignore_id: Option<i32>,
) -> Result<(f64, usize, Volume)> {
    let plane = logits.plane_len();
    if labels.len() != plane {
        return Err(Error::Shape(format!(
            "{} labels for a {}x{} logit map",
            labels.len(),
            logits.height,
            logits.width
        )));
    }
    let k = logits.channels;
    let mut grad = Volume::zeros(k, logits.height, logits.width);
    let mut sum = 0.0;
    let mut count = 0;
    let mut probs = vec![0.0; k];
    for (p, &label) in labels.iter().enumerate() {
        if Some(label) == ignore_id {
            continue;
        }
        if label < 0 || label as usize >= k {
            return Err(Error::Data(format!("label {label} outside 0..{k}")));
        }
        let max = (0..k).map(|c| logits.data[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, pr) in probs.iter_mut().enumerate() {
            *pr = (logits.data[c * plane + p] - max).exp();
            z += *pr;
        }
        let t = label as usize;
        sum += z.ln() + max - logits.data[t * plane + p];
        for (c, pr) in probs.iter().enumerate() {
            grad.data[c * plane + p] = pr / z - if c == t { 1.0 } else { 0.0 };
        }
        count += 1;
    }
    Ok((sum, count, grad))
}

// ---------------------------------------------------------------------------
// Pretext batches

/// Inputs and targets of the active tasks for one cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextSet {
    pub spatial: Option<JigsawSample>,
    pub spectral: Option<JigsawSample>,
    pub mim: Option<MaskedSample>,
}

/// Draws fresh samples for the tasks with positive weight. `key` identifies
/// the cube's position so the draw does not depend on batch composition.
pub fn generate_pretext(
    cube: &DataCube,
    cfg: &PretextConfig,
    weights: &LossWeights,
    base_seed: u64,
    stage: usize,
    epoch: usize,
    key: usize,
) -> Result<PretextSet> {
    let parts = |task| [task, stage as u64, epoch as u64, key as u64];
    Ok(PretextSet {
        spatial: (weights.spatial > 0.0)
            .then(|| {
                let mut rng = seed::rng(base_seed, &parts(stream::SPATIAL_JIGSAW));
                pretext::spatial_jigsaw(cube, &cfg.spatial, &mut rng)
            })
            .transpose()?,
        spectral: (weights.spectral > 0.0)
            .then(|| {
                let mut rng = seed::rng(base_seed, &parts(stream::SPECTRAL_JIGSAW));
                pretext::spectral_jigsaw(cube, &cfg.spectral, &mut rng)
            })
            .transpose()?,
        mim: (weights.mim > 0.0)
            .then(|| {
                let mut rng = seed::rng(base_seed, &parts(stream::MASKING));
                pretext::mask_cube(cube, &cfg.masking, &mut rng)
            })
            .transpose()?,
    })
}

/// Mean per-task losses of a batch and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spatial: Option<f64>,
    pub spectral: Option<f64>,
    pub mim: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.spatial, self.spectral, self.mim]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
            && self.total.is_finite()
    }
}

/// Norms of `∇θ L_t` (unweighted) per task, for balancing the loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskGradNorms {
    pub spatial: Option<f64>,
    pub spectral: Option<f64>,
    pub mim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub losses: LossBreakdown,
    /// Heads: gradient of their own loss. Encoder: gradient of the weighted total.
    pub grads: ModelGrads,
    pub encoder_norms: TaskGradNorms,
}

#[derive(Clone, Copy)]
enum Task {
    Spatial,
    Spectral,
    Mim,
}

fn missing_head(name: &str) -> Error {
    Error::Config(format!("loss weight for {name} is positive but the model has no {name} head"))
}

/// Loss of one task on one sample; with `grads` set, accumulates
/// `scale · ∇` into the head buffer and the given encoder buffer.
fn task_pass<E: Encoder>(
    model: &MultiTaskModel<E>,
    task: Task,
    set: &PretextSet,
    grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> Result<f64> {
    match task {
        Task::Spatial | Task::Spectral => {
            let (head, sample, name) = match task {
                Task::Spatial => (&model.spatial, &set.spatial, "spatial jigsaw"),
                _ => (&model.spectral, &set.spectral, "spectral jigsaw"),
            };
            let head = head.as_ref().ok_or_else(|| missing_head(name))?;
            let sample = sample.as_ref().expect("sample generated for active task");
            let (feat, cache) = model.encoder.forward(&model.to_input(&sample.shuffled)?);
            let (logits, pooled) = head.forward(&feat);
            let loss = bce_with_logits(&sample.target, &logits)?;
            if let Some((head_grad, enc_grad, scale)) = grads {
                let mut g = bce_grad(&sample.target, &logits);
                g.iter_mut().for_each(|v| *v *= scale);
                let gfeat = head.backward(&feat, &pooled, &g, head_grad);
                model.encoder.backward(&cache, &gfeat, enc_grad);
            }
            Ok(loss)
        }
        Task::Mim => {
            let head = model.mim.as_ref().ok_or_else(|| missing_head("reconstruction"))?;
            let sample = set.mim.as_ref().expect("sample generated for active task");
            let (feat, cache) = model.encoder.forward(&model.to_input(&sample.visible)?);
            let out = head.forward(&feat);
            let rec = out.to_hwc();
            let (loss, g) = mim_loss_grad(sample, &rec)?;
            if let Some((head_grad, enc_grad, scale)) = grads {
                let mut gv = Volume::from_hwc(&g, out.height, out.width, out.channels);
                gv.scale(scale);
                let gfeat = head.backward(&feat, &gv, head_grad);
                model.encoder.backward(&cache, &gfeat, enc_grad);
            }
            Ok(loss)
        }
    }
}

fn active_tasks(weights: &LossWeights) -> Vec<(Task, f64, Component)> {
    [
        (Task::Spatial, weights.spatial, Component::Spatial),
        (Task::Spectral, weights.spectral, Component::Spectral),
        (Task::Mim, weights.mim, Component::Mim),
    ]
    .into_iter()
    .filter(|t| t.1 > 0.0)
    .collect()
}

fn breakdown(weights: &LossWeights, per_task: [Option<f64>; 3]) -> LossBreakdown {
    let [spatial, spectral, mim] = per_task;
    LossBreakdown {
        spatial,
        spectral,
        mim,
        total: weights.combine(spatial, spectral, mim),
    }
}

fn slot(task: Task) -> usize {
    match task {
        Task::Spatial => 0,
        Task::Spectral => 1,
        Task::Mim => 2,
    }
}

/// Batch-mean losses without gradients.
pub fn pretext_losses<E: Encoder>(
    model: &MultiTaskModel<E>,
    batch: &[PretextSet],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty mini-batch".into()));
    }
    let mut per_task = [None; 3];
    for (task, _, _) in active_tasks(weights) {
        let mut sum = 0.0;
        for set in batch {
            sum += task_pass(model, task, set, None)?;
        }
        per_task[slot(task)] = Some(sum / batch.len() as f64);
    }
    Ok(breakdown(weights, per_task))
}

/// Batch-mean losses and gradients, routed per task.
pub fn pretext_gradients<E: Encoder>(
    model: &MultiTaskModel<E>,
    batch: &[PretextSet],
    weights: &LossWeights,
) -> Result<StepGradients> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty mini-batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.zero_grads();
    let mut norms = TaskGradNorms::default();
    let mut per_task = [None; 3];
    for (task, alpha, component) in active_tasks(weights) {
        let mut enc = vec![0.0; grads.encoder.len()];
        let mut head = std::mem::take(grads.get_mut(component));
        let mut sum = 0.0;
        for set in batch {
            sum += task_pass(model, task, set, Some((&mut head, &mut enc, scale)))?;
        }
        *grads.get_mut(component) = head;
        per_task[slot(task)] = Some(sum * scale);
        let norm = enc.iter().map(|v| v * v).sum::<f64>().sqrt();
        match task {
            Task::Spatial => norms.spatial = Some(norm),
            Task::Spectral => norms.spectral = Some(norm),
            Task::Mim => norms.mim = Some(norm),
        }
        for (g, e) in grads.encoder.iter_mut().zip(&enc) {
            *g += alpha * e;
        }
    }
    Ok(StepGradients {
        losses: breakdown(weights, per_task),
        grads,
        encoder_norms: norms,
    })
}

// ---------------------------------------------------------------------------
// Logs and optimizer state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub spatial: Option<f64>,
    pub spectral: Option<f64>,
    pub mim: Option<f64>,
    #[serde(default)]
    pub segmentation: Option<f64>,
    pub total: f64,
    #[serde(default)]
    pub grad_norms: TaskGradNorms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub cubes: usize,
    pub mean_total: f64,
    pub validation: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub size: usize,
    pub epochs: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn optimizer_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

/// Per-component Adam moments, created on first use.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    states: std::collections::BTreeMap<Component, AdamState>,
}

impl OptimizerState {
    pub fn step<E: Encoder>(
        &mut self,
        opt: &AdamW,
        model: &mut MultiTaskModel<E>,
        grads: &ModelGrads,
        components: &[Component],
    ) {
        for &c in components {
            let Some(params) = model.params_mut(c) else {
                continue;
            };
            let state = self
                .states
                .entry(c)
                .or_insert_with(|| AdamState::new(params.len()));
            state.step(opt, params, grads.get(c));
        }
    }
}

/// Hooks into a training run. Defaults do nothing.
pub trait TrainObserver<E: Encoder> {
    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_epoch(&mut self, _record: &EpochRecord) {}

    /// Called after each curriculum stage; may return the checkpoint it wrote.
    fn on_stage_end(&mut self, _stage: usize, _model: &MultiTaskModel<E>) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

pub struct NoObserver;

impl<E: Encoder> TrainObserver<E> for NoObserver {}

fn diverged(step: usize, detail: String, last_checkpoint: &Option<PathBuf>) -> Error {
    Error::Diverged {
        step,
        detail,
        last_checkpoint: last_checkpoint.clone(),
    }
}

fn grads_finite(g: &ModelGrads) -> bool {
    Component::ALL.iter().all(|&c| g.get(c).iter().all(|v| v.is_finite()))
}

/// Positions `0..n` in the order training visits them: ascending difficulty
/// for curriculum runs, input order otherwise.
pub fn training_order(cubes: &[DataCube], cfg: &TrainConfig) -> Result<Vec<usize>> {
    if cfg.strategy.uses_curriculum() {
        let scores = cubes
            .iter()
            .map(|c| difficulty::difficulty(c, cfg.aggregation))
            .collect::<Result<Vec<_>>>()?;
        Ok(difficulty::sort_by_difficulty(&scores))
    } else {
        Ok((0..cubes.len()).collect())
    }
}

/// Multi-task pretraining over the stages of `schedule`.
pub fn pretrain<E: Encoder>(
    model: MultiTaskModel<E>,
    cubes: &[DataCube],
    schedule: &CurriculumSchedule,
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<(MultiTaskModel<E>, TrainLog)> {
    pretrain_observed(model, cubes, schedule, weights, cfg, &mut NoObserver)
}

pub fn pretrain_observed<E: Encoder>(
    mut model: MultiTaskModel<E>,
    cubes: &[DataCube],
    schedule: &CurriculumSchedule,
    weights: LossWeights,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<E>,
) -> Result<(MultiTaskModel<E>, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let Some(weights) = cfg.strategy.task_weights(weights) else {
        return Ok((model, log));
    };
    weights.validate()?;
    if schedule.dataset_size != cubes.len() {
        return Err(Error::Config(format!(
            "schedule covers {} cubes, dataset has {}",
            schedule.dataset_size,
            cubes.len()
        )));
    }
    let order = training_order(cubes, cfg)?;
    let mut components = vec![Component::Encoder];
    components.extend(active_tasks(&weights).iter().map(|t| t.2));

    let mut opt = OptimizerState::default();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut step = 0;
    for stage in schedule.batches() {
        for epoch in 0..stage.epochs {
            let mut positions: Vec<usize> = stage.cube_ids().collect();
            let mut rng = seed::rng(cfg.seed, &[stream::SHUFFLE, stage.index as u64, epoch as u64]);
            positions.shuffle(&mut rng);
            let mut epoch_sum = 0.0;
            let mut epoch_batches = 0;
            for chunk in positions.chunks(cfg.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&p| {
                        generate_pretext(&cubes[order[p]], &cfg.pretext, &weights, cfg.seed, stage.index, epoch, p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let out = pretext_gradients(&model, &batch, &weights)?;
                if !out.losses.is_finite() || !grads_finite(&out.grads) {
                    return Err(diverged(step, format!("non-finite loss {:?}", out.losses), &last_checkpoint));
                }
                opt.step(&cfg.optimizer, &mut model, &out.grads, &components);
                let record = StepRecord {
                    stage: stage.index,
                    epoch,
                    step,
                    spatial: out.losses.spatial,
                    spectral: out.losses.spectral,
                    mim: out.losses.mim,
                    segmentation: None,
                    total: out.losses.total,
                    grad_norms: out.encoder_norms,
                };
                observer.on_step(&record);
                log.steps.push(record);
                epoch_sum += out.losses.total;
                epoch_batches += 1;
                step += 1;
            }
            let record = EpochRecord {
                stage: stage.index,
                epoch,
                cubes: stage.size,
                mean_total: epoch_sum / epoch_batches.max(1) as f64,
                validation: None,
            };
            observer.on_epoch(&record);
            log.epochs.push(record);
        }
        let ckpt = observer.on_stage_end(stage.index, &model)?;
        if ckpt.is_some() {
            last_checkpoint = ckpt.clone();
        }
        log.stages.push(StageRecord {
            index: stage.index,
            size: stage.size,
            epochs: stage.epochs,
            checkpoint: ckpt,
        });
        log::info!(
            "stage {}: {} cubes x {} epochs, last loss {:.4}",
            stage.index,
            stage.size,
            stage.epochs,
            log.steps.last().map_or(f64::NAN, |s| s.total)
        );
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Per-cube losses on fixed draws (stage 0, epoch 0), e.g. for correlating
/// difficulty with task loss.
pub fn per_cube_losses<E: Encoder>(
    model: &MultiTaskModel<E>,
    cubes: &[DataCube],
    weights: &LossWeights,
    cfg: &PretextConfig,
    base_seed: u64,
) -> Result<Vec<LossBreakdown>> {
    cubes
        .iter()
        .enumerate()
        .map(|(i, cube)| {
            let set = generate_pretext(cube, cfg, weights, base_seed, 0, 0, i)?;
            pretext_losses(model, std::slice::from_ref(&set), weights)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub ignore_id: Option<i32>,
    /// Train only the segmentation head.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamW::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
            num_classes: 3,
            ignore_id: None,
            freeze_encoder: false,
        }
    }
}

/// Parameters updated by fine-tuning.
pub fn trainable_params<E: Encoder>(model: &MultiTaskModel<E>, freeze_encoder: bool) -> usize {
    let head = model.component_param_count(Component::Segmentation);
    if freeze_encoder {
        head
    } else {
        head + model.component_param_count(Component::Encoder)
    }
}

/// Ensures a segmentation head for `num_classes`; a new head's
/// initialization depends only on `seed`.
pub fn with_segmentation_head<E: Encoder>(
    mut model: MultiTaskModel<E>,
    num_classes: usize,
    seed: u64,
) -> Result<MultiTaskModel<E>> {
    if model.segmentation.as_ref().map(|h| h.outputs()) != Some(num_classes) {
        model.attach_head(&HeadSpec::Segmentation { num_classes }, seed)?;
    }
    Ok(model)
}

fn labelled_pixels(cubes: &[DataCube], cfg: &FinetuneConfig) -> Result<usize> {
    let mut count = 0;
    for cube in cubes {
        let labels = cube
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("cube {} has no labels", cube.id())))?;
        for &l in labels {
            if Some(l) == cfg.ignore_id {
                continue;
            }
            if l < 0 || l as usize >= cfg.num_classes {
                return Err(Error::Data(format!(
                    "label {l} in cube {} outside 0..{}",
                    cube.id(),
                    cfg.num_classes
                )));
            }
            count += 1;
        }
    }
    Ok(count)
}

/// Mean cross-entropy over labelled pixels of a batch, with gradients.
fn segmentation_step<E: Encoder>(
    model: &MultiTaskModel<E>,
    batch: &[&DataCube],
    cfg: &FinetuneConfig,
) -> Result<Option<(f64, ModelGrads)>> {
    let head = model.segmentation.as_ref().ok_or_else(|| missing_head("segmentation"))?;
    let mut passes = Vec::with_capacity(batch.len());
    let mut total_loss = 0.0;
    let mut total_px = 0;
    for cube in batch {
        let labels = cube.labels.as_ref().expect("labels checked");
        let (feat, cache) = model.encoder.forward(&model.to_input(cube)?);
        let logits = head.forward(&feat);
        let (sum, count, grad) = segmentation_loss(&logits, labels, cfg.ignore_id)?;
        total_loss += sum;
        total_px += count;
        if count > 0 {
            passes.push((feat, cache, grad));
        }
    }
    if total_px == 0 {
        return Ok(None);
    }
    let inv = 1.0 / total_px as f64;
    let mut grads = model.zero_grads();
    for (feat, cache, mut grad) in passes {
        grad.scale(inv);
        let gfeat = head.backward(&feat, &grad, &mut grads.segmentation);
        if !cfg.freeze_encoder {
            model.encoder.backward(&cache, &gfeat, &mut grads.encoder);
        }
    }
    Ok(Some((total_loss * inv, grads)))
}

/// Supervised training of the encoder and segmentation head on labelled cubes.
pub fn finetune<E: Encoder>(
    model: MultiTaskModel<E>,
    train: &[DataCube],
    validation: Option<&[DataCube]>,
    cfg: &FinetuneConfig,
) -> Result<(MultiTaskModel<E>, TrainLog)> {
    finetune_observed(model, train, validation, cfg, &mut NoObserver)
}

pub fn finetune_observed<E: Encoder>(
    model: MultiTaskModel<E>,
    train: &[DataCube],
    validation: Option<&[DataCube]>,
    cfg: &FinetuneConfig,
    observer: &mut dyn TrainObserver<E>,
) -> Result<(MultiTaskModel<E>, TrainLog)> {
    check_optimizer(&cfg.optimizer, cfg.batch_size)?;
    let start = Instant::now();
    if labelled_pixels(train, cfg)? == 0 {
        return Err(Error::Data("training cubes contain no labelled pixels".into()));
    }
    let mut model = with_segmentation_head(model, cfg.num_classes, cfg.seed)?;
    let components: &[Component] = if cfg.freeze_encoder {
        &[Component::Segmentation]
    } else {
        &[Component::Encoder, Component::Segmentation]
    };
    let mut opt = OptimizerState::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut positions: Vec<usize> = (0..train.len()).collect();
        let mut rng = seed::rng(cfg.seed, &[stream::FINETUNE_SHUFFLE, epoch as u64]);
        positions.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in positions.chunks(cfg.batch_size) {
            let batch: Vec<&DataCube> = chunk.iter().map(|&i| &train[i]).collect();
            let Some((loss, grads)) = segmentation_step(&model, &batch, cfg)? else {
                continue;
            };
            if !loss.is_finite() || !grads_finite(&grads) {
                return Err(diverged(step, format!("non-finite loss {loss}"), &None));
            }
            opt.step(&cfg.optimizer, &mut model, &grads, components);
            let record = StepRecord {
                stage: 0,
                epoch,
                step,
                spatial: None,
                spectral: None,
                mim: None,
                segmentation: Some(loss),
                total: loss,
                grad_norms: TaskGradNorms::default(),
            };
            observer.on_step(&record);
            log.steps.push(record);
            epoch_sum += loss;
            epoch_batches += 1;
            step += 1;
        }
        let validation = match validation {
            Some(v) if !v.is_empty() => {
                let cm = evaluation::evaluate_cubes(&model, v, cfg.num_classes, cfg.ignore_id)?;
                evaluation::metrics(&cm).ok()
            }
            _ => None,
        };
        let record = EpochRecord {
            stage: 0,
            epoch,
            cubes: train.len(),
            mean_total: epoch_sum / epoch_batches.max(1) as f64,
            validation,
        };
        observer.on_epoch(&record);
        log.epochs.push(record);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}
