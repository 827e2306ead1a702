//! End-to-end workflows: data preparation, single runs, strategy comparison,
//! one-at-a-time sweeps and difficulty/loss correlation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{apply_override, RunConfig};
use crate::curriculum::{baseline_epochs, CurriculumSchedule};
use crate::data::{self, BandStats, DataCube, Scene, Split};
use crate::difficulty::{self, Aggregation, CorrelationReport, TaskKind};
use crate::evaluation::{self, MetricReport};
use crate::model::{build_model, Checkpoint, LiteUNet, MultiTaskModel};
use crate::report::{self, MetricRow};
use crate::synthetic;
use crate::training::{self, EpochRecord, LossWeights, StepRecord, Strategy, TrainLog, TrainObserver};
use crate::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Normalized cubes of every split plus the statistics used.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub pretrain: Vec<DataCube>,
    pub train: Vec<DataCube>,
    pub validation: Vec<DataCube>,
    pub test: Vec<DataCube>,
    pub stats: BandStats,
    pub bands: usize,
}

/// Labelled scenes and unlabelled pretraining-only scenes.
pub fn load_scenes(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if cfg.data.scenes.is_empty() {
        let mut family = synthetic::generate_family(&cfg.synthetic, cfg.data.extra_pretrain_scenes)?;
        let extra = family.split_off(1);
        return Ok((family, extra));
    }
    let scenes = cfg
        .data
        .scenes
        .iter()
        .map(|p| data::load_scene(p, cfg.data.format.unwrap_or_else(|| data::detect_format(p))))
        .collect::<Result<Vec<_>>>()?;
    Ok((scenes, Vec::new()))
}

fn tile_split(cfg: &RunConfig, scenes: &[Scene], split: Split) -> Result<Vec<DataCube>> {
    let mut out = Vec::new();
    for scene in scenes {
        let spec = cfg.split_spec(scene.height, scene.width);
        spec.validate()?;
        if spec.covers(&scene.name, split) {
            out.extend(data::tile_scene(scene, &spec, split)?);
        }
    }
    Ok(out)
}

/// Tiles every split, fits per-band statistics on the training tiles and
/// normalizes everything with them.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (labelled, extra) = load_scenes(cfg)?;
    let mut pretrain = tile_split(cfg, &labelled, Split::Pretrain)?;
    for scene in &extra {
        pretrain.extend(data::tile_full(scene, cfg.data.tile_size, cfg.data.pretrain_stride)?);
    }
    let train = tile_split(cfg, &labelled, Split::Train)?;
    let validation = tile_split(cfg, &labelled, Split::Validation)?;
    let test = tile_split(cfg, &labelled, Split::Test)?;
    if train.is_empty() {
        return Err(Error::Config("no training tiles; check the split regions".into()));
    }
    let stats = data::fit_normalizer(&train)?;
    let bands = stats.bands();
    Ok(PreparedData {
        pretrain: data::normalize_all(&pretrain, &stats)?,
        train: data::normalize_all(&train, &stats)?,
        validation: data::normalize_all(&validation, &stats)?,
        test: data::normalize_all(&test, &stats)?,
        stats,
        bands,
    })
}

/// Step budget of the curriculum and of the matched plain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub dataset_size: usize,
    pub batch_size: usize,
    pub curriculum: CurriculumSchedule,
    pub curriculum_steps: usize,
    pub baseline_epochs: usize,
    pub baseline_steps: usize,
    pub steps_per_epoch: usize,
}

pub fn plan_budget(cfg: &RunConfig, n: usize) -> Result<BudgetPlan> {
    let c = &cfg.curriculum;
    let curriculum = CurriculumSchedule::new(n, c.stages, c.initial_epochs, c.growth)?;
    let b = cfg.train.batch_size;
    let curriculum_steps = curriculum.match_budget(b);
    let epochs = cfg.train.epochs.unwrap_or_else(|| baseline_epochs(n, b, curriculum_steps));
    let steps_per_epoch = n.div_ceil(b);
    Ok(BudgetPlan {
        dataset_size: n,
        batch_size: b,
        curriculum,
        curriculum_steps,
        baseline_epochs: epochs,
        baseline_steps: epochs * steps_per_epoch,
        steps_per_epoch,
    })
}

/// Curriculum strategies with the curriculum switched off fall back to the
/// plain multi-task run.
pub fn effective_strategy(cfg: &RunConfig, strategy: Strategy) -> Strategy {
    if strategy == Strategy::Cmtssl && !cfg.curriculum.enabled {
        Strategy::Mtssl
    } else {
        strategy
    }
}

pub fn schedule_for(cfg: &RunConfig, strategy: Strategy, n: usize) -> Result<CurriculumSchedule> {
    let plan = plan_budget(cfg, n)?;
    if effective_strategy(cfg, strategy).uses_curriculum() {
        Ok(plan.curriculum)
    } else {
        CurriculumSchedule::flat(n, plan.baseline_epochs)
    }
}

/// Refuses to reuse a non-empty directory unless `force` is set, in which
/// case the old contents are removed.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join(SNAPSHOT_FILE), cfg.to_toml_string()?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
    Stage { index: usize, checkpoint: Option<PathBuf> },
}

/// Streams log lines and writes a checkpoint after every stage.
pub struct RunObserver {
    log: Option<BufWriter<File>>,
    ckpt_dir: Option<PathBuf>,
    stats: BandStats,
    config: serde_json::Value,
    error: Option<std::io::Error>,
}

impl RunObserver {
    pub fn new(dir: Option<&Path>, stats: BandStats, cfg: &RunConfig, log_name: &str) -> Result<Self> {
        let log = match dir {
            Some(d) => Some(BufWriter::new(
                File::options().create(true).append(true).open(d.join(log_name))?,
            )),
            None => None,
        };
        Ok(Self {
            log,
            ckpt_dir: dir.map(|d| d.join("ckpt")),
            stats,
            config: serde_json::to_value(cfg)?,
            error: None,
        })
    }

    fn line(&mut self, line: &LogLine) {
        if let Some(w) = &mut self.log {
            let res = serde_json::to_writer(&mut *w, line)
                .map_err(std::io::Error::from)
                .and_then(|_| w.write_all(b"\n"));
            if let Err(e) = res {
                self.error.get_or_insert(e);
            }
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.log {
            w.flush()?;
        }
        match self.error {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    pub fn checkpoint(&self, model: &MultiTaskModel, name: &str, stage: Option<usize>) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.ckpt_dir else {
            return Ok(None);
        };
        let ck = Checkpoint::capture(model, Some(self.stats.clone()), stage, self.config.clone());
        ck.save(&dir.join(name)).map(Some)
    }
}

impl TrainObserver<LiteUNet> for RunObserver {
    fn on_step(&mut self, record: &StepRecord) {
        self.line(&LogLine::Step(record.clone()));
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        self.line(&LogLine::Epoch(record.clone()));
    }

    fn on_stage_end(&mut self, stage: usize, model: &MultiTaskModel) -> Result<Option<PathBuf>> {
        let path = self.checkpoint(model, &format!("stage-{stage}"), Some(stage))?;
        self.line(&LogLine::Stage {
            index: stage,
            checkpoint: path.clone(),
        });
        Ok(path)
    }
}

/// Fresh model with the pretext heads for `seed`.
pub fn fresh_model(cfg: &RunConfig, bands: usize, seed: u64) -> Result<MultiTaskModel> {
    build_model(
        cfg.encoder_spec(bands),
        &cfg.pretext_heads(bands),
        seed,
        Some(cfg.model.param_budget),
    )
}

pub fn run_pretrain(
    cfg: &RunConfig,
    data: &PreparedData,
    strategy: Strategy,
    seed: u64,
    dir: Option<&Path>,
) -> Result<(MultiTaskModel, TrainLog)> {
    let strategy = effective_strategy(cfg, strategy);
    let model = fresh_model(cfg, data.bands, seed)?;
    if strategy == Strategy::Scratch {
        return Ok((model, TrainLog::default()));
    }
    if data.pretrain.is_empty() {
        return Err(Error::Config("no pretraining tiles".into()));
    }
    let schedule = schedule_for(cfg, strategy, data.pretrain.len())?;
    let tc = cfg.train_config(strategy, seed);
    let mut obs = RunObserver::new(dir, data.stats.clone(), cfg, LOG_FILE)?;
    let out = training::pretrain_observed(model, &data.pretrain, &schedule, cfg.loss, &tc, &mut obs);
    obs.finish()?;
    out
}

pub fn run_finetune(
    cfg: &RunConfig,
    data: &PreparedData,
    model: MultiTaskModel,
    seed: u64,
    dir: Option<&Path>,
) -> Result<(MultiTaskModel, TrainLog)> {
    let fc = cfg.finetune_config(seed);
    let mut obs = RunObserver::new(dir, data.stats.clone(), cfg, "finetune.jsonl")?;
    let val = (!data.validation.is_empty()).then_some(data.validation.as_slice());
    let out = training::finetune_observed(model, &data.train, val, &fc, &mut obs);
    obs.finish()?;
    let (model, log) = out?;
    obs_checkpoint(dir, cfg, data, &model)?;
    Ok((model, log))
}

fn obs_checkpoint(dir: Option<&Path>, cfg: &RunConfig, data: &PreparedData, model: &MultiTaskModel) -> Result<()> {
    if let Some(d) = dir {
        let ck = Checkpoint::capture(model, Some(data.stats.clone()), None, serde_json::to_value(cfg)?);
        ck.save(&d.join("ckpt").join("final"))?;
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, model: &MultiTaskModel, cubes: &[DataCube]) -> Result<MetricReport> {
    let cm = evaluation::evaluate_cubes(model, cubes, cfg.data.num_classes, cfg.data.ignore_id)?;
    evaluation::metrics(&cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
    pub validation: Option<MetricReport>,
    pub test: MetricReport,
}

/// Pretrain (unless scratch), fine-tune and evaluate on the test split.
pub fn run_strategy(
    cfg: &RunConfig,
    data: &PreparedData,
    strategy: Strategy,
    seed: u64,
    dir: Option<&Path>,
) -> Result<RunOutcome> {
    if data.test.is_empty() {
        return Err(Error::Config("no test tiles; check the split regions".into()));
    }
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let (model, pre_log) = run_pretrain(cfg, data, strategy, seed, dir)?;
    let (model, ft_log) = run_finetune(cfg, data, model, seed, dir)?;
    let validation = if data.validation.is_empty() {
        None
    } else {
        Some(evaluate(cfg, &model, &data.validation)?)
    };
    let test = evaluate(cfg, &model, &data.test)?;
    log::info!(
        "{strategy} seed {seed}: AA {:.2}% ({} pretraining steps)",
        100.0 * test.aa,
        pre_log.optimizer_steps()
    );
    Ok(RunOutcome {
        strategy,
        seed,
        pretrain_steps: pre_log.optimizer_steps(),
        finetune_steps: ft_log.optimizer_steps(),
        pretrain_secs: pre_log.wall_clock_secs,
        finetune_secs: ft_log.wall_clock_secs,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub aggregate: MetricReport,
    pub runs: Vec<RunOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub budget: BudgetPlan,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, s: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, &MetricReport)> =
            self.rows.iter().map(|r| (r.strategy.to_string(), &r.aggregate)).collect();
        report::metric_table(&rows)
    }
}

pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Every strategy on every seed with the same data and fine-tuning budget.
pub fn compare(
    cfg: &RunConfig,
    data: &PreparedData,
    strategies: &[Strategy],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<ComparisonReport> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one strategy and one seed".into()));
    }
    let budget = plan_budget(cfg, data.pretrain.len().max(1))?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        let runs = seeds
            .iter()
            .map(|&seed| {
                let sub = dir.map(|d| d.join("runs").join(format!("{strategy}-seed{seed}")));
                run_strategy(cfg, data, strategy, seed, sub.as_deref())
            })
            .collect::<Result<Vec<_>>>()?;
        let tests: Vec<MetricReport> = runs.iter().map(|r| r.test.clone()).collect();
        rows.push(ComparisonRow {
            strategy,
            aggregate: evaluation::aggregate_runs(&tests)?,
            runs,
        });
    }
    let report = ComparisonReport { budget, rows };
    if let Some(d) = dir {
        report::write_json(&d.join(REPORT_FILE), &report)?;
        let csv: Vec<MetricRow> = report
            .rows
            .iter()
            .map(|r| MetricRow::new(r.strategy.name(), &r.aggregate))
            .collect();
        report::write_csv(&d.join("plots").join("compare.csv"), &csv)?;
        let bars: Vec<(String, f64, f64)> = report
            .rows
            .iter()
            .map(|r| (r.strategy.to_string(), 100.0 * r.aggregate.aa, 100.0 * r.aggregate.aa_std))
            .collect();
        std::fs::write(
            d.join("plots").join("compare_aa.svg"),
            report::bar_chart("Average accuracy by strategy", "AA (%)", &bars),
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub pretrain_steps: usize,
    pub aggregate: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: String,
    pub key: String,
    pub strategy: Strategy,
    pub rows: Vec<SweepRow>,
}

/// `cfg` with one dotted key replaced.
pub fn with_override(cfg: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    apply_override(&mut table, assignment)?;
    let out: RunConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

/// Varies one parameter over `values`, holding the rest of `cfg` fixed.
pub fn sweep(
    cfg: &RunConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepReport> {
    let key = crate::config::sweep_key(param);
    let strategy = cfg.train.strategy;
    let configs = values
        .iter()
        .map(|v| with_override(cfg, &format!("{key}={v}")))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut shared: Option<PreparedData> = None;
    for (value, c) in values.iter().zip(&configs) {
        // Data depends only on the data and synthetic sections.
        let data = match &shared {
            Some(d) if c.data == cfg.data && c.synthetic == cfg.synthetic => d.clone(),
            _ => prepare_data(c)?,
        };
        if c.data == cfg.data && c.synthetic == cfg.synthetic && shared.is_none() {
            shared = Some(data.clone());
        }
        let runs = seeds
            .iter()
            .map(|&seed| {
                let sub = dir.map(|d| d.join("runs").join(format!("{param}={value}-seed{seed}")));
                run_strategy(c, &data, strategy, seed, sub.as_deref())
            })
            .collect::<Result<Vec<_>>>()?;
        let tests: Vec<MetricReport> = runs.iter().map(|r| r.test.clone()).collect();
        rows.push(SweepRow {
            value: value.clone(),
            pretrain_steps: runs[0].pretrain_steps,
            aggregate: evaluation::aggregate_runs(&tests)?,
        });
    }
    let report = SweepReport {
        param: param.to_string(),
        key,
        strategy,
        rows,
    };
    if let Some(d) = dir {
        report::write_json(&d.join(REPORT_FILE), &report)?;
        let csv: Vec<MetricRow> = report
            .rows
            .iter()
            .map(|r| MetricRow::new(format!("{}={}", param, r.value), &r.aggregate))
            .collect();
        report::write_csv(&d.join("plots").join("sweep.csv"), &csv)?;
        let numeric: Option<Vec<(f64, f64)>> = report
            .rows
            .iter()
            .map(|r| r.value.parse::<f64>().ok().map(|x| (x, 100.0 * r.aggregate.aa)))
            .collect();
        if let Some(points) = numeric {
            std::fs::write(
                d.join("plots").join("sweep_aa.svg"),
                report::line_chart(
                    &format!("Sensitivity to {param}"),
                    param,
                    "AA (%)",
                    &[("AA".to_string(), points)],
                ),
            )?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationReport>,
}

/// Per-cube difficulty under every aggregation against per-cube masked and
/// jigsaw losses of `model` on fixed draws.
pub fn correlate(
    cfg: &RunConfig,
    model: &MultiTaskModel,
    cubes: &[DataCube],
    seed: u64,
) -> Result<CorrelationTable> {
    let pretext = cfg.pretext();
    let mim_only = LossWeights::new(0.0, 0.0, 1.0)?;
    let jps_only = LossWeights::new(1.0, 1.0, 0.0)?;
    let mim: Vec<f64> = training::per_cube_losses(model, cubes, &mim_only, &pretext, seed)?
        .iter()
        .map(|l| l.total)
        .collect();
    let jps: Vec<f64> = training::per_cube_losses(model, cubes, &jps_only, &pretext, seed)?
        .iter()
        .map(|l| l.total / 2.0)
        .collect();
    let mut rows = Vec::new();
    for agg in [Aggregation::Average, Aggregation::Maximum, Aggregation::Std] {
        let scores = cubes
            .iter()
            .map(|c| difficulty::difficulty(c, agg))
            .collect::<Result<Vec<_>>>()?;
        for (task, losses) in [(TaskKind::Mim, &mim), (TaskKind::Jps, &jps)] {
            rows.push(difficulty::correlate_difficulty_with_loss(&scores, losses, agg, task)?);
        }
    }
    Ok(CorrelationTable { rows })
}

/// Briefly trains a fresh multi-task model on `cubes` (plain order) for the
/// correlation analysis.
pub fn brief_model(cfg: &RunConfig, cubes: &[DataCube], bands: usize, epochs: usize, seed: u64) -> Result<MultiTaskModel> {
    let model = fresh_model(cfg, bands, seed)?;
    if epochs == 0 {
        return Ok(model);
    }
    let schedule = CurriculumSchedule::flat(cubes.len(), epochs)?;
    let tc = cfg.train_config(Strategy::Mtssl, seed);
    Ok(training::pretrain(model, cubes, &schedule, cfg.loss, &tc)?.0)
}

/// Model, normalization statistics and run configuration from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(MultiTaskModel, Option<BandStats>, Option<RunConfig>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.restore()?;
    let cfg = if ck.config.is_null() {
        None
    } else {
        Some(serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?)
    };
    Ok((model, ck.normalization, cfg))
}

/// Cubes of `split` under `cfg`, normalized with `stats`.
pub fn split_cubes(cfg: &RunConfig, split: Split, stats: &BandStats) -> Result<Vec<DataCube>> {
    let (labelled, _) = load_scenes(cfg)?;
    let cubes = tile_split(cfg, &labelled, split)?;
    data::normalize_all(&cubes, stats)
}
