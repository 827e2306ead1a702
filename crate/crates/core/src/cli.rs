//! The `cmtssl` command line.
//!
//! Every artifact-producing subcommand writes into a fresh directory (or
//! file) and refuses to touch an existing one unless `--force` is given.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::curriculum::CurriculumSchedule;
use crate::data::{self, DataCube, Split};
use crate::difficulty::{self, Aggregation, TaskKind};
use crate::evaluation::MetricReport;
use crate::experiment::{self, PreparedData, REPORT_FILE};
use crate::report;
use crate::synthetic;
use crate::training::Strategy;

#[derive(Debug, Parser)]
#[command(name = "cmtssl", version, about = "Curriculum multi-task self-supervised pretraining for hyperspectral cubes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration layered over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `curriculum.K=8`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Base seed; overrides the configuration.
    #[arg(long, env = "CMTSSL_SEED", global = true)]
    pub seed: Option<u64>,
    /// Replace an existing output directory or file.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled scene (plus unlabelled companions).
    Synth(SynthArgs),
    /// Difficulty score of every tile of the scenes in a directory.
    Score(ScoreArgs),
    /// Print the curriculum stage table and the matched step budget.
    Plan(PlanArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// OA / AA / Kappa of a checkpoint on one split.
    Eval(EvalArgs),
    /// Every strategy on every seed, with mean ± std metrics.
    Compare(CompareArgs),
    /// Pearson correlation between difficulty and pretext loss.
    Correlate(CorrelateArgs),
    /// Vary one hyperparameter while the others stay fixed.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    /// Side length of the square scene.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    /// Unlabelled scenes sharing the class prototypes.
    #[arg(long, default_value_t = 0)]
    pub extra: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Directory of scene containers; defaults to the configured scenes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "average")]
    pub aggregation: Aggregation,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Dataset size (number of cubes).
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub s: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub f: f64,
    /// Mini-batch size for the step budget.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint; a fresh encoder when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Labelled split to train on.
    #[arg(long, default_value = "train")]
    pub labels: Split,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub per_class: bool,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "scratch,mim,jps,mtssl,cmtssl")]
    pub strategies: Vec<Strategy>,
    /// Number of seeds, counting up from the base seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// `cube_id,score` CSV; with `--losses`, correlates the two files only.
    #[arg(long, requires = "losses")]
    pub scores: Option<PathBuf>,
    /// `cube_id,loss` CSV.
    #[arg(long, requires = "scores")]
    pub losses: Option<PathBuf>,
    #[arg(long, default_value = "average")]
    pub aggregation: Aggregation,
    #[arg(long, default_value = "mim")]
    pub task: TaskKind,
    /// Checkpoint whose losses are measured; otherwise a briefly trained model.
    #[arg(long, conflicts_with = "scores")]
    pub model: Option<PathBuf>,
    /// Epochs of the briefly trained model.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Parameter name (`S`, `K`, `F`, `alpha_spa`, ... or a dotted key).
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Score(a) => score(g, a),
        Command::Plan(a) => plan(g, a),
        Command::Pretrain(a) => pretrain(g, a),
        Command::Finetune(a) => finetune(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Compare(a) => compare(g, a),
        Command::Correlate(a) => correlate(g, a),
        Command::Sweep(a) => sweep(g, a),
    }
}

/// Defaults < `base` (or `--config`) < `--set` < `--seed`.
fn resolve_config(g: &GlobalArgs, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&g.config, base) {
        (None, Some(mut base)) => {
            for s in &g.sets {
                base = experiment::with_override(&base, s)?;
            }
            base
        }
        (file, _) => RunConfig::resolve(file.as_deref(), &g.sets)
            .with_context(|| "resolving the run configuration")?,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn claim_file(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn claim_dir(dir: &Path, cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    experiment::prepare_run_dir(dir, force)?;
    experiment::write_snapshot(dir, cfg)?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str, force: bool) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            claim_file(p, force)?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(g: &GlobalArgs, a: SynthArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(g, None)?;
    let mut spec = cfg.synthetic.clone();
    spec.seed = cfg.seed;
    if let Some(c) = a.classes {
        spec.num_classes = c;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(b) = a.bands {
        spec.bands = b;
    }
    experiment::prepare_run_dir(&a.out, g.force)?;
    let scenes = synthetic::generate_family(&spec, a.extra)?;
    for scene in &scenes {
        let meta = data::save_scene(scene, &a.out)?;
        println!("{}", meta.display());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    cube_id: String,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    cube_id: String,
    loss: f64,
}

/// Full-scene tiles normalized with their own per-band statistics.
fn scene_tiles(cfg: &RunConfig, input: Option<&Path>) -> anyhow::Result<Vec<DataCube>> {
    let scenes = match input {
        Some(dir) => data::list_scenes(dir)?
            .iter()
            .map(|p| data::load_scene(p, data::detect_format(p)))
            .collect::<crate::Result<Vec<_>>>()?,
        None => {
            let (mut labelled, extra) = experiment::load_scenes(cfg)?;
            labelled.extend(extra);
            labelled
        }
    };
    if scenes.is_empty() {
        bail!("no scenes found");
    }
    let mut tiles = Vec::new();
    for s in &scenes {
        tiles.extend(data::tile_full(s, cfg.data.tile_size, cfg.data.pretrain_stride)?);
    }
    let stats = data::fit_normalizer(&tiles)?;
    Ok(data::normalize_all(&tiles, &stats)?)
}

fn csv_text<R: Serialize>(rows: &[R]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn score(g: &GlobalArgs, a: ScoreArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(g, None)?;
    let tiles = scene_tiles(&cfg, a.input.as_deref())?;
    let scores = difficulty::score_cubes(&tiles, a.aggregation)?;
    let rows: Vec<ScoreRow> = scores
        .iter()
        .map(|s| ScoreRow {
            cube_id: tiles[s.cube_index].id(),
            score: s.value,
        })
        .collect();
    emit(a.out.as_deref(), &csv_text(&rows)?, g.force)
}

/// Stage table of a curriculum schedule.
pub fn plan_text(schedule: &CurriculumSchedule, batch: Option<usize>) -> String {
    let batches = schedule.batches();
    let mut out = String::from("stage  size  epochs\n");
    for b in &batches {
        let _ = writeln!(out, "{:>5}  {:>4}  {:>6}", b.index, b.size, b.epochs);
    }
    let sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
    let epochs: Vec<usize> = batches.iter().map(|b| b.epochs).collect();
    let _ = writeln!(out, "sizes {sizes:?}");
    let _ = writeln!(out, "epochs {epochs:?}");
    if let Some(b) = batch {
        let steps = schedule.match_budget(b);
        let flat = crate::curriculum::baseline_epochs(schedule.dataset_size, b, steps);
        let _ = writeln!(out, "optimizer steps {steps} (batch {b}); matched plain run: {flat} epochs");
    }
    out
}

fn plan(_g: &GlobalArgs, a: PlanArgs) -> anyhow::Result<()> {
    let schedule = CurriculumSchedule::new(a.n, a.s, a.k, a.f)?;
    print!("{}", plan_text(&schedule, a.batch));
    Ok(())
}

fn pretrain(g: &GlobalArgs, a: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_config(g, None)?;
    if let Some(s) = a.strategy {
        cfg.train.strategy = s;
    }
    if cfg.train.strategy == Strategy::Scratch {
        bail!("scratch has no pretraining stage; use `finetune` without --init");
    }
    claim_dir(&a.out, &cfg, g.force)?;
    let data = experiment::prepare_data(&cfg)?;
    let (_, log) = experiment::run_pretrain(&cfg, &data, cfg.train.strategy, cfg.seed, Some(&a.out))?;
    let summary = PretrainSummary {
        strategy: experiment::effective_strategy(&cfg, cfg.train.strategy),
        seed: cfg.seed,
        cubes: data.pretrain.len(),
        budget: experiment::plan_budget(&cfg, data.pretrain.len())?,
        optimizer_steps: log.optimizer_steps(),
        final_losses: log.steps.last().map(|s| s.total),
        wall_clock_secs: log.wall_clock_secs,
        checkpoints: log.stages.iter().filter_map(|s| s.checkpoint.clone()).collect(),
    };
    report::write_json(&a.out.join(REPORT_FILE), &summary)?;
    println!(
        "{} pretraining: {} steps over {} cubes in {:.1}s",
        summary.strategy, summary.optimizer_steps, summary.cubes, summary.wall_clock_secs
    );
    if let Some(last) = summary.checkpoints.last() {
        println!("last checkpoint: {}", last.display());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PretrainSummary {
    strategy: Strategy,
    seed: u64,
    cubes: usize,
    budget: experiment::BudgetPlan,
    optimizer_steps: usize,
    final_losses: Option<f64>,
    wall_clock_secs: f64,
    checkpoints: Vec<PathBuf>,
}

fn finetune(g: &GlobalArgs, a: FinetuneArgs) -> anyhow::Result<()> {
    let (init, base) = match &a.init {
        Some(p) => {
            let (model, stats, cfg) = experiment::load_checkpoint(p)
                .with_context(|| format!("loading {}", p.display()))?;
            (Some((model, stats)), cfg)
        }
        None => (None, None),
    };
    let mut cfg = resolve_config(g, base)?;
    if a.freeze_encoder {
        cfg.finetune.freeze_encoder = true;
    }
    claim_dir(&a.out, &cfg, g.force)?;
    let prepared = experiment::prepare_data(&cfg)?;
    let stats = init
        .as_ref()
        .and_then(|(_, s)| s.clone())
        .unwrap_or_else(|| prepared.stats.clone());
    let data = PreparedData {
        pretrain: Vec::new(),
        train: experiment::split_cubes(&cfg, a.labels, &stats)?,
        validation: experiment::split_cubes(&cfg, Split::Validation, &stats)?,
        test: Vec::new(),
        bands: stats.bands(),
        stats,
    };
    if data.train.is_empty() {
        bail!("split `{:?}` has no tiles", a.labels);
    }
    let model = match init {
        Some((m, _)) => m,
        None => experiment::fresh_model(&cfg, data.bands, cfg.seed)?,
    };
    let (model, log) = experiment::run_finetune(&cfg, &data, model, cfg.seed, Some(&a.out))?;
    let validation = if data.validation.is_empty() {
        None
    } else {
        Some(experiment::evaluate(&cfg, &model, &data.validation)?)
    };
    report::write_json(
        &a.out.join(REPORT_FILE),
        &serde_json::json!({
            "init": a.init,
            "seed": cfg.seed,
            "optimizer_steps": log.optimizer_steps(),
            "wall_clock_secs": log.wall_clock_secs,
            "validation": validation,
        }),
    )?;
    match validation {
        Some(v) => println!(
            "fine-tuned in {} steps; validation OA {:.2}% AA {:.2}% Kappa {:.2}%",
            log.optimizer_steps(),
            100.0 * v.oa,
            100.0 * v.aa,
            100.0 * v.kappa
        ),
        None => println!("fine-tuned in {} steps", log.optimizer_steps()),
    }
    println!("model: {}", a.out.join("ckpt").join("final").display());
    Ok(())
}

/// Report JSON, with the per-class vector only on request.
pub fn metric_json(report: &MetricReport, per_class: bool) -> anyhow::Result<String> {
    let mut value = serde_json::to_value(report)?;
    if !per_class {
        if let Some(obj) = value.as_object_mut() {
            obj.remove("per_class_accuracy");
        }
    }
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn eval(g: &GlobalArgs, a: EvalArgs) -> anyhow::Result<()> {
    let (model, stats, base) =
        experiment::load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let cfg = resolve_config(g, base)?;
    let stats = match stats {
        Some(s) => s,
        None => experiment::prepare_data(&cfg)?.stats,
    };
    let cubes = experiment::split_cubes(&cfg, a.split, &stats)?;
    if cubes.is_empty() {
        bail!("split `{:?}` has no tiles", a.split);
    }
    let r = experiment::evaluate(&cfg, &model, &cubes)?;
    eprint!("{}", report::metric_table(&[(format!("{:?}", a.split).to_lowercase(), &r)]));
    emit(a.out.as_deref(), &metric_json(&r, a.per_class)?, g.force)
}

fn compare(g: &GlobalArgs, a: CompareArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(g, None)?;
    if let Some(out) = &a.out {
        claim_dir(out, &cfg, g.force)?;
    }
    let data = experiment::prepare_data(&cfg)?;
    let seeds = experiment::seed_list(cfg.seed, a.seeds);
    let report = experiment::compare(&cfg, &data, &a.strategies, &seeds, a.out.as_deref())?;
    let b = &report.budget;
    println!(
        "pretraining budget: curriculum {} steps, plain {} epochs / {} steps",
        b.curriculum_steps, b.baseline_epochs, b.baseline_steps
    );
    print!("{}", report.table());
    Ok(())
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<R>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

fn correlate(g: &GlobalArgs, a: CorrelateArgs) -> anyhow::Result<()> {
    if let (Some(scores), Some(losses)) = (&a.scores, &a.losses) {
        let scores: Vec<ScoreRow> = read_csv(scores)?;
        let losses: HashMap<String, f64> = read_csv::<LossRow>(losses)?
            .into_iter()
            .map(|r| (r.cube_id, r.loss))
            .collect();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for s in &scores {
            match losses.get(&s.cube_id) {
                Some(&l) => {
                    x.push(s.score);
                    y.push(l);
                }
                None => log::warn!("no loss for cube {}", s.cube_id),
            }
        }
        let r = difficulty::correlate_difficulty_with_loss(&x, &y, a.aggregation, a.task)?;
        return emit(a.out.as_deref(), &(serde_json::to_string_pretty(&r)? + "\n"), g.force);
    }

    let (model, base) = match &a.model {
        Some(p) => {
            let (m, _, c) = experiment::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            (Some(m), c)
        }
        None => (None, None),
    };
    let cfg = resolve_config(g, base)?;
    if let Some(out) = &a.out {
        claim_dir(out, &cfg, g.force)?;
    }
    let data = experiment::prepare_data(&cfg)?;
    let model = match model {
        Some(m) => m,
        None => experiment::brief_model(&cfg, &data.pretrain, data.bands, a.epochs, cfg.seed)?,
    };
    let table = experiment::correlate(&cfg, &model, &data.pretrain, cfg.seed)?;
    for r in &table.rows {
        println!(
            "{:<8} {:<4} r = {:+.3} (n = {})",
            format!("{:?}", r.aggregation).to_lowercase(),
            format!("{:?}", r.task).to_lowercase(),
            r.pearson_r,
            r.sample_count
        );
    }
    if let Some(out) = &a.out {
        report::write_json(&out.join(REPORT_FILE), &table)?;
        let scores = difficulty::score_cubes(&data.pretrain, a.aggregation)?;
        let rows: Vec<ScoreRow> = scores
            .iter()
            .map(|s| ScoreRow {
                cube_id: data.pretrain[s.cube_index].id(),
                score: s.value,
            })
            .collect();
        std::fs::write(out.join("scores.csv"), csv_text(&rows)?)?;
    }
    Ok(())
}

fn sweep(g: &GlobalArgs, a: SweepArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(g, None)?;
    if let Some(out) = &a.out {
        claim_dir(out, &cfg, g.force)?;
    }
    let seeds = experiment::seed_list(cfg.seed, a.seeds);
    let report = experiment::sweep(&cfg, &a.param, &a.values, &seeds, a.out.as_deref())?;
    let rows: Vec<(String, &MetricReport)> = report
        .rows
        .iter()
        .map(|r| (format!("{}={}", a.param, r.value), &r.aggregate))
        .collect();
    print!("{}", report::metric_table(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn plan_example() {
        let s = CurriculumSchedule::new(100, 4, 10, 2.0).unwrap();
        let text = plan_text(&s, None);
        assert!(text.contains("sizes [25, 50, 75, 100]"));
        assert!(text.contains("epochs [10, 20, 40, 80]"));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let e = Cli::try_parse_from(["cmtssl", "plan", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
