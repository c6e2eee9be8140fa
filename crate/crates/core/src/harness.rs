//! Experiment configuration, builtin scenarios and the command implementations
//! behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_dataset, read_dataset, split_dataset, write_dataset, DatagenConfig, Dataset,
};
use crate::error::{Error, Result};
use crate::neural::TrainConfig;
use crate::planner::{
    closed_loop_run, Bounds, ClosedLoopLog, MpcConfig, Obstacle, Outcome, Scenario, StepStatus,
    TubeSpec,
};
use crate::rng;
use crate::sim::{TrackerParams, Vec2};
use crate::table::{cell, opt_cell, Table};
use crate::tube::{
    evaluate, history_sweep, load_model, save_model, train_tube_model, EvalMetrics, SweepConfig,
    SweepRow, TrainLog, TubeModel, TubeModelConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub n_envs: usize,
    pub refs_per_env: usize,
    /// Speed bound of the secondary dataset relative to the main one; `0` skips it.
    pub small_v_bar_factor: f64,
    pub config: DatagenConfig,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            n_envs: 512,
            refs_per_env: 4,
            small_v_bar_factor: 0.2,
            config: DatagenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub tube: TubeModelConfig,
    pub train: TrainConfig,
    pub holdout_frac: f64,
    pub split_seed: u64,
    pub eval_stride: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            tube: TubeModelConfig::default(),
            train: TrainConfig::default(),
            holdout_frac: 0.2,
            split_seed: 7,
            eval_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// `empty`, `narrow_gap`, `corridor`, `clutter`, or ignored when `file` is set.
    pub name: String,
    pub file: Option<PathBuf>,
    /// Explicit gap width; otherwise `2 * gap_factor * w_large`.
    pub gap: Option<f64>,
    pub gap_factor: f64,
    pub obstacle_radius: f64,
    pub clutter_obstacles: usize,
    pub goal_tolerance: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: "narrow_gap".into(),
            file: None,
            gap: None,
            gap_factor: 0.8,
            obstacle_radius: 1.2,
            clutter_obstacles: 6,
            goal_tolerance: 0.05,
        }
    }
}

/// Tube variant of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTube {
    None,
    /// Fixed radius from the main dataset at full speed.
    FixedLarge,
    /// Fixed radius from the secondary dataset, planned at the reduced speed.
    FixedSmall,
    Dynamic,
}

impl RunTube {
    pub fn as_str(self) -> &'static str {
        match self {
            RunTube::None => "none",
            RunTube::FixedLarge => "fixed_large",
            RunTube::FixedSmall => "fixed_small",
            RunTube::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for RunTube {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => RunTube::None,
            "fixed_large" => RunTube::FixedLarge,
            "fixed_small" => RunTube::FixedSmall,
            "dynamic" => RunTube::Dynamic,
            other => return Err(Error::invalid(format!("unknown tube variant {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub tube: RunTube,
    /// Overrides the dataset quantile for fixed variants.
    pub fixed_radius: Option<f64>,
    pub model_dir: Option<PathBuf>,
    pub max_steps: usize,
    /// Closed-loop seeds per variant in `compare`, counted up from the experiment seed.
    pub seeds: usize,
    pub compare: Vec<RunTube>,
    pub tracker: TrackerParams,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            tube: RunTube::Dynamic,
            fixed_radius: None,
            model_dir: None,
            max_steps: 1500,
            seeds: 20,
            compare: vec![RunTube::FixedLarge, RunTube::FixedSmall, RunTube::Dynamic],
            tracker: TrackerParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for parallel stages; `0` uses every core.
    pub workers: usize,
    pub datagen: DatagenSection,
    pub training: TrainingSection,
    pub sweep: SweepConfig,
    pub mpc: MpcConfig,
    pub scenario: ScenarioSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 0,
            datagen: DatagenSection::default(),
            training: TrainingSection::default(),
            sweep: SweepConfig::default(),
            mpc: MpcConfig::default(),
            scenario: ScenarioSection::default(),
            run: RunSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.scenario.file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.run.model_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.datagen;
        if d.n_envs == 0 || d.refs_per_env == 0 {
            return Err(Error::invalid(
                "datagen.n_envs and datagen.refs_per_env must be >= 1",
            ));
        }
        if !(0.0..=1.0).contains(&d.small_v_bar_factor) {
            return Err(Error::invalid(
                "datagen.small_v_bar_factor must lie in [0, 1]",
            ));
        }
        d.config.validate()?;
        let t = &self.training;
        t.tube.validate()?;
        t.train.validate()?;
        if t.train.alpha != t.tube.alpha {
            return Err(Error::invalid(format!(
                "training.train.alpha = {} differs from training.tube.alpha = {}",
                t.train.alpha, t.tube.alpha
            )));
        }
        if !(t.holdout_frac > 0.0 && t.holdout_frac < 1.0) || t.eval_stride == 0 {
            return Err(Error::invalid(
                "training.holdout_frac must lie in (0, 1) and eval_stride >= 1",
            ));
        }
        self.mpc.validate()?;
        if self.mpc.horizon != t.tube.horizon {
            return Err(Error::invalid(format!(
                "mpc.horizon = {} differs from training.tube.horizon = {}",
                self.mpc.horizon, t.tube.horizon
            )));
        }
        if (self.mpc.dt - d.config.dt).abs() > 1e-12 {
            return Err(Error::invalid("mpc.dt differs from datagen.config.dt"));
        }
        let s = &self.scenario;
        if !(s.gap_factor > 0.0 && s.obstacle_radius > 0.0 && s.goal_tolerance > 0.0) {
            return Err(Error::invalid(
                "scenario gap_factor, obstacle_radius and goal_tolerance must be > 0",
            ));
        }
        if let Some(g) = s.gap {
            if !(g > 0.0) {
                return Err(Error::invalid("scenario.gap must be > 0"));
            }
        }
        if self.run.max_steps == 0 || self.run.seeds == 0 {
            return Err(Error::invalid("run.max_steps and run.seeds must be >= 1"));
        }
        if let Some(w) = self.run.fixed_radius {
            if !(w >= 0.0) {
                return Err(Error::invalid("run.fixed_radius must be >= 0"));
            }
        }
        self.run.tracker.validate(self.mpc.dt)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }

    pub fn small_dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset_small")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.run
            .model_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model"))
    }

    pub fn v_bar(&self) -> f64 {
        self.datagen.config.reference.v_bar
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
    }

    fn workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            self.workers
        }
    }
}

/// Process exit status for an error: 2 validation, 3 IO, 4 solver failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::Solver(_) => 4,
        _ => 2,
    }
}

/// Exit status for a finished run whose solver failed on most steps.
pub const EXIT_SOLVER_DOMINATED: i32 = 4;

// ---------------------------------------------------------------------------
// scenarios

fn world_bounds() -> Bounds {
    Bounds {
        min: Vec2::new(-2.0, -1.0),
        max: Vec2::new(2.0, 1.0),
    }
}

/// Two discs leaving a gap of `gap` on the straight line between start and goal.
pub fn narrow_gap(gap: f64, radius: f64, v_bar: f64, goal_tolerance: f64) -> Scenario {
    let c = radius + gap / 2.0;
    Scenario {
        name: "narrow_gap".into(),
        obstacles: vec![
            Obstacle::new(0.0, c, radius),
            Obstacle::new(0.0, -c, radius),
        ],
        start: Vec2::new(-1.5, 0.0),
        goal: Vec2::new(1.5, 0.0),
        v_bar,
        goal_tolerance,
        bounds: world_bounds(),
    }
}

pub fn empty_world(v_bar: f64, goal_tolerance: f64) -> Scenario {
    Scenario {
        name: "empty".into(),
        obstacles: vec![],
        start: Vec2::new(-1.5, 0.0),
        goal: Vec2::new(1.5, 0.0),
        v_bar,
        goal_tolerance,
        bounds: world_bounds(),
    }
}

/// Two gaps offset from each other so the path has to jog sideways.
pub fn corridor(gap: f64, v_bar: f64, goal_tolerance: f64) -> Scenario {
    let r = 0.5;
    let mut obstacles = Vec::new();
    for (x, y) in [(-0.6, 0.15), (0.6, -0.15)] {
        obstacles.push(Obstacle::new(x, y + r + gap / 2.0, r));
        obstacles.push(Obstacle::new(x, y - r - gap / 2.0, r));
    }
    Scenario {
        name: "corridor".into(),
        obstacles,
        start: Vec2::new(-1.5, 0.0),
        goal: Vec2::new(1.5, 0.0),
        v_bar,
        goal_tolerance,
        bounds: world_bounds(),
    }
}

/// Seeded random discs that keep clear of the start and goal.
pub fn clutter(count: usize, seed: u64, v_bar: f64, goal_tolerance: f64) -> Scenario {
    let mut r = rng::stream(seed, &[0x636c7574]);
    let start = Vec2::new(-1.5, 0.0);
    let goal = Vec2::new(1.5, 0.0);
    let mut obstacles: Vec<Obstacle> = Vec::new();
    let mut attempts = 0;
    while obstacles.len() < count && attempts < 1000 {
        attempts += 1;
        let o = Obstacle::new(
            r.gen_range(-1.0..1.0),
            r.gen_range(-0.8..0.8),
            r.gen_range(0.1..0.25),
        );
        let clear_ends = o.clearance(&start) > 0.3 && o.clearance(&goal) > 0.3;
        let apart = obstacles
            .iter()
            .all(|p| (p.center - o.center).norm() > p.radius + o.radius + 0.15);
        if clear_ends && apart {
            obstacles.push(o);
        }
    }
    Scenario {
        name: "clutter".into(),
        obstacles,
        start,
        goal,
        v_bar,
        goal_tolerance,
        bounds: world_bounds(),
    }
}

/// Resolves the configured scenario. `w_large` sizes gaps when no explicit
/// width is configured.
pub fn resolve_scenario(
    cfg: &ExperimentConfig,
    v_bar: f64,
    w_large: Option<f64>,
) -> Result<Scenario> {
    let s = &cfg.scenario;
    let mut scenario = if let Some(file) = &s.file {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        Scenario::from_toml(&text)?
    } else {
        let gap = || {
            s.gap
                .or(w_large.map(|w| 2.0 * s.gap_factor * w))
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "scenario {:?} needs scenario.gap or a dataset to size its gap",
                        s.name
                    ))
                })
        };
        match s.name.as_str() {
            "empty" => empty_world(v_bar, s.goal_tolerance),
            "narrow_gap" => narrow_gap(gap()?, s.obstacle_radius, v_bar, s.goal_tolerance),
            "corridor" => corridor(gap()?, v_bar, s.goal_tolerance),
            "clutter" => clutter(s.clutter_obstacles, cfg.seed, v_bar, s.goal_tolerance),
            other => {
                return Err(Error::invalid(format!(
                    "unknown builtin scenario {other:?}"
                )))
            }
        }
    };
    scenario.v_bar = v_bar;
    scenario.validate()?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// datagen

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub name: String,
    pub v_bar: f64,
    pub records: usize,
    pub failures: usize,
    pub substeps: u64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub hash: String,
    pub seconds: f64,
}

impl DatasetSummary {
    pub fn substeps_per_second(&self) -> f64 {
        self.substeps as f64 / self.seconds.max(1e-12)
    }
}

fn generate_one(
    cfg: &ExperimentConfig,
    name: &str,
    dcfg: &DatagenConfig,
    seed: u64,
    dir: &Path,
) -> Result<DatasetSummary> {
    let started = Instant::now();
    let report = generate_dataset(
        cfg.datagen.n_envs,
        cfg.datagen.refs_per_env,
        dcfg,
        seed,
        cfg.workers(),
    )?;
    let seconds = started.elapsed().as_secs_f64();
    write_dataset(&report.dataset, dir)?;
    let d = &report.dataset;
    Ok(DatasetSummary {
        name: name.into(),
        v_bar: dcfg.reference.v_bar,
        records: d.len(),
        failures: report.failures.len(),
        substeps: report.substeps,
        q50: d.error_quantile(0.5)?,
        q90: d.error_quantile(0.9)?,
        q99: d.error_quantile(0.99)?,
        hash: d.content_hash(),
        seconds,
    })
}

/// Generates the main dataset and, unless disabled, the reduced-speed one.
pub fn cmd_datagen(cfg: &ExperimentConfig) -> Result<Vec<DatasetSummary>> {
    cfg.validate()?;
    let mut out = vec![generate_one(
        cfg,
        "main",
        &cfg.datagen.config,
        cfg.seed,
        &cfg.dataset_dir(),
    )?];
    if cfg.datagen.small_v_bar_factor > 0.0 {
        let small = cfg
            .datagen
            .config
            .with_v_bar(cfg.v_bar() * cfg.datagen.small_v_bar_factor);
        out.push(generate_one(
            cfg,
            "small",
            &small,
            rng::derive_seed(cfg.seed, &[1]),
            &cfg.small_dataset_dir(),
        )?);
    }
    let mut summary = Table::new([
        "dataset", "v_bar", "records", "failures", "substeps", "q50", "q90", "q99", "hash",
    ]);
    let mut timing = Table::new(["dataset", "seconds", "substeps_per_second", "workers"]);
    for s in &out {
        summary.push(vec![
            cell(&s.name),
            cell(s.v_bar),
            cell(s.records),
            cell(s.failures),
            cell(s.substeps),
            cell(s.q50),
            cell(s.q90),
            cell(s.q99),
            cell(&s.hash),
        ])?;
        timing.push(vec![
            cell(&s.name),
            cell(s.seconds),
            cell(s.substeps_per_second()),
            cell(cfg.workers()),
        ])?;
    }
    summary.write(&cfg.output_dir.join("datagen_summary.csv"))?;
    timing.write(&cfg.output_dir.join("datagen_timing.csv"))?;
    Ok(out)
}

fn load_main_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    read_dataset(&cfg.dataset_dir())
}

// ---------------------------------------------------------------------------
// training and sweep

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TubeModel,
    pub log: TrainLog,
    pub holdout: EvalMetrics,
    /// Metrics of the checkpoint read back from disk.
    pub reloaded: EvalMetrics,
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        ..cfg.training.train.clone()
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_main_dataset(cfg)?;
    let t = &cfg.training;
    let (train, hold) = split_dataset(&data, t.holdout_frac, t.split_seed)?;
    let (model, log) = cfg
        .pool()?
        .install(|| train_tube_model(&train, &t.tube, &train_config(cfg)))?;
    let k_min = t.tube.history;
    let holdout = evaluate(&model, &hold, t.eval_stride, k_min)?;
    let dir = cfg.model_dir();
    save_model(&model, &dir)?;
    let reloaded = evaluate(&load_model(&dir)?, &hold, t.eval_stride, k_min)?;

    let mut curve = Table::new(["epoch", "mean_loss", "learning_rate"]);
    for e in &log.epochs {
        curve.push(vec![
            cell(e.epoch),
            cell(e.mean_loss),
            cell(e.learning_rate),
        ])?;
    }
    curve.write(&cfg.output_dir.join("train_curve.csv"))?;
    let mut metrics = Table::new([
        "history",
        "mode",
        "alpha",
        "correctness",
        "per_trajectory_correctness",
        "mec",
        "points",
    ]);
    metrics.push(vec![
        cell(t.tube.history),
        cell(t.tube.mode.as_str()),
        cell(t.tube.alpha),
        cell(holdout.correctness),
        cell(holdout.per_trajectory_correctness),
        cell(holdout.mec),
        cell(holdout.points),
    ])?;
    metrics.write(&cfg.output_dir.join("train_metrics.csv"))?;
    Ok(TrainReport {
        model,
        log,
        holdout,
        reloaded,
    })
}

pub fn sweep_table(rows: &[SweepRow]) -> Result<Table> {
    let mut t = Table::new([
        "history",
        "mode",
        "correctness",
        "per_trajectory_correctness",
        "mec",
    ]);
    for r in rows {
        t.push(vec![
            cell(r.history),
            cell(r.mode.as_str()),
            cell(r.correctness),
            cell(r.per_trajectory_correctness),
            cell(r.mec),
        ])?;
    }
    Ok(t)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = load_main_dataset(cfg)?;
    let results = cfg
        .pool()?
        .install(|| history_sweep(&data, &cfg.training.tube, &train_config(cfg), &cfg.sweep))?;
    let rows: Vec<SweepRow> = results.into_iter().map(|(r, _)| r).collect();
    sweep_table(&rows)?.write(&cfg.output_dir.join("sweep.csv"))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// closed-loop runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub tube: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub steps_to_goal: Option<usize>,
    /// Smallest tracker clearance; `None` without obstacles.
    pub min_clearance: Option<f64>,
    pub tube_correctness: Option<f64>,
    pub infeasible_steps: usize,
    pub failed_steps: usize,
    pub mean_solve_ms: f64,
    pub p95_solve_ms: f64,
    pub max_solve_ms: f64,
}

impl RunSummary {
    pub fn from_log(log: &ClosedLoopLog, scenario: &Scenario, tube: &str) -> Self {
        let mut times: Vec<f64> = log.solve_times().iter().map(|t| t * 1e3).collect();
        times.sort_by(f64::total_cmp);
        let mean = if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        };
        let p95 = if times.is_empty() {
            0.0
        } else {
            times[((0.95 * times.len() as f64).ceil() as usize).clamp(1, times.len()) - 1]
        };
        Self {
            scenario: scenario.name.clone(),
            tube: tube.into(),
            seed: log.seed,
            outcome: log.outcome,
            steps: log.applied_steps(),
            steps_to_goal: log.steps_to_goal(),
            min_clearance: (!scenario.obstacles.is_empty()).then(|| log.min_clearance(scenario)),
            tube_correctness: log.tube_correctness(),
            infeasible_steps: log
                .steps
                .iter()
                .filter(|s| s.status == StepStatus::Infeasible)
                .count(),
            failed_steps: log.failed_solves(),
            mean_solve_ms: mean,
            p95_solve_ms: p95,
            max_solve_ms: times.last().copied().unwrap_or(0.0),
        }
    }

    pub fn solver_dominated(&self) -> bool {
        self.steps > 0 && 2 * self.failed_steps > self.steps
    }
}

const SUMMARY_COLUMNS: [&str; 10] = [
    "scenario",
    "tube",
    "seed",
    "outcome",
    "steps",
    "steps_to_goal",
    "min_clearance",
    "tube_correctness",
    "infeasible_steps",
    "failed_steps",
];

/// Deterministic part of the summaries; timings go to [`timing_table`].
pub fn summary_table(rows: &[RunSummary]) -> Result<Table> {
    let mut t = Table::new(SUMMARY_COLUMNS);
    for r in rows {
        t.push(vec![
            cell(&r.scenario),
            cell(&r.tube),
            cell(r.seed),
            cell(r.outcome.as_str()),
            cell(r.steps),
            opt_cell(r.steps_to_goal),
            opt_cell(r.min_clearance),
            opt_cell(r.tube_correctness),
            cell(r.infeasible_steps),
            cell(r.failed_steps),
        ])?;
    }
    Ok(t)
}

pub fn timing_table(rows: &[RunSummary]) -> Result<Table> {
    let mut t = Table::new([
        "scenario",
        "tube",
        "seed",
        "mean_solve_ms",
        "p95_solve_ms",
        "max_solve_ms",
    ]);
    for r in rows {
        t.push(vec![
            cell(&r.scenario),
            cell(&r.tube),
            cell(r.seed),
            cell(r.mean_solve_ms),
            cell(r.p95_solve_ms),
            cell(r.max_solve_ms),
        ])?;
    }
    Ok(t)
}

/// Parses the deterministic summary columns back (timings read as zero).
pub fn parse_summary_table(t: &Table) -> Result<Vec<RunSummary>> {
    let opt = |i: usize, c: &str| -> Result<Option<String>> {
        let v = t.get(i, c)?;
        Ok((!v.is_empty()).then(|| v.to_string()))
    };
    let num = |s: String| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("{s:?} is not a number")))
    };
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{s:?} is not a count")))
    };
    (0..t.len())
        .map(|i| {
            Ok(RunSummary {
                scenario: t.get(i, "scenario")?.into(),
                tube: t.get(i, "tube")?.into(),
                seed: t
                    .get(i, "seed")?
                    .parse()
                    .map_err(|_| Error::Format("bad seed".into()))?,
                outcome: t.get(i, "outcome")?.parse()?,
                steps: int(t.get(i, "steps")?)?,
                steps_to_goal: opt(i, "steps_to_goal")?.map(|s| int(&s)).transpose()?,
                min_clearance: opt(i, "min_clearance")?.map(num).transpose()?,
                tube_correctness: opt(i, "tube_correctness")?.map(num).transpose()?,
                infeasible_steps: int(t.get(i, "infeasible_steps")?)?,
                failed_steps: int(t.get(i, "failed_steps")?)?,
                mean_solve_ms: 0.0,
                p95_solve_ms: 0.0,
                max_solve_ms: 0.0,
            })
        })
        .collect()
}

/// Per-step series of a run: states, speeds and the one-step tube radius.
pub fn steps_table(log: &ClosedLoopLog) -> Result<Table> {
    let mut t = Table::new([
        "k", "z_x", "z_y", "p_x", "p_y", "e", "v_x", "v_y", "speed", "w1", "status",
    ]);
    for s in &log.steps {
        t.push(vec![
            cell(s.k),
            cell(s.z.x),
            cell(s.z.y),
            cell(s.p.x),
            cell(s.p.y),
            cell(s.e),
            cell(s.v.x),
            cell(s.v.y),
            cell(s.v.norm()),
            opt_cell(s.w.get(1)),
            cell(s.status.as_str()),
        ])?;
    }
    Ok(t)
}

/// Every planned trajectory with its tube radii.
pub fn plans_table(log: &ClosedLoopLog) -> Result<Table> {
    let mut t = Table::new(["k", "j", "z_x", "z_y", "w"]);
    for s in &log.steps {
        for (j, (z, w)) in s.plan_z.iter().zip(&s.w).enumerate() {
            t.push(vec![cell(s.k), cell(j), cell(z.x), cell(z.y), cell(w)])?;
        }
    }
    Ok(t)
}

/// Shared inputs of closed-loop runs: tube radii, model and geometry.
pub struct RunContext {
    pub w_large: Option<f64>,
    pub w_small: Option<f64>,
    pub model: Option<Arc<TubeModel>>,
    pub scenario: Scenario,
}

impl RunContext {
    pub fn prepare(cfg: &ExperimentConfig, variants: &[RunTube]) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.scenario;
        let sized_by_data = s.file.is_none()
            && s.gap.is_none()
            && matches!(s.name.as_str(), "narrow_gap" | "corridor");
        let override_radius = cfg.run.fixed_radius.is_some();
        let w_large =
            if sized_by_data || (variants.contains(&RunTube::FixedLarge) && !override_radius) {
                Some(load_main_dataset(cfg)?.error_quantile(0.9)?)
            } else {
                None
            };
        let w_small = if variants.contains(&RunTube::FixedSmall) && !override_radius {
            Some(read_dataset(&cfg.small_dataset_dir())?.error_quantile(0.9)?)
        } else {
            None
        };
        let model = if variants.contains(&RunTube::Dynamic) {
            Some(Arc::new(load_model(&cfg.model_dir())?))
        } else {
            None
        };
        let scenario = resolve_scenario(cfg, cfg.v_bar(), w_large)?;
        Ok(Self {
            w_large,
            w_small,
            model,
            scenario,
        })
    }

    /// Scenario and MPC settings of one variant.
    pub fn variant(&self, cfg: &ExperimentConfig, tube: RunTube) -> Result<(Scenario, MpcConfig)> {
        let mut scenario = self.scenario.clone();
        let spec = match tube {
            RunTube::None => TubeSpec::None,
            RunTube::FixedLarge => TubeSpec::Fixed(
                cfg.run
                    .fixed_radius
                    .or(self.w_large)
                    .ok_or_else(|| Error::invalid("fixed_large needs a radius"))?,
            ),
            RunTube::FixedSmall => {
                if cfg.datagen.small_v_bar_factor <= 0.0 {
                    return Err(Error::invalid(
                        "fixed_small needs datagen.small_v_bar_factor > 0",
                    ));
                }
                scenario.v_bar = cfg.v_bar() * cfg.datagen.small_v_bar_factor;
                TubeSpec::Fixed(
                    cfg.run
                        .fixed_radius
                        .or(self.w_small)
                        .ok_or_else(|| Error::invalid("fixed_small needs a radius"))?,
                )
            }
            RunTube::Dynamic => TubeSpec::Dynamic(
                self.model
                    .clone()
                    .ok_or_else(|| Error::invalid("dynamic tube needs a model"))?,
            ),
        };
        let mpc = MpcConfig {
            tube: spec,
            ..cfg.mpc.clone()
        };
        Ok((scenario, mpc))
    }

    pub fn run(
        &self,
        cfg: &ExperimentConfig,
        tube: RunTube,
        seed: u64,
    ) -> Result<(ClosedLoopLog, RunSummary)> {
        let (scenario, mpc) = self.variant(cfg, tube)?;
        let log = closed_loop_run(&scenario, &mpc, &cfg.run.tracker, seed, cfg.run.max_steps)?;
        let summary = RunSummary::from_log(&log, &scenario, tube.as_str());
        Ok((log, summary))
    }
}

/// One closed-loop run of `run.tube` with the experiment seed.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(ClosedLoopLog, RunSummary)> {
    let ctx = RunContext::prepare(cfg, &[cfg.run.tube])?;
    let (log, summary) = ctx.run(cfg, cfg.run.tube, cfg.seed)?;
    let dir = cfg.output_dir.join("runs").join(format!(
        "{}_{}_{}",
        summary.scenario, summary.tube, summary.seed
    ));
    steps_table(&log)?.write(&dir.join("steps.csv"))?;
    plans_table(&log)?.write(&dir.join("plans.csv"))?;
    summary_table(std::slice::from_ref(&summary))?.write(&dir.join("summary.csv"))?;
    timing_table(std::slice::from_ref(&summary))?.write(&dir.join("timing.csv"))?;
    Ok((log, summary))
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<RunSummary>,
    /// Mean steps to goal of `dynamic` over `fixed_small`, over seeds where both reached.
    pub completion_ratio: Option<f64>,
}

impl CompareReport {
    pub fn rows_for(&self, tube: RunTube) -> impl Iterator<Item = &RunSummary> + '_ {
        self.rows.iter().filter(move |r| r.tube == tube.as_str())
    }

    fn mean_steps(&self, tube: RunTube) -> Option<f64> {
        let v: Vec<f64> = self
            .rows_for(tube)
            .filter_map(|r| r.steps_to_goal)
            .map(|s| s as f64)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Every variant of `run.compare` over `run.seeds` seeds.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let variants = cfg.run.compare.clone();
    if variants.is_empty() {
        return Err(Error::invalid("run.compare lists no tube variants"));
    }
    let ctx = RunContext::prepare(cfg, &variants)?;
    let jobs: Vec<(RunTube, u64)> = variants
        .iter()
        .flat_map(|&t| (0..cfg.run.seeds as u64).map(move |s| (t, cfg.seed + s)))
        .collect();
    let rows: Vec<RunSummary> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(t, s)| ctx.run(cfg, t, s).map(|(_, summary)| summary))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut report = CompareReport {
        rows,
        completion_ratio: None,
    };
    report.completion_ratio = match (
        report.mean_steps(RunTube::Dynamic),
        report.mean_steps(RunTube::FixedSmall),
    ) {
        (Some(d), Some(s)) => Some(d / s),
        _ => None,
    };
    summary_table(&report.rows)?.write(&cfg.output_dir.join("compare.csv"))?;
    timing_table(&report.rows)?.write(&cfg.output_dir.join("compare_timing.csv"))?;
    let mut agg = Table::new([
        "tube",
        "runs",
        "reached",
        "collisions",
        "mean_steps_to_goal",
    ]);
    for &t in &variants {
        let rows: Vec<&RunSummary> = report.rows_for(t).collect();
        agg.push(vec![
            cell(t.as_str()),
            cell(rows.len()),
            cell(
                rows.iter()
                    .filter(|r| r.outcome == Outcome::Reached)
                    .count(),
            ),
            cell(
                rows.iter()
                    .filter(|r| r.outcome == Outcome::Collision)
                    .count(),
            ),
            opt_cell(report.mean_steps(t)),
        ])?;
    }
    agg.write(&cfg.output_dir.join("compare_aggregate.csv"))?;
    Ok(report)
}
