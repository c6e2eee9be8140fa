//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use tubempc::datagen::Dataset;
use tubempc::harness::{self, ExperimentConfig, RunContext, RunTube};
use tubempc::neural::{quantile_loss, FeedbackGradient, Mlp, Standardizer, TrainConfig};
use tubempc::planner::qp::solve_qp;
use tubempc::planner::{
    rollout_plan, solve_nominal, ClosedLoopLog, MpcConfig, Outcome, Scenario, StepStatus,
};
use tubempc::rng;
use tubempc::sim::Vec2;
use tubempc::tube::{
    batch_loss, batch_loss_grad, history_sweep, save_model, SweepRow, TubeMode, TubeModel,
    TubeModelConfig, TubeWindow,
};

struct Outcomes {
    failed: Vec<String>,
}

impl Outcomes {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn seconds(t: Instant) -> String {
    format!("{:.1}s", t.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1: quantile loss

fn quantile_oracle(out: &mut Outcomes) {
    let t = Instant::now();
    let mut r = rng::stream(101, &[]);
    let gamma = Gamma::new(2.0, 0.03).unwrap();
    let e: Vec<f64> = (0..1000).map(|_| gamma.sample(&mut r)).collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let top = sorted[sorted.len() - 1];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for alpha in [0.5, 0.9] {
        let target = sorted[(alpha * e.len() as f64).ceil() as usize - 1];
        let best = (0..=4000)
            .map(|i| top * i as f64 / 4000.0)
            .map(|c| (c, quantile_loss(&vec![c; e.len()], &e, alpha, 1.0).unwrap()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        worst = worst.max((best - target).abs());
        parts.push(format!(
            "alpha={alpha}: minimizer {best:.4} quantile {target:.4}"
        ));
    }
    let pass = worst <= 0.02 && t.elapsed().as_secs() < 60;
    out.record(
        "1 quantile oracle",
        pass,
        format!(
            "{}; max gap {worst:.4} (tol 0.02), {}",
            parts.join(", "),
            seconds(t)
        ),
    );
}

// ---------------------------------------------------------------------------
// 2: training-loss gradients

fn windows_from(
    data: &Dataset,
    h: usize,
    n: usize,
    count: usize,
    r: &mut impl Rng,
) -> Vec<TubeWindow> {
    (0..count)
        .map(|_| {
            let rec = &data.records[r.gen_range(0..data.len())];
            let k = r.gen_range(h..=rec.steps() - n);
            TubeWindow::from_record(rec, &rec.errors(), k, h, n).unwrap()
        })
        .collect()
}

/// Worst relative error of the analytic loss gradient against central differences.
fn loss_gradient_error(model: &TubeModel, wins: &[TubeWindow]) -> f64 {
    let (_, g) = batch_loss_grad(model, wins, 1.0, FeedbackGradient::Stop).unwrap();
    // fed-back predictions are constants under the stop-gradient rule
    let frozen: Vec<Vec<f64>> = model
        .predict_windows(wins)
        .unwrap()
        .into_iter()
        .map(|w| w[1..].to_vec())
        .collect();
    let frozen = (model.cfg().mode == TubeMode::Recursive).then_some(frozen);
    let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..model.net().num_params() {
        let mut p = model.clone();
        p.net_mut().params_mut()[i] += h;
        let mut q = model.clone();
        q.net_mut().params_mut()[i] -= h;
        let fd = (batch_loss(&p, wins, 1.0, frozen.as_deref()).unwrap()
            - batch_loss(&q, wins, 1.0, frozen.as_deref()).unwrap())
            / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3 * scale);
        worst = worst.max(rel);
    }
    worst
}

fn gradient_fidelity(out: &mut Outcomes, data: &Dataset) {
    let t = Instant::now();
    let mut r = rng::stream(202, &[]);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let mode = if i % 2 == 0 {
            TubeMode::Recursive
        } else {
            TubeMode::OneShot
        };
        let cfg = TubeModelConfig {
            history: 4,
            horizon: 6,
            mode,
            ..TubeModelConfig::default()
        };
        let sizes = [cfg.feature_dim(), 12, 12, cfg.output_dim()];
        let net = Mlp::random(&sizes, 5.0, &mut r).unwrap();
        let model = TubeModel::from_parts(
            cfg.clone(),
            net,
            Standardizer::identity(cfg.feature_dim()),
            0.05,
        )
        .unwrap();
        let wins = windows_from(data, 4, 6, 6, &mut r);
        worst = worst.max(loss_gradient_error(&model, &wins));
    }
    let pass = worst < 1e-4 && t.elapsed().as_secs() < 300;
    out.record(
        "2 gradient fidelity",
        pass,
        format!(
            "10 models, max relative error {worst:.2e} (tol 1e-4), {}",
            seconds(t)
        ),
    );
}

// ---------------------------------------------------------------------------
// 3, 4: calibration and history trend

fn calibration(out: &mut Outcomes, rows: &[SweepRow], records: usize) {
    let row = rows
        .iter()
        .find(|r| r.history == 25)
        .expect("H=25 in sweep");
    out.record(
        "3 calibration",
        records >= 2048 && row.correctness >= 0.87,
        format!(
            "{records} records, H=25 alpha=0.9 holdout correctness {:.4} (min 0.87), per-trajectory {:.4}",
            row.correctness, row.per_trajectory_correctness
        ),
    );
}

fn history_trend(out: &mut Outcomes, rows: &[SweepRow]) {
    let mut rows: Vec<&SweepRow> = rows.iter().collect();
    rows.sort_by_key(|r| r.history);
    let mec: Vec<f64> = rows.iter().map(|r| r.mec).collect();
    let reduction = 1.0 - mec[mec.len() - 1] / mec[0];
    let monotone = mec.windows(2).all(|p| p[1] <= 1.05 * p[0]);
    let listing: Vec<String> = rows
        .iter()
        .map(|r| format!("H={} {:.5}", r.history, r.mec))
        .collect();
    out.record(
        "4 history trend",
        reduction >= 0.2 && monotone,
        format!(
            "recursive MEC {}; H=25 vs H=1 reduction {:.1}% (min 20%), non-increasing within 5%: {monotone}",
            listing.join(", "),
            100.0 * reduction
        ),
    );
}

// ---------------------------------------------------------------------------
// 5, 6, 8: closed loop

struct Episode {
    log: ClosedLoopLog,
    scenario: Scenario,
}

fn episodes(ctx: &RunContext, cfg: &ExperimentConfig, tube: RunTube, seeds: u64) -> Vec<Episode> {
    (0..seeds)
        .map(|s| {
            let (scenario, _) = ctx.variant(cfg, tube).unwrap();
            let (log, _) = ctx.run(cfg, tube, s).unwrap();
            Episode { log, scenario }
        })
        .collect()
}

fn mean_steps(eps: &[Episode]) -> Option<f64> {
    let v: Vec<f64> = eps
        .iter()
        .filter_map(|e| e.log.steps_to_goal())
        .map(|s| s as f64)
        .collect();
    (v.len() == eps.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn outcome_counts(eps: &[Episode]) -> String {
    let mut parts = Vec::new();
    for o in [
        Outcome::Reached,
        Outcome::Timeout,
        Outcome::Collision,
        Outcome::NoProgress,
    ] {
        let c = eps.iter().filter(|e| e.log.outcome == o).count();
        if c > 0 {
            parts.push(format!("{} {c}", o.as_str()));
        }
    }
    parts.join(", ")
}

fn trichotomy(out: &mut Outcomes, large: &[Episode], small: &[Episode], dynamic: &[Episode]) {
    let a = large
        .iter()
        .all(|e| matches!(e.log.outcome, Outcome::NoProgress | Outcome::Timeout));
    let infeasible: usize = large
        .iter()
        .map(|e| {
            e.log
                .steps
                .iter()
                .filter(|s| s.status == StepStatus::Infeasible)
                .count()
        })
        .sum();
    out.record(
        "5a fixed large tube blocked",
        a,
        format!(
            "{} seeds: {}; {infeasible} infeasible solves",
            large.len(),
            outcome_counts(large)
        ),
    );
    let small_steps = mean_steps(small);
    out.record(
        "5b fixed small tube reaches",
        small_steps.is_some(),
        format!(
            "{} seeds: {}; mean steps {:?}",
            small.len(),
            outcome_counts(small),
            small_steps
        ),
    );
    let dyn_steps = mean_steps(dynamic);
    let min_clearance = dynamic
        .iter()
        .map(|e| e.log.min_clearance(&e.scenario))
        .fold(f64::INFINITY, f64::min);
    let ratio = match (dyn_steps, small_steps) {
        (Some(d), Some(s)) => d / s,
        _ => f64::NAN,
    };
    out.record(
        "5c dynamic tube reaches faster",
        dyn_steps.is_some() && ratio <= 0.67 && min_clearance >= 0.0,
        format!(
            "{} seeds: {}; mean steps {:?}, ratio to fixed small {ratio:.3} (max 0.67), min tracker clearance {min_clearance:.4}",
            dynamic.len(),
            outcome_counts(dynamic),
            dyn_steps
        ),
    );
}

fn tube_validity(out: &mut Outcomes, dynamic: &[Episode]) {
    // e_k against the one-step radius of the plan executed at k-1
    let (mut hits, mut total) = (0usize, 0usize);
    for ep in dynamic {
        for pair in ep.log.steps.windows(2) {
            if pair[0].status == StepStatus::Failed || pair[0].w.len() < 2 {
                continue;
            }
            total += 1;
            hits += (pair[1].e <= pair[0].w[1]) as usize;
        }
    }
    let frac = hits as f64 / total.max(1) as f64;
    out.record(
        "6 closed-loop tube validity",
        total > 0 && frac >= 0.85,
        format!("{hits}/{total} steps inside the one-step tube = {frac:.4} (min 0.85)"),
    );
}

fn realtime(out: &mut Outcomes, cfg: &ExperimentConfig, dynamic: &[Episode]) {
    let mut times: Vec<f64> = dynamic.iter().flat_map(|e| e.log.solve_times()).collect();
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let p95 = times[((0.95 * times.len() as f64).ceil() as usize).max(1) - 1];
    let m = &cfg.mpc;
    out.record(
        "8 real-time budget",
        mean <= 0.1 && m.horizon == 25 && cfg.training.tube.history == 25 && m.scp_max_iters == 4,
        format!(
            "N={} H={} scp_iters={}: mean {:.1} ms (max 100), p95 {:.1} ms over {} serial solves",
            m.horizon,
            cfg.training.tube.history,
            m.scp_max_iters,
            1e3 * mean,
            1e3 * p95,
            times.len()
        ),
    );
}

/// Mean commanded speed near the gap against the approach legs.
fn speed_profile(dynamic: &[Episode]) {
    let (mut vin, mut nin, mut vout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for ep in dynamic {
        for s in ep
            .log
            .steps
            .iter()
            .filter(|s| s.status != StepStatus::Terminal)
        {
            if s.z.x.abs() < 0.3 {
                vin += s.v.norm();
                nin += 1;
            } else if s.z.x.abs() > 0.6 {
                vout += s.v.norm();
                nout += 1;
            }
        }
    }
    println!(
        "INFO [speed profile] dynamic tube mean speed |x|<0.3: {:.4}, |x|>0.6: {:.4}",
        vin / nin.max(1) as f64,
        vout / nout.max(1) as f64
    );
}

// ---------------------------------------------------------------------------
// 7: solver

fn solver_correctness(out: &mut Outcomes) {
    let mut r = rng::stream(707, &[]);
    let mut worst_obj = 0.0f64;
    let mut worst_kkt = 0.0f64;
    for _ in 0..100 {
        let prob = common::random_tiny_qp(&mut r);
        let sol = solve_qp(&prob, &Default::default(), None).unwrap();
        let f_star = common::active_set_oracle(&prob);
        let f = prob.objective(&sol.x);
        worst_obj = worst_obj.max((f - f_star).abs() / f_star.abs().max(1.0));
        worst_kkt = worst_kkt.max(common::kkt_residual(&prob, &sol));
    }
    out.record(
        "7a QP vs active-set oracle",
        worst_obj <= 1e-6 && worst_kkt < 1e-6,
        format!("100 QPs: max objective gap {worst_obj:.2e} (tol 1e-6), max KKT residual {worst_kkt:.2e} (tol 1e-6)"),
    );

    let s = harness::empty_world(0.2, 0.05);
    let s = Scenario {
        start: Vec2::new(-1.8, 0.0),
        goal: Vec2::new(1.8, 0.0),
        ..s
    };
    let cfg = MpcConfig {
        scp_max_iters: 40,
        ..MpcConfig::default()
    };
    let sol = solve_nominal(&s, &s.start, &cfg, None).unwrap();
    // full speed toward the goal: z_k = start + 0.2 k dt along x
    let n = cfg.horizon;
    let mut analytic = 0.0;
    for k in 0..=n {
        let d = s.goal.x - (s.start.x + s.v_bar * cfg.dt * k as f64);
        analytic += if k == n { cfg.q_f } else { cfg.q } * d * d;
    }
    analytic += cfg.r * n as f64 * s.v_bar * s.v_bar;
    let gap = (sol.objective - analytic).abs() / analytic;
    let check = rollout_plan(&s.start, &sol.v, cfg.dt) == sol.z;
    out.record(
        "7b straight-line SCP objective",
        gap <= 0.01 && check,
        format!(
            "objective {:.4} analytic {analytic:.4}, relative gap {gap:.2e} (tol 1e-2)",
            sol.objective
        ),
    );
}

// ---------------------------------------------------------------------------
// 9, 10: reproducibility and throughput

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.datagen.n_envs = 8;
    cfg.datagen.refs_per_env = 2;
    cfg.training.train.epochs = 2;
    cfg.training.train.steps_per_epoch = 10;
    cfg.training.train.batch_size = 32;
    cfg.training.tube.history = 5;
    cfg.training.tube.horizon = 10;
    cfg.mpc.horizon = 10;
    cfg.sweep.histories = vec![1, 5];
    cfg.sweep.modes = vec![TubeMode::Recursive, TubeMode::OneShot];
    cfg.run.seeds = 2;
    cfg.run.max_steps = 80;
    cfg
}

fn run_all_commands(cfg: &ExperimentConfig) {
    harness::cmd_datagen(cfg).unwrap();
    harness::cmd_train(cfg).unwrap();
    harness::cmd_sweep(cfg).unwrap();
    harness::cmd_run(cfg).unwrap();
    harness::cmd_compare(cfg).unwrap();
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(out: &mut Outcomes) {
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all_commands(&tiny_config(a.path()));
    run_all_commands(&tiny_config(b.path()));
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let compared: Vec<&PathBuf> = fa
        .iter()
        .filter(|p| !p.file_name().unwrap().to_string_lossy().contains("timing"))
        .collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| {
            fs::read(a.path().join(p)).unwrap()
                != fs::read(b.path().join(p)).ok().unwrap_or_default()
        })
        .map(|p| p.display().to_string())
        .collect();
    let datasets = compared
        .iter()
        .filter(|p| p.starts_with("dataset") || p.starts_with("dataset_small"))
        .count();
    out.record(
        "9 reproducibility",
        fa == fb && differing.is_empty() && datasets > 0,
        format!(
            "datagen/train/sweep/run/compare twice: {} files compared ({datasets} dataset files), differing: {:?}, {}",
            compared.len(),
            differing,
            seconds(t)
        ),
    );
}

fn throughput(out: &mut Outcomes, summaries: &[harness::DatasetSummary], workers: usize) {
    let s = &summaries[0];
    let per_core = s.substeps_per_second() / workers as f64;
    out.record(
        "10 datagen throughput",
        per_core >= 5e4,
        format!("{} substeps in {:.2}s on {workers} worker(s): {per_core:.3e} substeps/s/core (min 5e4)", s.substeps, s.seconds),
    );
}

// ---------------------------------------------------------------------------

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let mut out = Outcomes { failed: Vec::new() };

    quantile_oracle(&mut out);
    solver_correctness(&mut out);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        seed: 1,
        output_dir: dir.path().to_path_buf(),
        workers: 1,
        ..ExperimentConfig::default()
    };
    cfg.training.train.epochs = 10;
    cfg.training.train.steps_per_epoch = 100;
    cfg.sweep.modes = vec![TubeMode::Recursive];
    let summaries = harness::cmd_datagen(&cfg).unwrap();
    throughput(&mut out, &summaries, cfg.workers);
    let data = tubempc::datagen::read_dataset(&cfg.dataset_dir()).unwrap();
    gradient_fidelity(&mut out, &data);

    let t = Instant::now();
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.training.train.clone()
    };
    let swept = history_sweep(&data, &cfg.training.tube, &tcfg, &cfg.sweep).unwrap();
    println!(
        "     sweep of {} recursive models: {}",
        swept.len(),
        seconds(t)
    );
    let rows: Vec<SweepRow> = swept.iter().map(|(r, _)| r.clone()).collect();
    calibration(&mut out, &rows, data.len());
    history_trend(&mut out, &rows);

    let (_, model) = swept
        .into_iter()
        .find(|(r, _)| r.history == cfg.training.tube.history)
        .unwrap();
    save_model(&model, &cfg.model_dir()).unwrap();
    let ctx = RunContext::prepare(
        &cfg,
        &[RunTube::FixedLarge, RunTube::FixedSmall, RunTube::Dynamic],
    )
    .unwrap();
    let t = Instant::now();
    let large = episodes(&ctx, &cfg, RunTube::FixedLarge, 3);
    let small = episodes(&ctx, &cfg, RunTube::FixedSmall, 3);
    let dynamic = episodes(&ctx, &cfg, RunTube::Dynamic, 20);
    println!(
        "     narrow gap {:.4} m, w_large {:.4}, w_small {:.4}, closed loop {}",
        ctx.scenario.obstacles[0].clearance(&Vec2::zeros()) * 2.0,
        ctx.w_large.unwrap(),
        ctx.w_small.unwrap(),
        seconds(t)
    );
    trichotomy(&mut out, &large, &small, &dynamic);
    tube_validity(&mut out, &dynamic);
    realtime(&mut out, &cfg, &dynamic);
    speed_profile(&dynamic);

    reproducibility(&mut out);

    println!("acceptance finished in {}", seconds(started));
    if !out.failed.is_empty() {
        println!("failed: {}", out.failed.join(", "));
        std::process::exit(1);
    }
}
