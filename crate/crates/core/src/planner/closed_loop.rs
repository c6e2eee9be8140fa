use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    solve_dynamic_tube, solve_nominal, MpcConfig, MpcSolution, Scenario, SolveStatus, TubeSpec,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{
    planner_step, project, tracker_step, tracking_error, HistoryBuffer, TrackerParams,
    TrackerState, Vec2,
};

/// A run that gains less than this much distance to the goal over
/// `STALL_WINDOW` steps is stopped as stalled.
pub const STALL_PROGRESS: f64 = 0.01;
pub const STALL_WINDOW: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Timeout,
    Collision,
    NoProgress,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Timeout => "timeout",
            Outcome::Collision => "collision",
            Outcome::NoProgress => "no_progress",
        }
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "reached" => Outcome::Reached,
            "timeout" => Outcome::Timeout,
            "collision" => Outcome::Collision,
            "no_progress" => Outcome::NoProgress,
            other => return Err(Error::Format(format!("unknown outcome {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Converged,
    IterCapped,
    Infeasible,
    /// The solver returned an error; the previous input was replayed.
    Failed,
    /// Final record of a run; no plan was computed.
    Terminal,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Converged => "converged",
            StepStatus::IterCapped => "iter_capped",
            StepStatus::Infeasible => "infeasible",
            StepStatus::Failed => "failed",
            StepStatus::Terminal => "terminal",
        }
    }
}

impl std::str::FromStr for StepStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "converged" => StepStatus::Converged,
            "iter_capped" => StepStatus::IterCapped,
            "infeasible" => StepStatus::Infeasible,
            "failed" => StepStatus::Failed,
            "terminal" => StepStatus::Terminal,
            other => return Err(Error::Format(format!("unknown step status {other:?}"))),
        })
    }
}

impl From<SolveStatus> for StepStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => StepStatus::Converged,
            SolveStatus::IterCapped => StepStatus::IterCapped,
            SolveStatus::Infeasible => StepStatus::Infeasible,
        }
    }
}

/// State at step `k` and the plan computed there.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub z: Vec2,
    pub p: Vec2,
    pub e: f64,
    pub v: Vec2,
    pub w: Vec<f64>,
    pub plan_z: Vec<Vec2>,
    pub status: StepStatus,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub scenario: String,
    pub tube: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
}

impl ClosedLoopLog {
    /// Inputs applied before the run ended.
    pub fn applied_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.status != StepStatus::Terminal)
            .count()
    }

    pub fn steps_to_goal(&self) -> Option<usize> {
        (self.outcome == Outcome::Reached).then(|| self.applied_steps())
    }

    pub fn min_clearance(&self, scenario: &Scenario) -> f64 {
        self.steps
            .iter()
            .map(|s| scenario.clearance(&s.p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Fraction of steps whose measured error lies inside the one-step tube
    /// radius predicted at the previous step. `None` without a nonzero tube.
    pub fn tube_correctness(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for pair in self.steps.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if prev.w.len() < 2 || prev.status == StepStatus::Failed || prev.w[1] <= 0.0 {
                continue;
            }
            total += 1;
            hits += (cur.e <= prev.w[1]) as usize;
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    pub fn failed_solves(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.status == StepStatus::Failed)
            .count()
    }

    pub fn solve_times(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.status != StepStatus::Terminal)
            .map(|s| s.solve_seconds)
            .collect()
    }
}

fn shifted(v: &[Vec2]) -> Vec<Vec2> {
    let mut out = v[1..].to_vec();
    out.push(*v.last().expect("non-empty plan"));
    out
}

/// Receding-horizon loop: nominal pre-solve, tube solve, first input applied
/// to the planner and the tracker.
pub fn closed_loop_run(
    scenario: &Scenario,
    cfg: &MpcConfig,
    params: &TrackerParams,
    seed: u64,
    max_steps: usize,
) -> Result<ClosedLoopLog> {
    scenario.validate()?;
    cfg.validate()?;
    params.validate(cfg.dt)?;
    let step_dt = params.dt_sim * params.substeps as f64;
    if (step_dt - cfg.dt).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "tracker covers {step_dt} s per planner step but mpc.dt is {}",
            cfg.dt
        )));
    }
    let mut noise = rng::stream(seed, &[0x636c]);
    let mut x = TrackerState::at_rest(scenario.start);
    let mut z = scenario.start;

    let h = cfg.tube.history_len().unwrap_or(1);
    let mut hist = HistoryBuffer::filled(h, 0.0, z);
    for _ in 0..h {
        x = tracker_step(&x, &z, &Vec2::zeros(), params, &mut noise);
        hist.push(tracking_error(&x, &z), z, Vec2::zeros());
    }

    let mut steps = Vec::new();
    let mut nominal_prev: Option<MpcSolution> = None;
    let mut tube_prev: Option<MpcSolution> = None;
    let mut last_v = Vec2::zeros();
    let mut best_dist = (z - scenario.goal).norm();
    let mut best_at = 0usize;
    let mut outcome = Outcome::Timeout;

    for k in 0..max_steps {
        let p = project(&x);
        let e = tracking_error(&x, &z);
        if (z - scenario.goal).norm() <= scenario.goal_tolerance {
            outcome = Outcome::Reached;
            break;
        }
        let dist = (z - scenario.goal).norm();
        if dist < best_dist - STALL_PROGRESS {
            best_dist = dist;
            best_at = k;
        } else if k - best_at >= STALL_WINDOW {
            outcome = Outcome::NoProgress;
            break;
        }

        let started = Instant::now();
        let solved = (|| -> Result<MpcSolution> {
            let warm = nominal_prev.as_ref().map(|s| shifted(&s.v));
            let nominal = solve_nominal(scenario, &z, cfg, warm.as_deref())?;
            let out = match cfg.tube {
                TubeSpec::None => nominal.clone(),
                _ => {
                    let warm = tube_prev.as_ref().map(|s| shifted(&s.v));
                    let hist = matches!(cfg.tube, TubeSpec::Dynamic(_)).then_some(&hist);
                    solve_dynamic_tube(scenario, &z, hist, cfg, &nominal, warm.as_deref())?
                }
            };
            nominal_prev = Some(nominal);
            Ok(out)
        })();
        let solve_seconds = started.elapsed().as_secs_f64();

        let (v, w, plan_z, status) = match solved {
            Ok(sol) => {
                let status = StepStatus::from(sol.status);
                let v = if sol.status == SolveStatus::Infeasible {
                    Vec2::zeros()
                } else {
                    sol.v[0]
                };
                let rec = (v, sol.w.clone(), sol.z.clone(), status);
                tube_prev = Some(sol);
                rec
            }
            Err(_) => (last_v, Vec::new(), Vec::new(), StepStatus::Failed),
        };
        steps.push(StepRecord {
            k,
            z,
            p,
            e,
            v,
            w,
            plan_z,
            status,
            solve_seconds,
        });

        x = tracker_step(&x, &z, &v, params, &mut noise);
        if !x.is_finite() {
            return Err(Error::Solver(format!("tracker state diverged at step {k}")));
        }
        let z_next = planner_step(&z, &v, cfg.dt);
        hist.push(tracking_error(&x, &z_next), z, v);
        z = z_next;
        last_v = v;
        if scenario.obstacles.iter().any(|o| o.contains(&project(&x))) {
            outcome = Outcome::Collision;
            break;
        }
    }

    steps.push(StepRecord {
        k: steps.len(),
        z,
        p: project(&x),
        e: tracking_error(&x, &z),
        v: Vec2::zeros(),
        w: Vec::new(),
        plan_z: Vec::new(),
        status: StepStatus::Terminal,
        solve_seconds: 0.0,
    });
    Ok(ClosedLoopLog {
        scenario: scenario.name.clone(),
        tube: cfg.tube.label().to_string(),
        seed,
        steps,
        outcome,
    })
}
