//! Nominal and tube-robust MPC for the single-integrator planner, solved by
//! sequential convex programming over the input sequence.
//!
//! Positions are eliminated through `z[j] = z[0] + dt * sum(v[..j])`, so every
//! returned plan satisfies the planner dynamics exactly. Each SCP iteration
//! linearizes the obstacle rows (and, for a learned tube, the tube model)
//! around the current inputs and solves one QP in the input step.

mod closed_loop;
pub mod qp;
mod scenario;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use closed_loop::{closed_loop_run, ClosedLoopLog, Outcome, StepRecord, StepStatus};
pub use scenario::{Bounds, Obstacle, Scenario};

use crate::error::{Error, Result};
use crate::sim::{planner_step, HistoryBuffer, Vec2};
use crate::tube::{linearize_tube_dynamics, TubeModel};
use qp::{solve_qp, QpProblem, QpSettings};

/// Pairs whose clearance exceeds the trust-region reach by this much are
/// left out of the QP.
const PRUNE_MARGIN: f64 = 0.25;

/// Tube radius model used in the obstacle constraints.
#[derive(Debug, Clone, Default)]
pub enum TubeSpec {
    /// Point containment.
    #[default]
    None,
    Fixed(f64),
    Dynamic(Arc<TubeModel>),
}

impl PartialEq for TubeSpec {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TubeSpec::None, TubeSpec::None) => true,
            (TubeSpec::Fixed(a), TubeSpec::Fixed(b)) => a == b,
            (TubeSpec::Dynamic(a), TubeSpec::Dynamic(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl TubeSpec {
    pub fn label(&self) -> &'static str {
        match self {
            TubeSpec::None => "none",
            TubeSpec::Fixed(_) => "fixed",
            TubeSpec::Dynamic(_) => "dynamic",
        }
    }

    pub fn history_len(&self) -> Option<usize> {
        match self {
            TubeSpec::Dynamic(m) => Some(m.cfg().history),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: f64,
    pub r: f64,
    pub q_f: f64,
    pub r_r: f64,
    pub scp_max_iters: usize,
    pub qp: QpSettings,
    /// Trust-region radius on the input step as a fraction of `v_bar`.
    pub trust_region_frac: f64,
    pub slack_penalty: f64,
    /// SCP stops once an accepted step is below this (infinity norm).
    pub convergence_tol: f64,
    /// Largest tolerated violation of the squared obstacle constraint.
    pub feasibility_tol: f64,
    /// Extra clearance demanded by the linearized obstacle rows.
    pub constraint_margin: f64,
    #[serde(skip)]
    pub tube: TubeSpec,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: 0.1,
            q: 10.0,
            r: 0.1,
            q_f: 100.0,
            r_r: 1.0,
            scp_max_iters: 4,
            qp: QpSettings::default(),
            trust_region_frac: 0.5,
            slack_penalty: 1e3,
            convergence_tol: 1e-4,
            feasibility_tol: 1e-6,
            constraint_margin: 1e-4,
            tube: TubeSpec::None,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::invalid("mpc horizon must be >= 1 and dt > 0"));
        }
        if ![self.q, self.r, self.q_f, self.r_r]
            .iter()
            .all(|w| *w > 0.0 && w.is_finite())
        {
            return Err(Error::invalid("mpc weights q, r, q_f, r_r must be > 0"));
        }
        if self.scp_max_iters == 0 {
            return Err(Error::invalid("mpc.scp_max_iters must be >= 1"));
        }
        if !(self.trust_region_frac > 0.0 && self.slack_penalty > 0.0) {
            return Err(Error::invalid(
                "mpc trust region and slack penalty must be > 0",
            ));
        }
        if !(self.convergence_tol > 0.0
            && self.feasibility_tol >= 0.0
            && self.constraint_margin >= 0.0)
        {
            return Err(Error::invalid("mpc tolerances must be nonnegative"));
        }
        match &self.tube {
            TubeSpec::Fixed(w) if !(*w >= 0.0 && w.is_finite()) => {
                return Err(Error::invalid("fixed tube radius must be >= 0"));
            }
            TubeSpec::Dynamic(m) if m.cfg().horizon != self.horizon => {
                return Err(Error::invalid(format!(
                    "tube model horizon {} differs from mpc horizon {}",
                    m.cfg().horizon,
                    self.horizon
                )));
            }
            _ => {}
        }
        self.qp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterCapped,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::IterCapped => "iter_capped",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub z: Vec<Vec2>,
    pub v: Vec<Vec2>,
    pub w: Vec<f64>,
    pub status: SolveStatus,
    /// Cost without the slack penalty.
    pub objective: f64,
    /// Largest violation of the squared obstacle constraint over nodes `1..=N`.
    pub max_violation: f64,
    pub iterations: usize,
    /// Penalized merit value after each accepted iteration, starting with the initial guess.
    pub merit_trace: Vec<f64>,
}

/// Squared-distance form of the tube-in-free-space constraint; feasible iff `>= 0`.
pub fn tube_constraint_value(z: &Vec2, w: f64, obstacle: &Obstacle) -> f64 {
    let d = z - obstacle.center;
    d.dot(&d) - (w + obstacle.radius).powi(2)
}

/// Planner positions produced by `v` from `z0`.
pub fn rollout_plan(z0: &Vec2, v: &[Vec2], dt: f64) -> Vec<Vec2> {
    let mut z = Vec::with_capacity(v.len() + 1);
    z.push(*z0);
    for vj in v {
        let next = planner_step(z.last().expect("non-empty"), vj, dt);
        z.push(next);
    }
    z
}

/// Stage cost targets: Eq.-13-style goal regulation or deviation from a reference plan.
enum CostTargets<'a> {
    Goal(Vec2),
    Track { z: &'a [Vec2], v: &'a [Vec2] },
}

struct Cost {
    horizon: usize,
    dt: f64,
    state_w: Vec<f64>,
    z_ref: Vec<Vec2>,
    input_w: f64,
    v_ref: Vec<Vec2>,
    rate_w: f64,
}

impl Cost {
    fn new(cfg: &MpcConfig, targets: CostTargets) -> Self {
        let n = cfg.horizon;
        let mut state_w = vec![cfg.q; n + 1];
        state_w[n] = cfg.q_f;
        let (z_ref, v_ref, rate_w) = match targets {
            CostTargets::Goal(g) => (vec![g; n + 1], vec![Vec2::zeros(); n], 0.0),
            CostTargets::Track { z, v } => (z.to_vec(), v.to_vec(), cfg.r_r),
        };
        Self {
            horizon: n,
            dt: cfg.dt,
            state_w,
            z_ref,
            input_w: cfg.r,
            v_ref,
            rate_w,
        }
    }

    fn eval(&self, z: &[Vec2], v: &[Vec2]) -> f64 {
        let mut j = 0.0;
        for k in 0..=self.horizon {
            j += self.state_w[k] * (z[k] - self.z_ref[k]).norm_squared();
        }
        for k in 0..self.horizon {
            j += self.input_w * (v[k] - self.v_ref[k]).norm_squared();
        }
        for k in 1..self.horizon {
            j += self.rate_w * (v[k] - v[k - 1]).norm_squared();
        }
        j
    }

    /// `(P, c)` with `J(v) = v'Pv/2 + c'v + const` over interleaved `(x, y)` inputs.
    fn quadratic(&self, z0: &Vec2) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.horizon;
        let dt = self.dt;
        // tail[i] = sum of state weights at nodes j > i
        let mut tail = vec![0.0; n + 1];
        for i in (0..n).rev() {
            tail[i] = tail[i + 1] + self.state_w[i + 1];
        }
        let mut p = DMatrix::zeros(2 * n, 2 * n);
        let mut c = DVector::zeros(2 * n);
        for i in 0..n {
            for k in 0..n {
                let mut v = 2.0 * dt * dt * tail[i.max(k)];
                if i == k {
                    v += 2.0 * self.input_w;
                    let neighbours = (i > 0) as usize + (i + 1 < n) as usize;
                    v += 2.0 * self.rate_w * neighbours as f64;
                } else if i.abs_diff(k) == 1 {
                    v -= 2.0 * self.rate_w;
                }
                for d in 0..2 {
                    p[(2 * i + d, 2 * k + d)] = v;
                }
            }
            for d in 0..2 {
                let mut s = 0.0;
                for j in i + 1..=n {
                    s += self.state_w[j] * (z0[d] - self.z_ref[j][d]);
                }
                c[2 * i + d] = 2.0 * dt * s - 2.0 * self.input_w * self.v_ref[i][d];
            }
        }
        (p, c)
    }
}

/// Tube radii at a plan and, on request, `dw/dv` (`(N+1) x 2N`).
fn tube_at(
    spec: &TubeSpec,
    hist: Option<&HistoryBuffer>,
    z: &[Vec2],
    v: &[Vec2],
    dt: f64,
    with_jacobian: bool,
) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
    let n = v.len();
    match spec {
        TubeSpec::None => Ok((vec![0.0; n + 1], None)),
        TubeSpec::Fixed(w) => Ok((vec![*w; n + 1], None)),
        TubeSpec::Dynamic(model) => {
            let hist =
                hist.ok_or_else(|| Error::invalid("a learned tube needs an error history"))?;
            if !with_jacobian {
                return Ok((model.predict(hist, z, v)?.w, None));
            }
            let lin = linearize_tube_dynamics(model, hist, z, v)?;
            let mut dw = DMatrix::zeros(n + 1, 2 * n);
            for j in 0..=n {
                for d in 0..2 {
                    // suffix sums over nodes l > i of dw_j/dz_l
                    let mut acc = 0.0;
                    for i in (0..n).rev() {
                        acc += lin.jz[(j, 2 * (i + 1) + d)];
                        dw[(j, 2 * i + d)] = dt * acc + lin.jv[(j, 2 * i + d)];
                    }
                }
            }
            Ok((lin.w, Some(dw)))
        }
    }
}

struct Problem<'a> {
    scenario: &'a Scenario,
    cfg: &'a MpcConfig,
    tube: &'a TubeSpec,
    hist: Option<&'a HistoryBuffer>,
    z0: Vec2,
    cost: Cost,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    /// Obstacle clearance in distance form at nodes `1..=N`, per obstacle.
    fn clearances(&self, z: &[Vec2], w: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.n() * self.scenario.obstacles.len());
        for j in 1..=self.n() {
            for (i, o) in self.scenario.obstacles.iter().enumerate() {
                out.push((j, i, (z[j] - o.center).norm() - o.radius - w[j]));
            }
        }
        out
    }

    fn merit(&self, z: &[Vec2], v: &[Vec2], w: &[f64]) -> f64 {
        let penalty: f64 = self
            .clearances(z, w)
            .iter()
            .map(|(_, _, g)| (self.cfg.constraint_margin - g).max(0.0))
            .sum();
        self.cost.eval(z, v) + self.cfg.slack_penalty * penalty
    }

    fn max_violation(&self, z: &[Vec2], w: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 1..=self.n() {
            for o in &self.scenario.obstacles {
                worst = worst.max(-tube_constraint_value(&z[j], w[j], o));
            }
        }
        worst
    }

    fn build_qp(
        &self,
        p_cost: &DMatrix<f64>,
        c_cost: &DVector<f64>,
        v: &[Vec2],
        z: &[Vec2],
        w: &[f64],
        dw: Option<&DMatrix<f64>>,
        trust: f64,
    ) -> QpProblem {
        let n = self.n();
        let nv = 2 * n;
        let dt = self.cfg.dt;
        let v_bar = self.scenario.v_bar;
        let pairs: Vec<(usize, usize, f64)> = self
            .clearances(z, w)
            .into_iter()
            .filter(|&(j, _, g)| {
                g < std::f64::consts::SQRT_2 * dt * j as f64 * trust + PRUNE_MARGIN
            })
            .collect();
        let m = nv + nv + pairs.len();

        let p = p_cost.clone();
        let vflat = DVector::from_fn(nv, |i, _| v[i / 2][i % 2]);
        let q = p_cost * &vflat + c_cost;

        let mut a = DMatrix::zeros(m, nv);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        let mut soft = DVector::zeros(m);
        // input box intersected with the trust region
        for i in 0..nv {
            a[(i, i)] = 1.0;
            l[i] = (-trust).max(-v_bar - vflat[i]);
            u[i] = trust.min(v_bar - vflat[i]);
        }
        // world bounds on nodes 1..=N
        let bounds = &self.scenario.bounds;
        for j in 1..=n {
            for d in 0..2 {
                let row = nv + 2 * (j - 1) + d;
                for i in 0..j {
                    a[(row, 2 * i + d)] = dt;
                }
                l[row] = bounds.min[d] - z[j][d];
                u[row] = bounds.max[d] - z[j][d];
            }
        }
        // linearized clearance rows, L1-penalized below the bound
        for (k, &(j, oi, g)) in pairs.iter().enumerate() {
            let row = 2 * nv + k;
            let o = &self.scenario.obstacles[oi];
            let diff = z[j] - o.center;
            let dist = diff.norm();
            let normal = if dist > 1e-9 {
                diff / dist
            } else {
                Vec2::new(1.0, 0.0)
            };
            for i in 0..j {
                for d in 0..2 {
                    a[(row, 2 * i + d)] = dt * normal[d];
                }
            }
            if let Some(dw) = dw {
                for col in 0..nv {
                    a[(row, col)] -= dw[(j, col)];
                }
            }
            l[row] = self.cfg.constraint_margin - g;
            u[row] = f64::INFINITY;
            soft[row] = self.cfg.slack_penalty;
        }
        QpProblem {
            p,
            q,
            a,
            l,
            u,
            soft,
        }
    }

    fn solve(&self, warm: Option<&[Vec2]>) -> Result<MpcSolution> {
        let n = self.n();
        let dt = self.cfg.dt;
        let v_bar = self.scenario.v_bar;
        let clamp = |v: &Vec2| Vec2::new(v.x.clamp(-v_bar, v_bar), v.y.clamp(-v_bar, v_bar));
        let mut v: Vec<Vec2> = match warm {
            Some(w) if w.len() == n => w.iter().map(clamp).collect(),
            Some(w) => {
                return Err(Error::shape(format!(
                    "warm start has {} inputs, horizon is {n}",
                    w.len()
                )));
            }
            None => vec![Vec2::zeros(); n],
        };
        let (p_cost, c_cost) = self.cost.quadratic(&self.z0);
        let mut z = rollout_plan(&self.z0, &v, dt);
        let (mut w, _) = tube_at(self.tube, self.hist, &z, &v, dt, false)?;
        let mut merit = self.merit(&z, &v, &w);
        let mut merit_trace = vec![merit];
        let mut trust = self.cfg.trust_region_frac * v_bar;
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..self.cfg.scp_max_iters {
            iterations += 1;
            let (w_lin, dw) = tube_at(self.tube, self.hist, &z, &v, dt, true)?;
            let qp = self.build_qp(&p_cost, &c_cost, &v, &z, &w_lin, dw.as_ref(), trust);
            let trust_used = trust;
            let sol = solve_qp(&qp, &self.cfg.qp, None)?;
            // an inexact answer that does no better than staying put is discarded
            let stay = DVector::zeros(qp.n());
            let stay_wins = qp.primal_residual(&stay) <= self.cfg.qp.eps_abs
                && qp.objective(&stay) <= qp.objective(&sol.x);
            let x = if stay_wins { &stay } else { &sol.x };
            let step: Vec<Vec2> = (0..n).map(|i| Vec2::new(x[2 * i], x[2 * i + 1])).collect();
            let step_norm = step
                .iter()
                .fold(0.0f64, |m, s| m.max(s.x.abs()).max(s.y.abs()));
            let v_new: Vec<Vec2> = v.iter().zip(&step).map(|(a, b)| clamp(&(a + b))).collect();
            let z_new = rollout_plan(&self.z0, &v_new, dt);
            let (w_new, _) = tube_at(self.tube, self.hist, &z_new, &v_new, dt, false)?;
            let merit_new = self.merit(&z_new, &v_new, &w_new);
            if !merit_new.is_finite() {
                return Err(Error::Solver("merit became non-finite".into()));
            }
            if merit_new <= merit + 1e-12 * merit.abs().max(1.0) {
                v = v_new;
                z = z_new;
                w = w_new;
                merit = merit_new;
                merit_trace.push(merit);
            } else {
                trust *= 0.5;
            }
            // a step pinned to the trust radius says nothing about stationarity
            if step_norm <= self.cfg.convergence_tol && step_norm < 0.999 * trust_used {
                converged = true;
                break;
            }
        }

        let max_violation = self.max_violation(&z, &w);
        let status = if max_violation > self.cfg.feasibility_tol {
            SolveStatus::Infeasible
        } else if converged {
            SolveStatus::Converged
        } else {
            SolveStatus::IterCapped
        };
        Ok(MpcSolution {
            objective: self.cost.eval(&z, &v),
            z,
            v,
            w,
            status,
            max_violation,
            iterations,
            merit_trace,
        })
    }
}

fn check_start(scenario: &Scenario, z_init: &Vec2, cfg: &MpcConfig) -> Result<()> {
    scenario.validate()?;
    cfg.validate()?;
    if !(z_init.x.is_finite() && z_init.y.is_finite()) {
        return Err(Error::invalid("initial planner state must be finite"));
    }
    Ok(())
}

/// Goal-regulating MPC with point obstacle containment (the tube setting of
/// `cfg` is ignored).
pub fn solve_nominal(
    scenario: &Scenario,
    z_init: &Vec2,
    cfg: &MpcConfig,
    warm: Option<&[Vec2]>,
) -> Result<MpcSolution> {
    check_start(scenario, z_init, cfg)?;
    let problem = Problem {
        scenario,
        cfg,
        tube: &TubeSpec::None,
        hist: None,
        z0: *z_init,
        cost: Cost::new(cfg, CostTargets::Goal(scenario.goal)),
    };
    problem.solve(warm)
}

/// Tube-robust MPC tracking the `reference` plan (usually the nominal
/// solution) with an input-rate penalty, keeping the tube of `cfg.tube`
/// clear of every obstacle.
pub fn solve_dynamic_tube(
    scenario: &Scenario,
    z_init: &Vec2,
    hist: Option<&HistoryBuffer>,
    cfg: &MpcConfig,
    reference: &MpcSolution,
    warm: Option<&[Vec2]>,
) -> Result<MpcSolution> {
    check_start(scenario, z_init, cfg)?;
    let n = cfg.horizon;
    if reference.z.len() != n + 1 || reference.v.len() != n {
        return Err(Error::shape("reference plan does not match the horizon"));
    }
    if let Some(h) = cfg.tube.history_len() {
        match hist {
            Some(b) if b.len() == h => {}
            _ => {
                return Err(Error::shape(format!(
                    "learned tube needs a history of length {h}"
                )))
            }
        }
    }
    let problem = Problem {
        scenario,
        cfg,
        tube: &cfg.tube,
        hist,
        z0: *z_init,
        cost: Cost::new(
            cfg,
            CostTargets::Track {
                z: &reference.z,
                v: &reference.v,
            },
        ),
    };
    problem.solve(warm)
}
