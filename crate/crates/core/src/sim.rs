//! Planning model, surrogate tracking plant, and the scalar tracking error.
//!
//! The planner is a 2D single integrator `z' = z + dt v`. The tracker is a
//! point mass with a first-order actuator lag, a constant disturbance
//! acceleration and Gaussian velocity noise, driven by a clipped
//! proportional / damping / feed-forward rule. The tracker reference advances
//! along `v_ref` inside a planner step, so a tracker that follows the plan
//! perfectly sits on `z_{k+1}` at the end of the step.

use std::collections::VecDeque;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Single-integrator update `z + dt v`.
#[inline]
pub fn planner_step(z: &Vec2, v: &Vec2, dt: f64) -> Vec2 {
    z + v * dt
}

/// Same recursion evaluated in `f32`, used for on-disk records.
#[inline]
pub fn planner_step_f32(z: [f32; 2], v: [f32; 2], dt: f32) -> [f32; 2] {
    [z[0] + dt * v[0], z[1] + dt * v[1]]
}

/// Componentwise clamp to `[-c, c]`.
#[inline]
pub fn clip_vec(u: &Vec2, c: f64) -> Vec2 {
    Vec2::new(u.x.clamp(-c, c), u.y.clamp(-c, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub p: Vec2,
    pub vel: Vec2,
    pub act: Vec2,
}

impl TrackerState {
    pub fn at_rest(p: Vec2) -> Self {
        Self {
            p,
            vel: Vec2::zeros(),
            act: Vec2::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(self.vel.iter())
            .chain(self.act.iter())
            .all(|x| x.is_finite())
    }
}

/// Physical and controller parameters of the surrogate tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    /// Actuator time constant (s).
    pub tau: f64,
    pub kp: f64,
    pub kd: f64,
    pub kf: f64,
    pub cp: f64,
    pub cv: f64,
    pub cf: f64,
    pub ca: f64,
    /// Per-substep velocity noise standard deviation (m/s).
    pub sigma: f64,
    /// Constant disturbance acceleration (m/s^2).
    pub bias: [f64; 2],
    pub dt_sim: f64,
    pub substeps: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            tau: 0.25,
            kp: 4.0,
            kd: 2.0,
            kf: 1.0,
            cp: 0.5,
            cv: 1.0,
            cf: 0.3,
            ca: 1.5,
            sigma: 0.005,
            bias: [0.0, 0.0],
            dt_sim: 0.01,
            substeps: 10,
        }
    }
}

impl TrackerParams {
    /// Checks parameter bounds and that the substeps tile the planner step `dt`.
    pub fn validate(&self, dt: f64) -> Result<()> {
        let nonneg = [
            ("kp", self.kp),
            ("kd", self.kd),
            ("kf", self.kf),
            ("cp", self.cp),
            ("cv", self.cv),
            ("cf", self.cf),
            ("ca", self.ca),
            ("sigma", self.sigma),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::invalid(format!(
                    "tracker param {name} must be finite and >= 0, got {value}"
                )));
            }
        }
        if !(self.tau > 0.0) || !(self.dt_sim > 0.0) {
            return Err(Error::invalid("tracker tau and dt_sim must be > 0"));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("tracker substeps must be >= 1"));
        }
        if !self.bias.iter().all(|b| b.is_finite()) {
            return Err(Error::invalid("tracker bias must be finite"));
        }
        let span = self.substeps as f64 * self.dt_sim;
        if (span - dt).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "substeps * dt_sim = {span} does not match planner dt = {dt}"
            )));
        }
        Ok(())
    }

    fn bias_vec(&self) -> Vec2 {
        Vec2::new(self.bias[0], self.bias[1])
    }
}

/// Clipped PD + feed-forward rule. Every term pushes `p` toward `z_ref`
/// moving at `v_ref`; the output satisfies `|a|_inf <= ca`.
pub fn raibert_control(
    x: &TrackerState,
    z_ref: &Vec2,
    v_ref: &Vec2,
    params: &TrackerParams,
) -> Vec2 {
    let e_p = clip_vec(&(z_ref - x.p), params.cp);
    let e_v = clip_vec(&(-x.vel), params.cv);
    let e_f = clip_vec(v_ref, params.cf);
    clip_vec(
        &(e_p * params.kp + e_v * params.kd + e_f * params.kf),
        params.ca,
    )
}

/// Advances the tracker by one planner step (`params.substeps` substeps).
///
/// The reference position at substep `i` is `z_ref + i dt_sim v_ref`. Noise is
/// drawn from `rng` only when `sigma > 0`, so noiseless runs consume no
/// randomness.
pub fn tracker_step<R: Rng + ?Sized>(
    x: &TrackerState,
    z_ref: &Vec2,
    v_ref: &Vec2,
    params: &TrackerParams,
    rng: &mut R,
) -> TrackerState {
    let mut s = *x;
    let h = params.dt_sim;
    let gain = h / params.tau;
    let bias = params.bias_vec();
    for i in 0..params.substeps {
        let target = z_ref + v_ref * (i as f64 * h);
        let a_cmd = raibert_control(&s, &target, v_ref, params);
        s.act += (a_cmd - s.act) * gain;
        s.vel += (s.act + bias) * h;
        if params.sigma > 0.0 {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            s.vel += Vec2::new(nx, ny) * params.sigma;
        }
        s.p += s.vel * h;
    }
    s
}

/// Position extraction.
#[inline]
pub fn project(x: &TrackerState) -> Vec2 {
    x.p
}

/// Euclidean distance between the planner state and the projected tracker.
#[inline]
pub fn tracking_error(x: &TrackerState, z: &Vec2) -> f64 {
    (z - project(x)).norm()
}

/// Rolling window of the `H` most recent measurements.
///
/// `e` ends at the current measured error `e_k`; `z` and `v` hold the planner
/// states and inputs `z_{k-H..k-1}`, `v_{k-H..k-1}` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    len: usize,
    e: VecDeque<f64>,
    z: VecDeque<Vec2>,
    v: VecDeque<Vec2>,
}

impl HistoryBuffer {
    /// A buffer filled with a standstill at `z` with error `e`.
    pub fn filled(len: usize, e: f64, z: Vec2) -> Self {
        assert!(len >= 1, "history length must be >= 1");
        Self {
            len,
            e: std::iter::repeat_n(e.max(0.0), len).collect(),
            z: std::iter::repeat_n(z, len).collect(),
            v: std::iter::repeat_n(Vec2::zeros(), len).collect(),
        }
    }

    /// Builds a buffer from explicit slices (oldest first).
    pub fn from_slices(e: &[f64], z: &[Vec2], v: &[Vec2]) -> Result<Self> {
        let len = e.len();
        if len == 0 || z.len() != len || v.len() != len {
            return Err(Error::shape(format!(
                "history rings must share a nonzero length (e={}, z={}, v={})",
                e.len(),
                z.len(),
                v.len()
            )));
        }
        if e.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::invalid("history errors must be >= 0"));
        }
        Ok(Self {
            len,
            e: e.iter().copied().collect(),
            z: z.iter().copied().collect(),
            v: v.iter().copied().collect(),
        })
    }

    /// Records the transition `z_k --v_k--> z_{k+1}` and the new error `e_{k+1}`.
    pub fn push(&mut self, e_next: f64, z_k: Vec2, v_k: Vec2) {
        self.e.pop_front();
        self.z.pop_front();
        self.v.pop_front();
        self.e.push_back(e_next.max(0.0));
        self.z.push_back(z_k);
        self.v.push_back(v_k);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn errors(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.e.iter().copied()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = &Vec2> + '_ {
        self.z.iter()
    }

    pub fn inputs(&self) -> impl ExactSizeIterator<Item = &Vec2> + '_ {
        self.v.iter()
    }

    pub fn current_error(&self) -> f64 {
        *self.e.back().expect("non-empty history")
    }

    /// Shifts every stored position by `offset`.
    pub fn translated(&self, offset: Vec2) -> Self {
        let mut out = self.clone();
        for z in out.z.iter_mut() {
            *z += offset;
        }
        out
    }
}
