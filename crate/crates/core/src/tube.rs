//! Learned tube dynamics: feature layout, one-shot and recursive prediction,
//! quantile training on rollout data, evaluation metrics, and Jacobians for
//! the planner.
//!
//! Index convention at time `k` with history `H` and horizon `N`:
//! the history holds `e[k-H+1..=k]`, `z[k-H..k]`, `v[k-H..k]`, the plan holds
//! `z[k..=k+N]` and `v[k..k+N]`. Concatenated, a window carries `H+N+1`
//! positions and `H+N` inputs; position `H` is the current planner state.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{split_dataset, Dataset, RolloutRecord};
use crate::error::{Error, Result};
use crate::neural::{
    adam_step, clip_grad_norm, quantile_loss_grad, stop_gradient, AdamState, FeedbackGradient, Mlp,
    Standardizer, TapeSection, TrainConfig,
};
use crate::rng;
use crate::sim::{HistoryBuffer, Vec2};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 8] = b"TMPCPRM\0";
const INIT_TAG: u64 = 0x1417;
const BATCH_TAG: u64 = 0xBA7C;
const NORM_TAG: u64 = 0x0A0A;
const NORM_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TubeMode {
    OneShot,
    Recursive,
}

impl TubeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TubeMode::OneShot => "one_shot",
            TubeMode::Recursive => "recursive",
        }
    }
}

impl std::str::FromStr for TubeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_shot" => Ok(TubeMode::OneShot),
            "recursive" => Ok(TubeMode::Recursive),
            _ => Err(Error::invalid(format!("unknown tube mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeModelConfig {
    pub history: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub mode: TubeMode,
    /// Express positions relative to the step anchor instead of absolutely.
    pub canonicalize: bool,
}

impl Default for TubeModelConfig {
    fn default() -> Self {
        Self {
            history: 25,
            horizon: 25,
            alpha: 0.9,
            mode: TubeMode::Recursive,
            canonicalize: true,
        }
    }
}

impl TubeModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 {
            return Err(Error::invalid("tube history and horizon must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("tube alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        let (h, n) = (self.history, self.horizon);
        match self.mode {
            TubeMode::OneShot => h + 2 * (h + n + 1) + 2 * (h + n),
            TubeMode::Recursive => 5 * h + 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            TubeMode::OneShot => self.horizon,
            TubeMode::Recursive => 1,
        }
    }
}

/// Tube radii for indices `k..=k+N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubePrediction {
    pub w: Vec<f64>,
}

/// One history-plus-plan window, optionally with ground-truth future errors.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeWindow {
    pub e_hist: Vec<f64>,
    pub z: Vec<Vec2>,
    pub v: Vec<Vec2>,
    /// `e[k+1..=k+N]` when cut from a recorded rollout, otherwise empty.
    pub labels: Vec<f64>,
}

impl TubeWindow {
    pub fn new(
        hist: &HistoryBuffer,
        z_plan: &[Vec2],
        v_plan: &[Vec2],
        cfg: &TubeModelConfig,
    ) -> Result<Self> {
        let (h, n) = (cfg.history, cfg.horizon);
        if hist.len() != h {
            return Err(Error::shape(format!(
                "history has {} entries, model expects {h}",
                hist.len()
            )));
        }
        if z_plan.len() != n + 1 || v_plan.len() != n {
            return Err(Error::shape(format!(
                "plan has {} positions and {} inputs, model expects {} and {n}",
                z_plan.len(),
                v_plan.len(),
                n + 1
            )));
        }
        Ok(Self {
            e_hist: hist.errors().collect(),
            z: hist
                .positions()
                .copied()
                .chain(z_plan.iter().copied())
                .collect(),
            v: hist
                .inputs()
                .copied()
                .chain(v_plan.iter().copied())
                .collect(),
            labels: Vec::new(),
        })
    }

    /// Window anchored at step `k` of a record; `errors` are the record's errors.
    pub fn from_record(
        record: &RolloutRecord,
        errors: &[f64],
        k: usize,
        h: usize,
        n: usize,
    ) -> Result<Self> {
        if k < h || k + n > record.steps() {
            return Err(Error::shape(format!(
                "window k={k} with H={h}, N={n} does not fit a {}-step record",
                record.steps()
            )));
        }
        Ok(Self {
            e_hist: errors[k + 1 - h..=k].to_vec(),
            z: (k - h..=k + n).map(|i| record.z_at(i)).collect(),
            v: (k - h..k + n).map(|i| record.v_at(i)).collect(),
            labels: errors[k + 1..=k + n].to_vec(),
        })
    }

    pub fn current_error(&self) -> f64 {
        *self.e_hist.last().expect("non-empty history")
    }

    fn check(&self, cfg: &TubeModelConfig) -> Result<()> {
        let (h, n) = (cfg.history, cfg.horizon);
        if self.e_hist.len() != h || self.z.len() != h + n + 1 || self.v.len() != h + n {
            return Err(Error::shape("window does not match the tube configuration"));
        }
        Ok(())
    }

    /// Measured errors followed by `N` open slots for predictions.
    fn error_track(&self, n: usize) -> Vec<f64> {
        let mut t = self.e_hist.clone();
        t.resize(self.e_hist.len() + n, 0.0);
        t
    }
}

fn write_oneshot(cfg: &TubeModelConfig, win: &TubeWindow, out: &mut [f64]) {
    let h = cfg.history;
    let anchor = if cfg.canonicalize {
        win.z[h]
    } else {
        Vec2::zeros()
    };
    out[..h].copy_from_slice(&win.e_hist);
    let mut o = h;
    for z in &win.z {
        out[o] = z.x - anchor.x;
        out[o + 1] = z.y - anchor.y;
        o += 2;
    }
    for v in &win.v {
        out[o] = v.x;
        out[o + 1] = v.y;
        o += 2;
    }
}

/// Features for recursive step `s`, which predicts `w[k+s+1]`.
fn write_recursive(
    cfg: &TubeModelConfig,
    win: &TubeWindow,
    track: &[f64],
    s: usize,
    out: &mut [f64],
) {
    let h = cfg.history;
    let anchor = if cfg.canonicalize {
        win.z[h + s]
    } else {
        Vec2::zeros()
    };
    out[..h].copy_from_slice(&track[s..s + h]);
    let mut o = h;
    for z in &win.z[s + 2..=s + h + 1] {
        out[o] = z.x - anchor.x;
        out[o + 1] = z.y - anchor.y;
        o += 2;
    }
    for v in &win.v[s + 1..=s + h] {
        out[o] = v.x;
        out[o + 1] = v.y;
        o += 2;
    }
    out[o] = s as f64 / cfg.horizon as f64;
}

/// Raw (unstandardized) one-shot feature vector.
pub fn assemble_features_oneshot(
    hist: &HistoryBuffer,
    z_plan: &[Vec2],
    v_plan: &[Vec2],
    cfg: &TubeModelConfig,
) -> Result<Vec<f64>> {
    let cfg = TubeModelConfig {
        mode: TubeMode::OneShot,
        ..cfg.clone()
    };
    let win = TubeWindow::new(hist, z_plan, v_plan, &cfg)?;
    let mut out = vec![0.0; cfg.feature_dim()];
    write_oneshot(&cfg, &win, &mut out);
    Ok(out)
}

/// Raw feature vector of recursive step `s` given the error track
/// (`H` measured errors followed by predictions).
pub fn assemble_features_recursive(
    win: &TubeWindow,
    track: &[f64],
    s: usize,
    cfg: &TubeModelConfig,
) -> Result<Vec<f64>> {
    let cfg = TubeModelConfig {
        mode: TubeMode::Recursive,
        ..cfg.clone()
    };
    win.check(&cfg)?;
    if s >= cfg.horizon || track.len() < s + cfg.history {
        return Err(Error::shape("recursive step outside the horizon"));
    }
    let mut out = vec![0.0; cfg.feature_dim()];
    write_recursive(&cfg, win, track, s, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeModel {
    cfg: TubeModelConfig,
    net: Mlp,
    input_norm: Standardizer,
    out_scale: f64,
}

impl TubeModel {
    pub fn from_parts(
        cfg: TubeModelConfig,
        net: Mlp,
        input_norm: Standardizer,
        out_scale: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if net.input_dim() != cfg.feature_dim() || net.output_dim() != cfg.output_dim() {
            return Err(Error::shape(format!(
                "network is {}->{}, configuration needs {}->{}",
                net.input_dim(),
                net.output_dim(),
                cfg.feature_dim(),
                cfg.output_dim()
            )));
        }
        if input_norm.dim() != cfg.feature_dim() || input_norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::shape(
                "input normalization does not match the feature layout",
            ));
        }
        if !(out_scale > 0.0 && out_scale.is_finite()) {
            return Err(Error::invalid("output scale must be > 0"));
        }
        Ok(Self {
            cfg,
            net,
            input_norm,
            out_scale,
        })
    }

    /// Randomly initialized model with identity normalization.
    pub fn untrained<R: Rng + ?Sized>(
        cfg: TubeModelConfig,
        hidden: &[usize],
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![cfg.feature_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(cfg.output_dim());
        let net = Mlp::random(&sizes, beta, rng)?;
        let norm = Standardizer::identity(cfg.feature_dim());
        Self::from_parts(cfg, net, norm, 1.0)
    }

    pub fn cfg(&self) -> &TubeModelConfig {
        &self.cfg
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_norm(&self) -> &Standardizer {
        &self.input_norm
    }

    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }

    fn normalized(&self, raw: &mut [f64]) {
        self.input_norm.apply_in_place(raw);
    }

    /// Predicts `w[k..=k+N]` for every window.
    pub fn predict_windows(&self, windows: &[TubeWindow]) -> Result<Vec<Vec<f64>>> {
        for w in windows {
            w.check(&self.cfg)?;
        }
        let (h, n, dim) = (self.cfg.history, self.cfg.horizon, self.cfg.feature_dim());
        let b = windows.len();
        let mut x = DMatrix::zeros(dim, b);
        match self.cfg.mode {
            TubeMode::OneShot => {
                for (c, win) in windows.iter().enumerate() {
                    let slice = &mut x.as_mut_slice()[c * dim..(c + 1) * dim];
                    write_oneshot(&self.cfg, win, slice);
                    self.normalized(slice);
                }
                let tape = self.net.forward_batch(x)?;
                let out = tape.output();
                Ok(windows
                    .iter()
                    .enumerate()
                    .map(|(c, win)| {
                        let mut w = Vec::with_capacity(n + 1);
                        w.push(win.current_error());
                        w.extend((0..n).map(|i| self.out_scale * out[(i, c)]));
                        w
                    })
                    .collect())
            }
            TubeMode::Recursive => {
                let mut tracks: Vec<Vec<f64>> = windows.iter().map(|w| w.error_track(n)).collect();
                for s in 0..n {
                    let mut x = DMatrix::zeros(dim, b);
                    for (c, win) in windows.iter().enumerate() {
                        let slice = &mut x.as_mut_slice()[c * dim..(c + 1) * dim];
                        write_recursive(&self.cfg, win, &tracks[c], s, slice);
                        self.normalized(slice);
                    }
                    let tape = self.net.forward_batch(x)?;
                    for (c, t) in tracks.iter_mut().enumerate() {
                        t[h + s] = self.out_scale * tape.output()[(0, c)];
                    }
                }
                Ok(tracks.into_iter().map(|t| t[h - 1..].to_vec()).collect())
            }
        }
    }

    pub fn predict(
        &self,
        hist: &HistoryBuffer,
        z_plan: &[Vec2],
        v_plan: &[Vec2],
    ) -> Result<TubePrediction> {
        let win = TubeWindow::new(hist, z_plan, v_plan, &self.cfg)?;
        let w = self.predict_windows(std::slice::from_ref(&win))?.remove(0);
        Ok(TubePrediction { w })
    }
}

fn require_mode(model: &TubeModel, mode: TubeMode) -> Result<()> {
    if model.cfg.mode != mode {
        return Err(Error::invalid(format!(
            "model is configured as {}, called as {}",
            model.cfg.mode.as_str(),
            mode.as_str()
        )));
    }
    Ok(())
}

/// Single-call prediction of the whole horizon; `w[0]` is the measured error.
pub fn predict_oneshot(
    model: &TubeModel,
    hist: &HistoryBuffer,
    z_plan: &[Vec2],
    v_plan: &[Vec2],
) -> Result<TubePrediction> {
    require_mode(model, TubeMode::OneShot)?;
    model.predict(hist, z_plan, v_plan)
}

/// Stepwise prediction feeding earlier outputs back as error history.
pub fn predict_recursive(
    model: &TubeModel,
    hist: &HistoryBuffer,
    z_plan: &[Vec2],
    v_plan: &[Vec2],
) -> Result<TubePrediction> {
    require_mode(model, TubeMode::Recursive)?;
    model.predict(hist, z_plan, v_plan)
}

pub fn correctness_rate(w: &[f64], e: &[f64]) -> Result<f64> {
    if w.len() != e.len() {
        return Err(Error::shape(format!(
            "w has {} entries, e has {}",
            w.len(),
            e.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::shape("correctness of an empty sequence"));
    }
    Ok(w.iter().zip(e).filter(|(w, e)| w >= e).count() as f64 / w.len() as f64)
}

/// Mean slack `w - e` over the indices where the tube is correct.
pub fn mec(w: &[f64], e: &[f64]) -> Result<f64> {
    if w.len() != e.len() {
        return Err(Error::shape(format!(
            "w has {} entries, e has {}",
            w.len(),
            e.len()
        )));
    }
    let (sum, count) = w
        .iter()
        .zip(e)
        .filter(|(w, e)| w >= e)
        .fold((0.0, 0usize), |(s, c), (w, e)| (s + (w - e), c + 1));
    if count == 0 {
        return Err(Error::NoCorrectIndices);
    }
    Ok(sum / count as f64)
}

/// Mini-batch loss and parameter gradient, both averaged over windows.
///
/// Residuals are measured in units of the model's output scale. In recursive
/// mode `frozen` replaces the fed-back predictions with fixed values.
pub fn batch_loss_grad(
    model: &TubeModel,
    windows: &[TubeWindow],
    huber_delta: f64,
    feedback: FeedbackGradient,
) -> Result<(f64, Vec<f64>)> {
    loss_impl(model, windows, huber_delta, feedback, None, true)
}

/// Loss only; `frozen[b]` (if given) pins the fed-back values of window `b`.
pub fn batch_loss(
    model: &TubeModel,
    windows: &[TubeWindow],
    huber_delta: f64,
    frozen: Option<&[Vec<f64>]>,
) -> Result<f64> {
    loss_impl(
        model,
        windows,
        huber_delta,
        FeedbackGradient::Stop,
        frozen,
        false,
    )
    .map(|(l, _)| l)
}

fn loss_impl(
    model: &TubeModel,
    windows: &[TubeWindow],
    delta: f64,
    feedback: FeedbackGradient,
    frozen: Option<&[Vec<f64>]>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let cfg = &model.cfg;
    let (h, n, dim) = (cfg.history, cfg.horizon, cfg.feature_dim());
    let b = windows.len();
    if b == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    for w in windows {
        w.check(cfg)?;
        if w.labels.len() != n {
            return Err(Error::shape("training windows need N labels"));
        }
    }
    let s_out = model.out_scale;
    let inv_b = 1.0 / b as f64;
    let alpha = cfg.alpha;
    let labels: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| w.labels.iter().map(|e| e / s_out).collect())
        .collect();

    match cfg.mode {
        TubeMode::OneShot => {
            let mut x = DMatrix::zeros(dim, b);
            for (c, win) in windows.iter().enumerate() {
                let slice = &mut x.as_mut_slice()[c * dim..(c + 1) * dim];
                write_oneshot(cfg, win, slice);
                model.normalized(slice);
            }
            let tape = model.net.forward_batch(x)?;
            let mut g = DMatrix::zeros(n, b);
            let mut loss = 0.0;
            for c in 0..b {
                let u: Vec<f64> = tape.output().column(c).iter().copied().collect();
                let (l, gu) = quantile_loss_grad(&u, &labels[c], alpha, delta)?;
                loss += l * inv_b;
                for i in 0..n {
                    g[(i, c)] = gu[i] * inv_b;
                }
            }
            if !want_grad {
                return Ok((loss, Vec::new()));
            }
            let (grads, _) = model.net.backward_batch(&tape, &g)?;
            Ok((loss, grads))
        }
        TubeMode::Recursive => {
            let mut tracks: Vec<Vec<f64>> = windows.iter().map(|w| w.error_track(n)).collect();
            // feedback slots, indexed [s][window]
            let mut slots: Vec<Vec<TapeSection>> = Vec::with_capacity(n);
            let mut tapes = Vec::with_capacity(n);
            let mut u = vec![vec![0.0; n]; b];
            for s in 0..n {
                let mut x = DMatrix::zeros(dim, b);
                for (c, win) in windows.iter().enumerate() {
                    let slice = &mut x.as_mut_slice()[c * dim..(c + 1) * dim];
                    write_recursive(cfg, win, &tracks[c], s, slice);
                    model.normalized(slice);
                }
                let tape = model.net.forward_batch(x)?;
                let mut row = Vec::with_capacity(b);
                for c in 0..b {
                    let out = tape.output()[(0, c)];
                    u[c][s] = out;
                    let fed = match frozen {
                        Some(f) => f[c][s],
                        None => s_out * out,
                    };
                    tracks[c][h + s] = fed;
                    let live = TapeSection::live(vec![fed]);
                    row.push(match feedback {
                        FeedbackGradient::Full if frozen.is_none() => live,
                        _ => stop_gradient(&live),
                    });
                }
                slots.push(row);
                tapes.push(tape);
            }
            let mut loss = 0.0;
            let mut du = vec![vec![0.0; n]; b];
            for c in 0..b {
                let (l, g) = quantile_loss_grad(&u[c], &labels[c], alpha, delta)?;
                loss += l * inv_b;
                for (d, g) in du[c].iter_mut().zip(g) {
                    *d = g * inv_b;
                }
            }
            if !want_grad {
                return Ok((loss, Vec::new()));
            }
            // dL/d(fed-back value) accumulated from later steps
            let mut dfed = vec![vec![0.0; n]; b];
            let mut grads = vec![0.0; model.net.num_params()];
            for s in (0..n).rev() {
                let mut g = DMatrix::zeros(1, b);
                for c in 0..b {
                    g[(0, c)] = du[c][s] + s_out * dfed[c][s];
                }
                let (gp, gx) = model.net.backward_batch(&tapes[s], &g)?;
                for (a, v) in grads.iter_mut().zip(&gp) {
                    *a += v;
                }
                // error-window entries of step s sit at track[s..s+h]
                for c in 0..b {
                    for i in 0..h {
                        let t = s + i;
                        if t < h {
                            continue;
                        }
                        let raw = gx[(i, c)] / model.input_norm.std[i];
                        dfed[c][t - h] += slots[t - h][c].route(&[raw])[0];
                    }
                }
            }
            Ok((loss, grads))
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

struct WindowSampler<'a> {
    data: &'a Dataset,
    errors: Vec<Vec<f64>>,
    h: usize,
    n: usize,
    k_max: usize,
}

impl<'a> WindowSampler<'a> {
    fn new(data: &'a Dataset, h: usize, n: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let steps = data.records.iter().map(|r| r.steps()).min().unwrap_or(0);
        if steps < h + n {
            return Err(Error::Dataset(format!(
                "records have {steps} steps, windows need at least H+N = {}",
                h + n
            )));
        }
        Ok(Self {
            errors: data.records.iter().map(|r| r.errors()).collect(),
            data,
            h,
            n,
            k_max: steps - n,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TubeWindow {
        let r = rng.gen_range(0..self.data.len());
        let k = rng.gen_range(self.h..=self.k_max);
        TubeWindow::from_record(&self.data.records[r], &self.errors[r], k, self.h, self.n)
            .expect("window in range")
    }
}

fn fit_normalization<R: Rng + ?Sized>(
    cfg: &TubeModelConfig,
    sampler: &WindowSampler,
    rng: &mut R,
) -> Standardizer {
    let dim = cfg.feature_dim();
    let rows: Vec<Vec<f64>> = (0..NORM_SAMPLES)
        .map(|_| {
            let win = sampler.sample(rng);
            let mut out = vec![0.0; dim];
            match cfg.mode {
                TubeMode::OneShot => write_oneshot(cfg, &win, &mut out),
                TubeMode::Recursive => {
                    // teacher-forced track: true errors in the prediction slots
                    let mut track = win.e_hist.clone();
                    track.extend_from_slice(&win.labels);
                    let s = rng.gen_range(0..cfg.horizon);
                    write_recursive(cfg, &win, &track, s, &mut out);
                }
            }
            out
        })
        .collect();
    Standardizer::fit(dim, rows.iter().map(|r| r.as_slice()))
}

/// Fits a tube model by minimizing the quantile loss over sampled windows.
pub fn train_tube_model(
    train: &Dataset,
    cfg: &TubeModelConfig,
    tcfg: &TrainConfig,
) -> Result<(TubeModel, TrainLog)> {
    cfg.validate()?;
    tcfg.validate()?;
    if (tcfg.alpha - cfg.alpha).abs() > 0.0 {
        return Err(Error::invalid(format!(
            "training alpha {} differs from model alpha {}",
            tcfg.alpha, cfg.alpha
        )));
    }
    let sampler = WindowSampler::new(train, cfg.history, cfg.horizon)?;
    let mut init_rng = rng::stream(tcfg.seed, &[INIT_TAG]);
    let mut model = TubeModel::untrained(cfg.clone(), &tcfg.hidden, tcfg.beta, &mut init_rng)?;
    model.input_norm = fit_normalization(cfg, &sampler, &mut rng::stream(tcfg.seed, &[NORM_TAG]));
    let mean_err = sampler.errors.iter().flatten().sum::<f64>()
        / sampler.errors.iter().map(Vec::len).sum::<usize>() as f64;
    model.out_scale = mean_err.max(1e-6);

    let mut batch_rng = rng::stream(tcfg.seed, &[BATCH_TAG]);
    let mut adam = AdamState::new(model.net.num_params());
    let total = tcfg.epochs * tcfg.steps_per_epoch;
    let mut log = TrainLog::default();
    let mut t = 0;
    for epoch in 0..tcfg.epochs {
        let mut sum = 0.0;
        let lr_start = tcfg.lr_at(t, total);
        for _ in 0..tcfg.steps_per_epoch {
            let batch: Vec<TubeWindow> = (0..tcfg.batch_size)
                .map(|_| sampler.sample(&mut batch_rng))
                .collect();
            let (loss, mut grads) =
                batch_loss_grad(&model, &batch, tcfg.huber_delta, tcfg.feedback_gradient)?;
            if !loss.is_finite() {
                return Err(Error::Dataset(format!(
                    "training loss became non-finite at step {t}"
                )));
            }
            clip_grad_norm(&mut grads, tcfg.grad_clip_norm);
            adam_step(
                model.net.params_mut(),
                &grads,
                &mut adam,
                tcfg.lr_at(t, total),
            )?;
            sum += loss;
            t += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: sum / tcfg.steps_per_epoch as f64,
            learning_rate: lr_start,
        });
    }
    model.net.round_to_f32();
    Ok((model, log))
}

/// Holdout metrics over predicted indices `k+1..=k+N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of all (window, index) pairs with `w >= e`.
    pub correctness: f64,
    /// Mean over records of each record's correctness.
    pub per_trajectory_correctness: f64,
    pub mec: f64,
    pub points: usize,
}

/// Evaluates windows `k = k_min, k_min + stride, ...` of every record;
/// `k_min` is raised to `H` if smaller.
pub fn evaluate(
    model: &TubeModel,
    data: &Dataset,
    stride: usize,
    k_min: usize,
) -> Result<EvalMetrics> {
    let (h, n) = (model.cfg.history, model.cfg.horizon);
    let sampler = WindowSampler::new(data, h, n)?;
    let stride = stride.max(1);
    let k_min = k_min.max(h);
    if k_min > sampler.k_max {
        return Err(Error::Dataset(
            "no evaluation windows fit the records".into(),
        ));
    }
    let mut all_w = Vec::new();
    let mut all_e = Vec::new();
    let mut per_record = Vec::with_capacity(data.len());
    for (r, rec) in data.records.iter().enumerate() {
        let windows: Vec<TubeWindow> = (k_min..=sampler.k_max)
            .step_by(stride)
            .map(|k| TubeWindow::from_record(rec, &sampler.errors[r], k, h, n))
            .collect::<Result<_>>()?;
        let preds = model.predict_windows(&windows)?;
        let (mut hit, mut tot) = (0usize, 0usize);
        for (win, w) in windows.iter().zip(&preds) {
            for (wi, ei) in w[1..].iter().zip(&win.labels) {
                hit += (wi >= ei) as usize;
                tot += 1;
                all_w.push(*wi);
                all_e.push(*ei);
            }
        }
        per_record.push(hit as f64 / tot as f64);
    }
    Ok(EvalMetrics {
        correctness: correctness_rate(&all_w, &all_e)?,
        per_trajectory_correctness: per_record.iter().sum::<f64>() / per_record.len() as f64,
        mec: mec(&all_w, &all_e)?,
        points: all_w.len(),
    })
}

/// First-order tube model around a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeLinearization {
    pub w: Vec<f64>,
    /// `(N+1) x 2(N+1)`, columns `(x, y)` per plan node.
    pub jz: DMatrix<f64>,
    /// `(N+1) x 2N`.
    pub jv: DMatrix<f64>,
}

/// Predicted tube and its Jacobians with respect to the whole window:
/// `(w, dw/dZ, dw/dV)` over all `H+N+1` positions and `H+N` inputs.
pub fn window_jacobian(
    model: &TubeModel,
    win: &TubeWindow,
) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let cfg = &model.cfg;
    win.check(cfg)?;
    let (h, n, dim) = (cfg.history, cfg.horizon, cfg.feature_dim());
    let nz = 2 * (h + n + 1);
    let nv = 2 * (h + n);
    let std = &model.input_norm.std;
    let s_out = model.out_scale;
    let mut jz = DMatrix::zeros(n + 1, nz);
    let mut jv = DMatrix::zeros(n + 1, nv);
    let mut w = Vec::with_capacity(n + 1);
    w.push(win.current_error());

    match cfg.mode {
        TubeMode::OneShot => {
            let mut raw = vec![0.0; dim];
            write_oneshot(cfg, win, &mut raw);
            model.normalized(&mut raw);
            let x = DMatrix::from_fn(dim, n, |r, _| raw[r]);
            let tape = model.net.forward_batch(x)?;
            w.extend((0..n).map(|i| s_out * tape.output()[(i, 0)]));
            let (_, gx) = model.net.backward_batch(&tape, &DMatrix::identity(n, n))?;
            for i in 0..n {
                let g = |f: usize| s_out * gx[(f, i)] / std[f];
                let mut anchor = [0.0; 2];
                for j in 0..h + n + 1 {
                    for c in 0..2 {
                        let d = g(h + 2 * j + c);
                        jz[(i + 1, 2 * j + c)] += d;
                        anchor[c] += d;
                    }
                }
                if cfg.canonicalize {
                    jz[(i + 1, 2 * h)] -= anchor[0];
                    jz[(i + 1, 2 * h + 1)] -= anchor[1];
                }
                let off = h + nz;
                for j in 0..nv {
                    jv[(i + 1, j)] = g(off + j);
                }
            }
        }
        TubeMode::Recursive => {
            let mut track = win.error_track(n);
            for s in 0..n {
                let mut raw = vec![0.0; dim];
                write_recursive(cfg, win, &track, s, &mut raw);
                model.normalized(&mut raw);
                let tape = model
                    .net
                    .forward_batch(DMatrix::from_column_slice(dim, 1, &raw))?;
                let ws = s_out * tape.output()[(0, 0)];
                track[h + s] = ws;
                w.push(ws);
                let (_, gx) = model
                    .net
                    .backward_batch(&tape, &DMatrix::from_element(1, 1, 1.0))?;
                let g = |f: usize| s_out * gx[(f, 0)] / std[f];
                let row = s + 1;
                let mut anchor = [0.0; 2];
                for i in 0..h {
                    let j = s + 2 + i;
                    for c in 0..2 {
                        let d = g(h + 2 * i + c);
                        jz[(row, 2 * j + c)] += d;
                        anchor[c] += d;
                    }
                }
                if cfg.canonicalize {
                    jz[(row, 2 * (h + s))] -= anchor[0];
                    jz[(row, 2 * (h + s) + 1)] -= anchor[1];
                }
                for i in 0..h {
                    let j = s + 1 + i;
                    for c in 0..2 {
                        jv[(row, 2 * j + c)] += g(h + 2 * h + 2 * i + c);
                    }
                }
                // chain through fed-back predictions
                for i in 0..h {
                    let t = s + i;
                    if t < h {
                        continue;
                    }
                    let ge = g(i);
                    let src = t - h + 1;
                    if ge != 0.0 {
                        for col in 0..nz {
                            jz[(row, col)] += ge * jz[(src, col)];
                        }
                        for col in 0..nv {
                            jv[(row, col)] += ge * jv[(src, col)];
                        }
                    }
                }
            }
        }
    }
    Ok((w, jz, jv))
}

/// Tube prediction and its Jacobians with respect to the plan.
pub fn linearize_tube_dynamics(
    model: &TubeModel,
    hist: &HistoryBuffer,
    z_plan: &[Vec2],
    v_plan: &[Vec2],
) -> Result<TubeLinearization> {
    let win = TubeWindow::new(hist, z_plan, v_plan, &model.cfg)?;
    let h = model.cfg.history;
    let n = model.cfg.horizon;
    let (w, jz, jv) = window_jacobian(model, &win)?;
    Ok(TubeLinearization {
        w,
        jz: jz.columns(2 * h, 2 * (n + 1)).clone_owned(),
        jv: jv.columns(2 * h, 2 * n).clone_owned(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    endianness: String,
    layer_sizes: Vec<usize>,
    hidden_activation: crate::neural::Activation,
    output_activation: crate::neural::Activation,
    n_params: usize,
    tube: TubeModelConfig,
    input_norm: Standardizer,
    out_scale: f64,
}

/// Writes `model.json` and `params.f32` into `dir`.
pub fn save_model(model: &TubeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        endianness: "little".into(),
        layer_sizes: model.net.sizes().to_vec(),
        hidden_activation: model.net.hidden_activation(),
        output_activation: model.net.output_activation(),
        n_params: model.net.num_params(),
        tube: model.cfg.clone(),
        input_norm: model.input_norm.clone(),
        out_scale: model.out_scale,
    };
    let meta_path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let mut buf = Vec::with_capacity(16 + 4 * model.net.num_params());
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&(model.net.num_params() as u64).to_le_bytes());
    for p in model.net.params() {
        buf.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let p = dir.join("params.f32");
    fs::write(&p, buf).map_err(|e| Error::io(&p, e))
}

pub fn load_model(dir: &Path) -> Result<TubeModel> {
    let meta_path = dir.join("model.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let p = dir.join("params.f32");
    let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if raw.len() < 16 || &raw[..8] != PARAM_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", p.display())));
    }
    let count = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
    let payload = &raw[16..];
    if count != meta.n_params {
        return Err(Error::shape(format!(
            "params file holds {count} values, metadata says {}",
            meta.n_params
        )));
    }
    if payload.len() < 4 * count {
        return Err(Error::Truncated(format!(
            "{}: {} of {} bytes",
            p.display(),
            payload.len(),
            4 * count
        )));
    }
    if payload.len() > 4 * count {
        return Err(Error::shape(format!("{}: trailing bytes", p.display())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut net = Mlp::with_activations(
        &meta.layer_sizes,
        meta.hidden_activation,
        meta.output_activation,
    )?;
    net.set_params(&values)?;
    TubeModel::from_parts(meta.tube, net, meta.input_norm, meta.out_scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub histories: Vec<usize>,
    pub modes: Vec<TubeMode>,
    pub holdout_frac: f64,
    pub split_seed: u64,
    pub eval_stride: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            histories: vec![1, 5, 10, 25],
            modes: vec![TubeMode::OneShot, TubeMode::Recursive],
            holdout_frac: 0.2,
            split_seed: 7,
            eval_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub history: usize,
    pub mode: TubeMode,
    pub correctness: f64,
    pub per_trajectory_correctness: f64,
    pub mec: f64,
}

/// Trains one model per `(H, mode)` with shared seeds and evaluates each on
/// the same holdout windows. Returns rows plus the trained models.
pub fn history_sweep(
    data: &Dataset,
    base: &TubeModelConfig,
    tcfg: &TrainConfig,
    sweep: &SweepConfig,
) -> Result<Vec<(SweepRow, TubeModel)>> {
    if sweep.histories.is_empty() || sweep.modes.is_empty() {
        return Err(Error::invalid(
            "sweep needs at least one history and one mode",
        ));
    }
    let (train, hold) = split_dataset(data, sweep.holdout_frac, sweep.split_seed)?;
    let k_min = *sweep.histories.iter().max().expect("non-empty");
    let jobs: Vec<(usize, TubeMode)> = sweep
        .histories
        .iter()
        .flat_map(|&h| sweep.modes.iter().map(move |&m| (h, m)))
        .collect();
    jobs.par_iter()
        .map(|&(h, mode)| {
            let cfg = TubeModelConfig {
                history: h,
                mode,
                ..base.clone()
            };
            let (model, _) = train_tube_model(&train, &cfg, tcfg)?;
            let m = evaluate(&model, &hold, sweep.eval_stride, k_min)?;
            Ok((
                SweepRow {
                    history: h,
                    mode,
                    correctness: m.correctness,
                    per_trajectory_correctness: m.per_trajectory_correctness,
                    mec: m.mec,
                },
                model,
            ))
        })
        .collect()
}
