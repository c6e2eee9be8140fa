//! Randomized rollout generation and the on-disk dataset format.
//!
//! A dataset directory holds `meta.json` plus four little-endian binary files:
//! `index.bin` (per-record env id, seed, step count) and the flat `f32`
//! arrays `z.f32`, `v.f32`, `proj.f32`. Each binary file starts with an
//! 8-byte magic and a `u64` element count.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sim::{self, planner_step_f32, TrackerParams, TrackerState, Vec2};

pub const FORMAT_VERSION: u32 = 1;

const ARRAY_MAGIC: &[u8; 8] = b"TMPCF32\0";
const INDEX_MAGIC: &[u8; 8] = b"TMPCIDX\0";
const ENV_TAG: u64 = 0xE4E4;
const REC_TAG: u64 = 0x5EC0;

/// Shaping of the random planner inputs.
///
/// Each segment picks a mode: hold the current velocity (`hold_prob`), turn
/// to a random direction at a random speed (`turn_prob`), stop
/// (`stop_prob`), or, with the remaining probability, dash in a random
/// direction at full speed. Speeds are measured in the infinity norm so that
/// every sample stays inside the box `[-v_bar, v_bar]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceGenConfig {
    pub trajectory_length: usize,
    pub v_bar: f64,
    pub segment_len_range: [usize; 2],
    pub hold_prob: f64,
    pub turn_prob: f64,
    pub stop_prob: f64,
    pub seed: u64,
}

impl Default for ReferenceGenConfig {
    fn default() -> Self {
        Self {
            trajectory_length: 200,
            v_bar: 0.2,
            segment_len_range: [5, 40],
            hold_prob: 0.2,
            turn_prob: 0.35,
            stop_prob: 0.15,
            seed: 0,
        }
    }
}

impl ReferenceGenConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.hold_prob, self.turn_prob, self.stop_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(
                "reference mode probabilities must lie in [0, 1]",
            ));
        }
        if probs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "reference mode probabilities must sum to <= 1",
            ));
        }
        let [lo, hi] = self.segment_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(
                "segment_len_range must satisfy 1 <= min <= max",
            ));
        }
        if !(self.v_bar >= 0.0 && self.v_bar.is_finite()) {
            return Err(Error::invalid("v_bar must be finite and >= 0"));
        }
        if self.trajectory_length == 0 {
            return Err(Error::invalid("trajectory_length must be >= 1"));
        }
        Ok(())
    }

    /// Checks that records are long enough for history `h` and horizon `n`.
    pub fn validate_for(&self, h: usize, n: usize) -> Result<()> {
        self.validate()?;
        if self.trajectory_length < h + n + 1 {
            return Err(Error::invalid(format!(
                "trajectory_length {} is shorter than H + N + 1 = {}",
                self.trajectory_length,
                h + n + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub len: usize,
    pub velocity: Vec2,
}

fn random_box_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let d = Vec2::new(theta.cos(), theta.sin());
    d / d.x.abs().max(d.y.abs())
}

/// Draws piecewise-constant segments covering at least `trajectory_length` steps.
pub fn sample_segments<R: Rng + ?Sized>(cfg: &ReferenceGenConfig, rng: &mut R) -> Vec<Segment> {
    let [lo, hi] = cfg.segment_len_range;
    let mut out = Vec::new();
    let mut covered = 0;
    let mut current = Vec2::zeros();
    while covered < cfg.trajectory_length {
        let len = rng.gen_range(lo..=hi);
        let u: f64 = rng.gen();
        if u < cfg.hold_prob {
            // keep `current`
        } else if u < cfg.hold_prob + cfg.turn_prob {
            let speed = rng.gen_range(0.0..=1.0) * cfg.v_bar;
            current = random_box_direction(rng) * speed;
        } else if u < cfg.hold_prob + cfg.turn_prob + cfg.stop_prob {
            current = Vec2::zeros();
        } else {
            current = random_box_direction(rng) * cfg.v_bar;
        }
        out.push(Segment {
            len,
            velocity: current,
        });
        covered += len;
    }
    out
}

/// Piecewise-constant velocity sequence smoothed by a trailing 3-step average
/// (starting from rest).
pub fn sample_reference<R: Rng + ?Sized>(cfg: &ReferenceGenConfig, rng: &mut R) -> Vec<Vec2> {
    let raw: Vec<Vec2> = sample_segments(cfg, rng)
        .into_iter()
        .flat_map(|s| std::iter::repeat_n(s.velocity, s.len))
        .take(cfg.trajectory_length)
        .collect();
    (0..raw.len())
        .map(|k| {
            let at = |i: isize| {
                if i < 0 {
                    Vec2::zeros()
                } else {
                    raw[i as usize]
                }
            };
            let k = k as isize;
            let mut m = (at(k) + at(k - 1) + at(k - 2)) / 3.0;
            // keep the box exact under rounding
            m.x = m.x.clamp(-cfg.v_bar, cfg.v_bar);
            m.y = m.y.clamp(-cfg.v_bar, cfg.v_bar);
            m
        })
        .collect()
}

/// Absolute sampling ranges for the randomized tracker parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationConfig {
    pub tau: [f64; 2],
    pub kp: [f64; 2],
    pub kd: [f64; 2],
    pub kf: [f64; 2],
    pub cp: [f64; 2],
    pub cv: [f64; 2],
    pub cf: [f64; 2],
    pub ca: [f64; 2],
    pub sigma: [f64; 2],
    /// Each bias component is uniform in `[-bias_max, bias_max]`.
    pub bias_max: f64,
    pub substeps: usize,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            tau: [0.2, 0.3],
            kp: [3.6, 4.4],
            kd: [1.8, 2.2],
            kf: [0.9, 1.1],
            cp: [0.5, 0.5],
            cv: [1.0, 1.0],
            cf: [0.3, 0.3],
            ca: [1.5, 1.5],
            sigma: [0.004, 0.006],
            bias_max: 0.05,
            substeps: 10,
        }
    }
}

impl RandomizationConfig {
    /// Zero-width ranges at the given nominal parameters.
    pub fn fixed(nominal: &TrackerParams) -> Self {
        let p = |x: f64| [x, x];
        Self {
            tau: p(nominal.tau),
            kp: p(nominal.kp),
            kd: p(nominal.kd),
            kf: p(nominal.kf),
            cp: p(nominal.cp),
            cv: p(nominal.cv),
            cf: p(nominal.cf),
            ca: p(nominal.ca),
            sigma: p(nominal.sigma),
            bias_max: nominal.bias[0].abs().max(nominal.bias[1].abs()),
            substeps: nominal.substeps,
        }
    }

    fn ranges(&self) -> [(&'static str, [f64; 2]); 9] {
        [
            ("tau", self.tau),
            ("kp", self.kp),
            ("kd", self.kd),
            ("kf", self.kf),
            ("cp", self.cp),
            ("cv", self.cv),
            ("cf", self.cf),
            ("ca", self.ca),
            ("sigma", self.sigma),
        ]
    }

    /// Ranges must be ordered, nonnegative, and contain `nominal`.
    pub fn validate(&self, nominal: &TrackerParams) -> Result<()> {
        let nominal_values = [
            nominal.tau,
            nominal.kp,
            nominal.kd,
            nominal.kf,
            nominal.cp,
            nominal.cv,
            nominal.cf,
            nominal.ca,
            nominal.sigma,
        ];
        for ((name, [lo, hi]), nom) in self.ranges().into_iter().zip(nominal_values) {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(Error::invalid(format!(
                    "randomization range {name} = [{lo}, {hi}] is invalid"
                )));
            }
            if !(lo <= nom && nom <= hi) {
                return Err(Error::invalid(format!(
                    "randomization range {name} = [{lo}, {hi}] does not contain nominal {nom}"
                )));
            }
        }
        if self.tau[0] <= 0.0 {
            return Err(Error::invalid("tau range must be > 0"));
        }
        if !(self.bias_max >= 0.0) || self.substeps == 0 {
            return Err(Error::invalid("bias_max must be >= 0 and substeps >= 1"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    let [lo, hi] = range;
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Samples one environment's tracker parameters for planner step `dt`.
pub fn sample_env_params<R: Rng + ?Sized>(
    cfg: &RandomizationConfig,
    dt: f64,
    rng: &mut R,
) -> TrackerParams {
    let b = [-cfg.bias_max, cfg.bias_max];
    TrackerParams {
        tau: draw(cfg.tau, rng),
        kp: draw(cfg.kp, rng),
        kd: draw(cfg.kd, rng),
        kf: draw(cfg.kf, rng),
        cp: draw(cfg.cp, rng),
        cv: draw(cfg.cv, rng),
        cf: draw(cfg.cf, rng),
        ca: draw(cfg.ca, rng),
        sigma: draw(cfg.sigma, rng),
        bias: [draw(b, rng), draw(b, rng)],
        dt_sim: dt / cfg.substeps as f64,
        substeps: cfg.substeps,
    }
}

/// Initial-condition sets: `z0` uniform in a box, tracker at rest with a
/// position offset uniform in a disc of radius `e0_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConditionConfig {
    pub z0_min: [f64; 2],
    pub z0_max: [f64; 2],
    pub e0_max: f64,
}

impl Default for InitialConditionConfig {
    fn default() -> Self {
        Self {
            z0_min: [-5.0, -5.0],
            z0_max: [5.0, 5.0],
            e0_max: 0.05,
        }
    }
}

impl InitialConditionConfig {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec2, TrackerState) {
        let z0 = Vec2::new(
            draw([self.z0_min[0], self.z0_max[0]], rng),
            draw([self.z0_min[1], self.z0_max[1]], rng),
        );
        let radius = self.e0_max * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let offset = Vec2::new(theta.cos(), theta.sin()) * radius;
        (z0, TrackerState::at_rest(z0 + offset))
    }
}

/// One planner trajectory and the tracked projections, stored as `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub z: Vec<[f32; 2]>,
    pub v: Vec<[f32; 2]>,
    pub proj: Vec<[f32; 2]>,
    pub env_id: u64,
    pub seed: u64,
}

impl RolloutRecord {
    pub fn steps(&self) -> usize {
        self.v.len()
    }

    /// Tracking error at every stored index `0..=steps`.
    pub fn errors(&self) -> Vec<f64> {
        self.z
            .iter()
            .zip(&self.proj)
            .map(|(z, p)| {
                let dx = z[0] as f64 - p[0] as f64;
                let dy = z[1] as f64 - p[1] as f64;
                dx.hypot(dy)
            })
            .collect()
    }

    pub fn z_at(&self, k: usize) -> Vec2 {
        Vec2::new(self.z[k][0] as f64, self.z[k][1] as f64)
    }

    pub fn v_at(&self, k: usize) -> Vec2 {
        Vec2::new(self.v[k][0] as f64, self.v[k][1] as f64)
    }

    /// Largest deviation from the stored planner recursion; zero for valid records.
    pub fn recursion_defect(&self, dt: f64) -> f32 {
        let dt = dt as f32;
        (0..self.steps())
            .map(|k| {
                let next = planner_step_f32(self.z[k], self.v[k], dt);
                (next[0] - self.z[k + 1][0])
                    .abs()
                    .max((next[1] - self.z[k + 1][1]).abs())
            })
            .fold(0.0, f32::max)
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.v.len();
        if self.z.len() != n + 1 || self.proj.len() != n + 1 {
            return Err(Error::shape(format!(
                "record has v={} z={} proj={}",
                n,
                self.z.len(),
                self.proj.len()
            )));
        }
        Ok(())
    }
}

fn to_f32(v: &Vec2) -> [f32; 2] {
    [v.x as f32, v.y as f32]
}

fn to_f64(v: [f32; 2]) -> Vec2 {
    Vec2::new(v[0] as f64, v[1] as f64)
}

/// Simulates the tracker following the planner inputs `v_seq` from `(z0, x0)`.
///
/// The planner trajectory is produced by the `f32` single-integrator
/// recursion, and the tracker follows exactly those stored references.
pub fn rollout<R: Rng + ?Sized>(
    params: &TrackerParams,
    v_seq: &[Vec2],
    z0: Vec2,
    x0: TrackerState,
    dt: f64,
    rng: &mut R,
) -> Result<RolloutRecord> {
    let n = v_seq.len();
    let dt32 = dt as f32;
    let v: Vec<[f32; 2]> = v_seq.iter().map(to_f32).collect();
    let mut z = Vec::with_capacity(n + 1);
    z.push(to_f32(&z0));
    for k in 0..n {
        z.push(planner_step_f32(z[k], v[k], dt32));
    }
    let mut proj = Vec::with_capacity(n + 1);
    let mut x = x0;
    proj.push(to_f32(&sim::project(&x)));
    for k in 0..n {
        x = sim::tracker_step(&x, &to_f64(z[k]), &to_f64(v[k]), params, rng);
        if !x.is_finite() {
            return Err(Error::Dataset(format!(
                "tracker state became non-finite at step {k}"
            )));
        }
        proj.push(to_f32(&sim::project(&x)));
    }
    Ok(RolloutRecord {
        z,
        v,
        proj,
        env_id: 0,
        seed: 0,
    })
}

/// Everything needed to reproduce a dataset besides the counts and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub dt: f64,
    /// Nominal plant; every randomization range must contain its values.
    pub nominal: TrackerParams,
    pub reference: ReferenceGenConfig,
    pub randomization: RandomizationConfig,
    pub initial: InitialConditionConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            nominal: TrackerParams::default(),
            reference: ReferenceGenConfig::default(),
            randomization: RandomizationConfig::default(),
            initial: InitialConditionConfig::default(),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be > 0"));
        }
        self.reference.validate()?;
        self.randomization.validate(&self.nominal)
    }

    /// Same configuration with a different velocity bound.
    pub fn with_v_bar(&self, v_bar: f64) -> Self {
        let mut out = self.clone();
        out.reference.v_bar = v_bar;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub endianness: String,
    pub dt: f64,
    pub v_bar: f64,
    pub trajectory_length: usize,
    pub n_records: usize,
    pub master_seed: u64,
    pub config: DatagenConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<RolloutRecord>,
}

/// Parameters of environment `env_id` under `master_seed`.
pub fn env_params(cfg: &DatagenConfig, master_seed: u64, env_id: u64) -> TrackerParams {
    let mut rng = rng::stream(master_seed, &[ENV_TAG, env_id]);
    sample_env_params(&cfg.randomization, cfg.dt, &mut rng)
}

/// Seed and stream used for record `record_id` of environment `env_id`.
pub fn record_stream(master_seed: u64, env_id: u64, record_id: u64) -> (u64, Stream) {
    let keys = [REC_TAG, env_id, record_id];
    (
        rng::derive_seed(master_seed, &keys),
        rng::stream(master_seed, &keys),
    )
}

/// Builds one record: reference, initial conditions, then the tracked rollout,
/// all drawn from the record's own stream.
pub fn generate_record(
    cfg: &DatagenConfig,
    master_seed: u64,
    env_id: u64,
    record_id: u64,
) -> Result<RolloutRecord> {
    let params = env_params(cfg, master_seed, env_id);
    let (seed, mut rng) = record_stream(master_seed, env_id, record_id);
    let v_seq = sample_reference(&cfg.reference, &mut rng);
    let (z0, x0) = cfg.initial.sample(&mut rng);
    let mut rec = rollout(&params, &v_seq, z0, x0, cfg.dt, &mut rng)?;
    rec.env_id = env_id;
    rec.seed = seed;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordFailure {
    pub env_id: u64,
    pub record_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub dataset: Dataset,
    pub failures: Vec<RecordFailure>,
    /// Simulated tracker substeps, including failed records.
    pub substeps: u64,
}

/// Generates `n_envs * refs_per_env` records on `workers` threads.
///
/// Output is identical for any worker count: each record draws from a stream
/// keyed by `(master_seed, env_id, record_id)` and results are collected in
/// index order. Failed records are reported and left out.
pub fn generate_dataset(
    n_envs: usize,
    refs_per_env: usize,
    cfg: &DatagenConfig,
    master_seed: u64,
    workers: usize,
) -> Result<GenerationReport> {
    if n_envs == 0 || refs_per_env == 0 {
        return Err(Error::invalid("n_envs and refs_per_env must be >= 1"));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let total = n_envs * refs_per_env;
    let results: Vec<(u64, u64, Result<RolloutRecord>)> = pool.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let env = (i / refs_per_env) as u64;
                let rec = (i % refs_per_env) as u64;
                (env, rec, generate_record(cfg, master_seed, env, rec))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (env_id, record_id, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(RecordFailure {
                env_id,
                record_id,
                reason: e.to_string(),
            }),
        }
    }
    let substeps = (total * cfg.reference.trajectory_length * cfg.randomization.substeps) as u64;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        dt: cfg.dt,
        v_bar: cfg.reference.v_bar,
        trajectory_length: cfg.reference.trajectory_length,
        n_records: records.len(),
        master_seed,
        config: cfg.clone(),
    };
    Ok(GenerationReport {
        dataset: Dataset { meta, records },
        failures,
        substeps,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All per-step tracking errors, record by record.
    pub fn all_errors(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.errors()).collect()
    }

    /// Lower empirical quantile of every per-step error in the dataset.
    pub fn error_quantile(&self, q: f64) -> Result<f64> {
        empirical_quantile(&self.all_errors(), q)
    }

    /// SHA-256 over the metadata document and every array payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).expect("meta serializes"));
        for r in &self.records {
            h.update(r.env_id.to_le_bytes());
            h.update(r.seed.to_le_bytes());
            for arr in [&r.z, &r.v, &r.proj] {
                for p in arr.iter() {
                    h.update(p[0].to_le_bytes());
                    h.update(p[1].to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn with_records(&self, records: Vec<RolloutRecord>) -> Dataset {
        let mut meta = self.meta.clone();
        meta.n_records = records.len();
        Dataset { meta, records }
    }
}

/// Smallest sample whose empirical CDF reaches `q`.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Dataset("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Ok(sorted[idx])
}

/// Seeded record-level partition into `(train, holdout)`.
pub fn split_dataset(d: &Dataset, holdout_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let n = d.len();
    if n < 2 {
        return Err(Error::Dataset("need at least two records to split".into()));
    }
    let n_hold = ((holdout_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5911]));
    let mut hold: Vec<usize> = idx[..n_hold].to_vec();
    let mut train: Vec<usize> = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    let pick = |ids: &[usize]| {
        ids.iter()
            .map(|&i| d.records[i].clone())
            .collect::<Vec<_>>()
    };
    Ok((d.with_records(pick(&train)), d.with_records(pick(&hold))))
}

fn write_array(path: &Path, arrays: impl Iterator<Item = [f32; 2]>, count: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + count * 8);
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&((count * 2) as u64).to_le_bytes());
    for p in arrays {
        buf.extend_from_slice(&p[0].to_le_bytes());
        buf.extend_from_slice(&p[1].to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Validates magic and declared count; returns the payload.
fn read_payload<'a>(
    path: &Path,
    buf: &'a [u8],
    magic: &[u8; 8],
    item_bytes: usize,
) -> Result<(u64, &'a [u8])> {
    let name = path.display().to_string();
    if buf.len() < 16 {
        if buf.len() >= 8 && &buf[..8] != magic {
            return Err(Error::Format(format!("{name}: bad magic header")));
        }
        return Err(Error::Truncated(name));
    }
    if &buf[..8] != magic {
        return Err(Error::Format(format!("{name}: bad magic header")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
    let payload = &buf[16..];
    let expected = count as usize * item_bytes;
    if payload.len() < expected {
        return Err(Error::Truncated(name));
    }
    if payload.len() > expected {
        return Err(Error::shape(format!(
            "{name}: {} trailing bytes after declared payload",
            payload.len() - expected
        )));
    }
    Ok((count, payload))
}

pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    for r in &d.records {
        r.check_shape()?;
        if r.steps() != d.meta.trajectory_length {
            return Err(Error::shape(
                "record length differs from meta.trajectory_length",
            ));
        }
    }
    if d.meta.n_records != d.records.len() {
        return Err(Error::shape(
            "meta.n_records differs from the number of records",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_vec_pretty(&d.meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::File::create(&meta_path)
        .and_then(|mut f| f.write_all(&meta))
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut idx = Vec::with_capacity(16 + 24 * d.len());
    idx.extend_from_slice(INDEX_MAGIC);
    idx.extend_from_slice(&(d.len() as u64).to_le_bytes());
    for r in &d.records {
        idx.extend_from_slice(&r.env_id.to_le_bytes());
        idx.extend_from_slice(&r.seed.to_le_bytes());
        idx.extend_from_slice(&(r.steps() as u64).to_le_bytes());
    }
    let idx_path = dir.join("index.bin");
    fs::write(&idx_path, idx).map_err(|e| Error::io(&idx_path, e))?;

    let n = d.meta.trajectory_length;
    let m = d.len();
    write_array(
        &dir.join("z.f32"),
        d.records.iter().flat_map(|r| r.z.iter().copied()),
        m * (n + 1),
    )?;
    write_array(
        &dir.join("v.f32"),
        d.records.iter().flat_map(|r| r.v.iter().copied()),
        m * n,
    )?;
    write_array(
        &dir.join("proj.f32"),
        d.records.iter().flat_map(|r| r.proj.iter().copied()),
        m * (n + 1),
    )?;
    Ok(())
}

fn decode_points(payload: &[u8]) -> Vec<[f32; 2]> {
    payload
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            ]
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_raw = read_file(&meta_path)?;
    let probe: serde_json::Value =
        serde_json::from_slice(&meta_raw).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    let version = probe
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("meta.json lacks format_version".into()))?
        as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta: DatasetMeta =
        serde_json::from_value(probe).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    if meta.endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported endianness {}",
            meta.endianness
        )));
    }

    let idx_path = dir.join("index.bin");
    let idx_raw = read_file(&idx_path)?;
    let (count, idx_payload) = read_payload(&idx_path, &idx_raw, INDEX_MAGIC, 24)?;
    if count as usize != meta.n_records {
        return Err(Error::shape(format!(
            "index lists {count} records, meta says {}",
            meta.n_records
        )));
    }
    let n = meta.trajectory_length;
    let m = meta.n_records;
    let load = |name: &str, per_record: usize| -> Result<Vec<[f32; 2]>> {
        let path = dir.join(name);
        let raw = read_file(&path)?;
        let (floats, payload) = read_payload(&path, &raw, ARRAY_MAGIC, 4)?;
        if floats as usize != m * per_record * 2 {
            return Err(Error::shape(format!(
                "{name} holds {floats} floats, expected {} for {m} records",
                m * per_record * 2
            )));
        }
        Ok(decode_points(payload))
    };
    let z = load("z.f32", n + 1)?;
    let v = load("v.f32", n)?;
    let proj = load("proj.f32", n + 1)?;

    let mut records = Vec::with_capacity(m);
    for (i, entry) in idx_payload.chunks_exact(24).enumerate() {
        let word = |o: usize| u64::from_le_bytes(entry[o..o + 8].try_into().expect("8 bytes"));
        let steps = word(16) as usize;
        if steps != n {
            return Err(Error::shape(format!(
                "record {i} has {steps} steps, meta says {n}"
            )));
        }
        records.push(RolloutRecord {
            z: z[i * (n + 1)..(i + 1) * (n + 1)].to_vec(),
            v: v[i * n..(i + 1) * n].to_vec(),
            proj: proj[i * (n + 1)..(i + 1) * (n + 1)].to_vec(),
            env_id: word(0),
            seed: word(8),
        });
    }
    Ok(Dataset { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(len: usize) -> DatagenConfig {
        let mut cfg = DatagenConfig::default();
        cfg.reference.trajectory_length = len;
        cfg
    }

    #[test]
    fn stop_only_reference_is_zero() {
        let cfg = ReferenceGenConfig {
            hold_prob: 0.0,
            turn_prob: 0.0,
            stop_prob: 1.0,
            ..ReferenceGenConfig::default()
        };
        let seq = sample_reference(&cfg, &mut rng::stream(3, &[]));
        assert_eq!(seq.len(), cfg.trajectory_length);
        assert!(seq.iter().all(|v| *v == Vec2::zeros()));
    }

    #[test]
    fn reference_respects_box() {
        let cfg = ReferenceGenConfig {
            trajectory_length: 10_000,
            v_bar: 0.2,
            ..ReferenceGenConfig::default()
        };
        let seq = sample_reference(&cfg, &mut rng::stream(4, &[]));
        let max = seq
            .iter()
            .map(|v| v.x.abs().max(v.y.abs()))
            .fold(0.0, f64::max);
        assert!(max <= 0.2, "max component {max}");
        assert!(max > 0.19);
    }

    #[test]
    fn segment_lengths_fill_configured_range() {
        let cfg = ReferenceGenConfig {
            segment_len_range: [3, 8],
            ..ReferenceGenConfig::default()
        };
        let mut rng = rng::stream(5, &[]);
        let mut counts = [0usize; 9];
        let mut total = 0;
        for _ in 0..1000 {
            for s in sample_segments(&cfg, &mut rng) {
                assert!((3..=8).contains(&s.len));
                counts[s.len] += 1;
                total += 1;
            }
        }
        // uniform over 6 lengths: each bin within 15% of its share
        let share = total as f64 / 6.0;
        for c in &counts[3..=8] {
            assert!((*c as f64 - share).abs() < 0.15 * share, "{counts:?}");
        }
    }

    #[test]
    fn reference_validation() {
        let bad = ReferenceGenConfig {
            hold_prob: 0.6,
            turn_prob: 0.6,
            ..ReferenceGenConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ReferenceGenConfig::default().validate_for(25, 25).is_ok());
        let short = ReferenceGenConfig {
            trajectory_length: 50,
            ..ReferenceGenConfig::default()
        };
        assert!(short.validate_for(25, 25).is_err());
    }

    #[test]
    fn zero_width_ranges_give_nominal() {
        let nominal = TrackerParams::default();
        let cfg = RandomizationConfig::fixed(&nominal);
        let p = sample_env_params(&cfg, 0.1, &mut rng::stream(1, &[]));
        assert_eq!(p, nominal);
    }

    #[test]
    fn bias_range_containment() {
        let cfg = RandomizationConfig::default();
        let mut rng = rng::stream(2, &[]);
        for _ in 0..10_000 {
            let p = sample_env_params(&cfg, 0.1, &mut rng);
            assert!(p.bias[0].abs() <= 0.05 && p.bias[1].abs() <= 0.05);
            assert!(p.validate(0.1).is_ok());
        }
    }

    #[test]
    fn tau_is_uniform_on_its_range() {
        // Kolmogorov-Smirnov statistic against U(0.2, 0.3); 1% critical value ~ 1.63/sqrt(n).
        let cfg = RandomizationConfig::default();
        let mut rng = rng::stream(9, &[]);
        let mut taus: Vec<f64> = (0..10_000)
            .map(|_| sample_env_params(&cfg, 0.1, &mut rng).tau)
            .collect();
        taus.sort_by(f64::total_cmp);
        let n = taus.len() as f64;
        let d = taus
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let f = (t - 0.2) / 0.1;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn equilibrium_rollout_has_zero_error() {
        let params = TrackerParams {
            sigma: 0.0,
            ..TrackerParams::default()
        };
        let z0 = Vec2::new(0.25, -0.5);
        let v_seq = vec![Vec2::zeros(); 30];
        let rec = rollout(
            &params,
            &v_seq,
            z0,
            TrackerState::at_rest(z0),
            0.1,
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_eq!(rec.z, rec.proj);
        assert!(rec.errors().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn rollout_satisfies_recursion() {
        let cfg = small_cfg(200);
        let rec = generate_record(&cfg, 11, 0, 0).unwrap();
        assert_eq!(rec.recursion_defect(cfg.dt), 0.0);
        assert_eq!(rec.z.len(), 201);
    }

    #[test]
    fn rollout_matches_manual_composition() {
        let cfg = small_cfg(200);
        let params = env_params(&cfg, 5, 2);
        let (_, mut rng) = record_stream(5, 2, 3);
        let v_seq = sample_reference(&cfg.reference, &mut rng);
        let (z0, x0) = cfg.initial.sample(&mut rng);
        let rec = rollout(&params, &v_seq, z0, x0, cfg.dt, &mut rng.clone()).unwrap();

        let mut x = x0;
        let mut z = [z0.x as f32, z0.y as f32];
        for k in 0..200 {
            let v = [v_seq[k].x as f32, v_seq[k].y as f32];
            assert_eq!(rec.v[k], v);
            let zr = Vec2::new(z[0] as f64, z[1] as f64);
            let vr = Vec2::new(v[0] as f64, v[1] as f64);
            x = sim::tracker_step(&x, &zr, &vr, &params, &mut rng);
            z = planner_step_f32(z, v, 0.1);
            assert_eq!(rec.z[k + 1], z);
            assert_eq!(rec.proj[k + 1], [x.p.x as f32, x.p.y as f32]);
        }
    }

    #[test]
    fn generation_counts_and_single_record() {
        let cfg = small_cfg(60);
        let report = generate_dataset(64, 4, &cfg, 1, 1).unwrap();
        assert_eq!(report.dataset.len(), 256);
        assert!(report.failures.is_empty());

        let one = generate_dataset(1, 1, &cfg, 99, 1).unwrap();
        assert_eq!(
            one.dataset.records[0],
            generate_record(&cfg, 99, 0, 0).unwrap()
        );
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cfg = small_cfg(60);
        let a = generate_dataset(8, 3, &cfg, 42, 1).unwrap().dataset;
        let b = generate_dataset(8, 3, &cfg, 42, 8).unwrap().dataset;
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn environments_get_distinct_params() {
        let cfg = small_cfg(60);
        assert_ne!(env_params(&cfg, 1, 0), env_params(&cfg, 1, 1));
        assert_eq!(env_params(&cfg, 1, 3), env_params(&cfg, 1, 3));
    }

    #[test]
    fn speed_coverage_has_both_regimes() {
        let cfg = small_cfg(200);
        let d = generate_dataset(32, 2, &cfg, 3, 1).unwrap().dataset;
        let speeds: Vec<f64> = d
            .records
            .iter()
            .flat_map(|r| (0..r.steps()).map(move |k| r.v_at(k).norm()))
            .collect();
        assert!(speeds.iter().any(|s| *s > 0.9 * 0.2));
        assert!(speeds.iter().any(|s| *s < 0.1 * 0.2));
    }

    #[test]
    fn split_examples() {
        let cfg = small_cfg(60);
        let d = generate_dataset(10, 1, &cfg, 1, 1).unwrap().dataset;
        let (tr, ho) = split_dataset(&d, 0.2, 7).unwrap();
        assert_eq!((tr.len(), ho.len()), (8, 2));
        let mut seeds: Vec<u64> = tr
            .records
            .iter()
            .chain(&ho.records)
            .map(|r| r.seed)
            .collect();
        seeds.sort_unstable();
        let mut all: Vec<u64> = d.records.iter().map(|r| r.seed).collect();
        all.sort_unstable();
        assert_eq!(seeds, all);
        assert_eq!(split_dataset(&d, 0.2, 7).unwrap().1, ho);

        let two = Dataset {
            meta: d.meta.clone(),
            records: d.records[..2].to_vec(),
        };
        let (a, b) = split_dataset(&two, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_dataset(&d, 0.0, 0).is_err());
    }

    #[test]
    fn quantile_is_lower_empirical() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(empirical_quantile(&xs, 0.9).unwrap(), 0.9);
        assert_eq!(empirical_quantile(&xs, 0.5).unwrap(), 0.5);
        assert_eq!(empirical_quantile(&xs, 0.0).unwrap(), 0.1);
        assert!(empirical_quantile(&[], 0.5).is_err());
    }
}
