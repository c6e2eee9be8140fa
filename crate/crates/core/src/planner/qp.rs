//! Dense ADMM solver for convex quadratic programs
//!
//! ```text
//! minimize    1/2 x'Px + q'x + sum_i c_i max(0, l_i - a_i'x)
//! subject to  l <= Ax <= u
//! ```
//!
//! Rows with `c_i > 0` are soft: their lower bound is replaced by the L1
//! penalty, which is the explicit-slack formulation with the slack
//! eliminated. Operator-splitting iterations with over-relaxation and per-row
//! step sizes, followed by an optional polish that re-solves the KKT system on
//! the guessed active set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const POLISH_INTERVAL: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iters: 400,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            polish: true,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("qp.max_iters must be >= 1"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0 && self.eps_abs >= 0.0 && self.eps_rel >= 0.0) {
            return Err(Error::invalid(
                "qp rho and sigma must be > 0, tolerances >= 0",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::invalid("qp.alpha must lie in (0, 2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    /// Per-row L1 weight on falling below `l`; zero keeps the bound hard.
    pub soft: DVector<f64>,
}

impl QpProblem {
    /// A problem with every row hard.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Self {
        let soft = DVector::zeros(l.len());
        Self {
            p,
            q,
            a,
            l,
            u,
            soft,
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    fn is_soft(&self, i: usize) -> bool {
        self.soft[i] > 0.0
    }

    fn check(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.p.shape() != (n, n)
            || self.a.shape() != (m, n)
            || self.u.len() != m
            || self.soft.len() != m
        {
            return Err(Error::shape("qp matrices have inconsistent shapes"));
        }
        if self
            .l
            .iter()
            .zip(self.u.iter())
            .any(|(l, u)| l > u || l.is_nan() || u.is_nan())
        {
            return Err(Error::invalid("qp bounds must satisfy l <= u"));
        }
        if (0..m).any(|i| {
            !(self.soft[i] >= 0.0 && self.soft[i].is_finite())
                || (self.is_soft(i) && !self.l[i].is_finite())
        }) {
            return Err(Error::invalid(
                "qp soft weights must be finite, >= 0 and on finite lower bounds",
            ));
        }
        if self
            .p
            .iter()
            .chain(self.q.iter())
            .chain(self.a.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Solver("non-finite qp data".into()));
        }
        Ok(())
    }

    /// Objective including the soft-row penalty.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        let penalty: f64 = (0..self.m())
            .filter(|&i| self.is_soft(i))
            .map(|i| self.soft[i] * (self.l[i] - ax[i]).max(0.0))
            .sum();
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + penalty
    }

    /// Largest violation of the hard bounds of `Ax`.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| {
                let below = if self.is_soft(i) {
                    0.0
                } else {
                    self.l[i] - ax[i]
                };
                below.max(ax[i] - self.u[i]).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Stationarity residual `||Px + q + A'y||_inf`.
    pub fn dual_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.p * x + &self.q + self.a.tr_mul(y)).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers: positive on active upper bounds, negative on active lower.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

fn row_rho(l: f64, u: f64, rho: f64) -> f64 {
    if l == f64::NEG_INFINITY && u == f64::INFINITY {
        RHO_MIN
    } else if u - l < 1e-10 {
        (RHO_EQ_SCALE * rho).min(RHO_MAX)
    } else {
        rho
    }
}

fn factor(
    prob: &QpProblem,
    sigma: f64,
    rho: &DVector<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut k = prob.p.clone();
    for i in 0..prob.n() {
        k[(i, i)] += sigma;
    }
    let scaled = DMatrix::from_fn(prob.m(), prob.n(), |r, c| rho[r] * prob.a[(r, c)]);
    k += prob.a.tr_mul(&scaled);
    k.cholesky()
        .ok_or_else(|| Error::Solver("KKT matrix is not positive definite".into()))
}

/// Solves `prob`, optionally warm-started from a primal/dual pair.
pub fn solve_qp(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution> {
    prob.check()?;
    settings.validate()?;
    let (n, m) = (prob.n(), prob.m());
    // proximal step of the row terms: box projection, or the shifted clamp of
    // the L1 penalty on soft rows
    let project = |v: &DVector<f64>, rho: &DVector<f64>| {
        DVector::from_fn(m, |i, _| {
            let (l, u, c) = (prob.l[i], prob.u[i], prob.soft[i]);
            if c > 0.0 {
                let z = if v[i] >= l {
                    v[i]
                } else if v[i] >= l - c / rho[i] {
                    l
                } else {
                    v[i] + c / rho[i]
                };
                z.min(u)
            } else {
                v[i].clamp(l, u)
            }
        })
    };

    let (mut x, mut y) = match warm {
        Some((x0, y0)) if x0.len() == n && y0.len() == m => (x0.clone(), y0.clone()),
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    let ax0 = &prob.a * &x;
    let mut z = DVector::from_fn(m, |i, _| {
        if prob.is_soft(i) {
            ax0[i].min(prob.u[i])
        } else {
            ax0[i].clamp(prob.l[i], prob.u[i])
        }
    });
    let mut rho_scalar = settings.rho;
    let mut rho = DVector::from_fn(m, |i, _| row_rho(prob.l[i], prob.u[i], rho_scalar));
    let mut chol = factor(prob, settings.sigma, &rho)?;
    let alpha = settings.alpha;

    let mut status = QpStatus::MaxIters;
    let mut iterations = 0;
    let mut early: Option<QpSolution> = None;
    let mut last_guess = Vec::new();
    let mut last_move = 1.0f64;
    for it in 1..=settings.max_iters {
        iterations = it;
        let rhs = settings.sigma * &x - &prob.q + prob.a.tr_mul(&(rho.component_mul(&z) - &y));
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &prob.a * &x_tilde;
        x = alpha * &x_tilde + (1.0 - alpha) * &x;
        let z_relaxed = alpha * &z_tilde + (1.0 - alpha) * &z;
        let z_next = project(&(&z_relaxed + y.component_div(&rho)), &rho);
        y += rho.component_mul(&(&z_relaxed - &z_next));
        z = z_next;

        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("ADMM iterates diverged".into()));
        }
        let ax = &prob.a * &x;
        let px = &prob.p * &x;
        let aty = prob.a.tr_mul(&y);
        let r_prim = (&ax - &z).amax();
        let r_dual = (&px + &prob.q + &aty).amax();
        let scale_prim = ax.amax().max(z.amax());
        let scale_dual = px.amax().max(aty.amax()).max(prob.q.amax());
        if r_prim <= settings.eps_abs + settings.eps_rel * scale_prim
            && r_dual <= settings.eps_abs + settings.eps_rel * scale_dual
        {
            status = QpStatus::Solved;
            break;
        }
        // an exact KKT point on a guessed active set ends the run early
        if settings.polish && it % POLISH_INTERVAL == 0 {
            let guess = guess_active(prob, &z, &y);
            if guess != last_guess {
                let current = QpSolution {
                    x: x.clone(),
                    y: y.clone(),
                    status,
                    iterations: it,
                    polished: false,
                    primal_residual: f64::INFINITY,
                    dual_residual: f64::INFINITY,
                };
                early = polish(prob, &guess, &current).filter(|p| {
                    p.primal_residual <= settings.eps_abs + settings.eps_rel * scale_prim
                        && p.dual_residual <= settings.eps_abs + settings.eps_rel * scale_dual
                });
                if early.is_some() {
                    break;
                }
                last_guess = guess;
            }
        }
        if settings.adaptive_rho && it % settings.adaptive_rho_interval.max(1) == 0 {
            // an exactly zero residual would otherwise send rho to a clamp
            let num = r_prim.max(settings.eps_abs) / scale_prim.max(1e-12);
            let den = r_dual.max(settings.eps_abs) / scale_dual.max(1e-12);
            let mut ratio = (num / den).sqrt();
            // reversing the previous move halves it in log scale
            if (ratio - 1.0) * (last_move - 1.0) < 0.0 {
                ratio = ratio.sqrt();
            }
            if ratio.is_finite() && !(0.2..=5.0).contains(&ratio) {
                last_move = ratio;
                rho_scalar = (rho_scalar * ratio).clamp(RHO_MIN, RHO_MAX);
                rho = DVector::from_fn(m, |i, _| row_rho(prob.l[i], prob.u[i], rho_scalar));
                chol = factor(prob, settings.sigma, &rho)?;
            }
        }
    }

    if let Some(p) = early {
        return Ok(p);
    }
    let mut sol = QpSolution {
        primal_residual: prob.primal_residual(&x),
        dual_residual: prob.dual_residual(&x, &y),
        x,
        y,
        status,
        iterations,
        polished: false,
    };
    if settings.polish {
        if let Some(p) = polish(prob, &guess_active(prob, &z, &sol.y), &sol) {
            sol = p;
        }
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowGuess {
    Lower,
    Upper,
    Equal,
    /// Soft row below its bound; multiplier pinned at minus the weight.
    Penalized,
}

/// Rows guessed from an ADMM iterate to be at a bound or penalized.
fn guess_active(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, RowGuess)> {
    let mut active = Vec::new();
    for i in 0..prob.m() {
        let (l, u, y) = (prob.l[i], prob.u[i], y[i]);
        if u - l < 1e-10 && !prob.is_soft(i) {
            active.push((i, RowGuess::Equal));
        } else if prob.is_soft(i) && z[i] < l {
            active.push((i, RowGuess::Penalized));
        } else if l.is_finite() && z[i] - l < -y {
            active.push((i, RowGuess::Lower));
        } else if u.is_finite() && u - z[i] < y {
            active.push((i, RowGuess::Upper));
        }
    }
    active
}

/// Re-solves the equality-constrained problem on a guessed active set; kept
/// only if it is a consistent KKT point at least as accurate as `sol`.
fn polish(prob: &QpProblem, guess: &[(usize, RowGuess)], sol: &QpSolution) -> Option<QpSolution> {
    let (n, m) = (prob.n(), prob.m());
    let bound_rows: Vec<(usize, RowGuess)> = guess
        .iter()
        .copied()
        .filter(|(_, g)| *g != RowGuess::Penalized)
        .collect();
    let k = bound_rows.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(n + k);
    for i in 0..n {
        rhs[i] = -prob.q[i];
    }
    for &(row, g) in guess {
        if g == RowGuess::Penalized {
            for c in 0..n {
                rhs[c] += prob.soft[row] * prob.a[(row, c)];
            }
        }
    }
    for (r, &(row, g)) in bound_rows.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = prob.a[(row, c)];
            kkt[(c, n + r)] = prob.a[(row, c)];
        }
        rhs[n + r] = if g == RowGuess::Upper {
            prob.u[row]
        } else {
            prob.l[row]
        };
    }
    let delta = 1e-11;
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..n + k {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol_vec = lu.solve(&rhs)?;
    for _ in 0..3 {
        let res = &rhs - &kkt * &sol_vec;
        sol_vec += lu.solve(&res)?;
    }
    if !sol_vec.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol_vec.rows(0, n).clone_owned();
    let mut y = DVector::zeros(m);
    for (r, &(row, g)) in bound_rows.iter().enumerate() {
        let val = sol_vec[n + r];
        // a multiplier of the wrong sign means the active-set guess is wrong
        let sign_tol = 1e-9 * (1.0 + val.abs());
        let wrong = match g {
            RowGuess::Lower => {
                val > sign_tol || (prob.is_soft(row) && val < -prob.soft[row] - sign_tol)
            }
            RowGuess::Upper => val < -sign_tol,
            _ => false,
        };
        if wrong {
            return None;
        }
        y[row] = val;
    }
    // soft rows must sit on the side of the bound their guess assumed
    let ax = &prob.a * &x;
    let penalized: Vec<usize> = guess
        .iter()
        .filter(|(_, g)| *g == RowGuess::Penalized)
        .map(|(i, _)| *i)
        .collect();
    for i in (0..m).filter(|&i| prob.is_soft(i)) {
        let tol = 1e-9 * (1.0 + prob.l[i].abs());
        let on_wrong_side = if penalized.contains(&i) {
            ax[i] > prob.l[i] + tol
        } else {
            ax[i] < prob.l[i] - tol
        };
        if on_wrong_side {
            return None;
        }
    }
    for &i in &penalized {
        y[i] = -prob.soft[i];
    }
    let primal_residual = prob.primal_residual(&x);
    let dual_residual = prob.dual_residual(&x, &y);
    if primal_residual <= sol.primal_residual.max(1e-9)
        && dual_residual <= sol.dual_residual.max(1e-9)
    {
        Some(QpSolution {
            x,
            y,
            status: QpStatus::Solved,
            iterations: sol.iterations,
            polished: true,
            primal_residual,
            dual_residual,
        })
    } else {
        None
    }
}
