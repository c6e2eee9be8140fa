//! Helpers shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tubempc::planner::qp::{QpProblem, QpSolution};

/// A strictly convex QP with 1..=6 variables and 1..=4 rows that is feasible by construction.
pub fn random_tiny_qp<R: Rng>(r: &mut R) -> QpProblem {
    let n = r.gen_range(1..=6);
    let m = r.gen_range(1..=4);
    let mroot = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
    let p = mroot.tr_mul(&mroot) + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| r.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| r.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
    let ax0 = &a * &x0;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        if r.gen_bool(0.1) {
            l[i] = ax0[i];
            u[i] = ax0[i];
            continue;
        }
        l[i] = if r.gen_bool(0.2) {
            f64::NEG_INFINITY
        } else {
            ax0[i] - r.gen_range(0.0..1.0)
        };
        u[i] = if r.gen_bool(0.2) {
            f64::INFINITY
        } else {
            ax0[i] + r.gen_range(0.0..1.0)
        };
    }
    QpProblem::new(p, q, a, l, u)
}

/// A tiny QP whose lower bounds are turned soft with probability one half.
/// Soft rows have no upper bound and may be infeasible as hard rows.
pub fn random_soft_qp<R: Rng>(r: &mut R) -> QpProblem {
    let mut prob = random_tiny_qp(r);
    for i in 0..prob.l.len() {
        if r.gen_bool(0.5) && prob.l[i].is_finite() && prob.u[i] > prob.l[i] {
            prob.l[i] += r.gen_range(0.0..2.0);
            prob.u[i] = f64::INFINITY;
            prob.soft[i] = r.gen_range(0.1..5.0);
        }
    }
    prob
}

/// Objective with the L1 penalty of soft rows, computed from the raw data.
fn penalized_objective(prob: &QpProblem, x: &DVector<f64>) -> f64 {
    let ax = &prob.a * x;
    let mut f = 0.5 * x.dot(&(&prob.p * x)) + prob.q.dot(x);
    for i in 0..prob.l.len() {
        if prob.soft[i] > 0.0 && ax[i] < prob.l[i] {
            f += prob.soft[i] * (prob.l[i] - ax[i]);
        }
    }
    f
}

/// Optimal objective by enumerating every active set and keeping the best
/// primal-feasible stationary point. A soft row is free, at its lower bound,
/// or penalized (its weight folded into the linear term).
pub fn active_set_oracle(prob: &QpProblem) -> f64 {
    let (n, m) = (prob.q.len(), prob.l.len());
    let mut best = f64::INFINITY;
    let total = 3usize.pow(m as u32);
    for code in 0..total {
        // 0 free, 1 at lower, 2 at upper (penalized on soft rows)
        let mut rows = Vec::new();
        let mut q = prob.q.clone();
        let mut c = code;
        let mut skip = false;
        for i in 0..m {
            let s = c % 3;
            c /= 3;
            let soft = prob.soft[i] > 0.0;
            match s {
                1 if prob.l[i].is_finite() => rows.push((i, prob.l[i])),
                2 if soft => {
                    assert!(prob.u[i].is_infinite(), "soft rows must be one-sided");
                    for col in 0..n {
                        q[col] -= prob.soft[i] * prob.a[(i, col)];
                    }
                }
                2 if prob.u[i].is_finite() && prob.u[i] > prob.l[i] => rows.push((i, prob.u[i])),
                0 => {}
                _ => skip = true,
            }
        }
        if skip {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        let mut rhs = DVector::zeros(n + k);
        for i in 0..n {
            rhs[i] = -q[i];
        }
        for (j, &(row, b)) in rows.iter().enumerate() {
            for col in 0..n {
                kkt[(n + j, col)] = prob.a[(row, col)];
                kkt[(col, n + j)] = prob.a[(row, col)];
            }
            rhs[n + j] = b;
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let x = sol.rows(0, n).clone_owned();
        let ax = &prob.a * &x;
        let feasible = (0..m).all(|i| {
            let lower_ok = prob.soft[i] > 0.0 || ax[i] >= prob.l[i] - 1e-9;
            lower_ok && ax[i] <= prob.u[i] + 1e-9
        });
        if feasible {
            best = best.min(penalized_objective(prob, &x));
        }
    }
    best
}

/// Largest of the stationarity, primal feasibility and complementarity
/// residuals. On soft rows the multiplier lies in `[-c, 0]`, is `0` above the
/// bound and `-c` below it.
pub fn kkt_residual(prob: &QpProblem, sol: &QpSolution) -> f64 {
    let (x, y) = (&sol.x, &sol.y);
    let stationarity = (&prob.p * x + &prob.q + prob.a.tr_mul(y)).amax();
    let ax = &prob.a * x;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..prob.l.len() {
        let c = prob.soft[i];
        if c > 0.0 {
            primal = primal.max(ax[i] - prob.u[i]);
            comp = comp.max(y[i]).max(-c - y[i]);
            let gap = ax[i] - prob.l[i];
            if gap > 0.0 {
                comp = comp.max(-y[i] * gap);
            } else {
                comp = comp.max((c + y[i]) * -gap);
            }
            continue;
        }
        primal = primal.max(prob.l[i] - ax[i]).max(ax[i] - prob.u[i]);
        if y[i] > 0.0 {
            comp = comp.max(y[i] * (prob.u[i] - ax[i]).min(1e300));
        } else if y[i] < 0.0 {
            comp = comp.max(-y[i] * (ax[i] - prob.l[i]).min(1e300));
        }
    }
    stationarity.max(primal).max(comp)
}
