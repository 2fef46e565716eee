//! Independent oracles shared by the integration tests. Ranks and fits come
//! from nalgebra's pivoted QR, not the crate's SVD-based routines.
#![allow(dead_code)]

use ddsc_core::{DataMatrices, Matrix, Phase, RunLog, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `t` exact transitions of `(a, b)` under Gaussian inputs.
pub fn trajectory(a: &Matrix, b: &Matrix, t: usize, rng: &mut ChaCha8Rng) -> DataMatrices {
    let (n, m) = (a.nrows(), b.ncols());
    let mut x = Matrix::zeros(n, t + 1);
    x.set_column(0, &gaussian_vec(rng, n));
    let u = gaussian(rng, m, t);
    for k in 0..t {
        let next = a * x.column(k) + b * u.column(k);
        x.set_column(k + 1, &next);
    }
    DataMatrices::new(x, u).unwrap()
}

/// `[X₋; U₋]`
pub fn regressor(d: &DataMatrices) -> Matrix {
    let (n, m, t) = (d.n(), d.m(), d.transitions());
    let mut z = Matrix::zeros(n + m, t);
    z.rows_mut(0, n).copy_from(&d.x().columns(0, t));
    z.rows_mut(n, m).copy_from(d.u_minus());
    z
}

pub fn x_plus(d: &DataMatrices) -> Matrix {
    d.x().columns(1, d.transitions()).into_owned()
}

/// Orthonormal bases of the column space of `m` and of its orthogonal
/// complement, from a column-pivoted QR; a pivot counts when it exceeds
/// `rel` times the largest.
pub fn split_range(m: &Matrix, rel: f64) -> (Matrix, Matrix) {
    let rows = m.nrows();
    // Zero columns up to a square matrix so that Q is complete.
    let mut padded = Matrix::zeros(rows, m.ncols().max(rows));
    padded.columns_mut(0, m.ncols()).copy_from(m);
    let qr = padded.col_piv_qr();
    let (q, r) = (qr.q(), qr.r());
    let pivots: Vec<f64> = (0..rows).map(|i| r[(i, i)].abs()).collect();
    let top = pivots.iter().copied().fold(0.0, f64::max);
    let rank = pivots.iter().filter(|&&v| top > 0.0 && v > rel * top).count();
    (q.columns(0, rank).into_owned(), q.columns(rank, rows - rank).into_owned())
}

pub fn rank(m: &Matrix, rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    split_range(m, rel).0.ncols()
}

/// Least-squares `[A B]` fit of both datasets at once; compatible when the
/// residual is at most `rel` times the size of the targets.
pub fn jointly_fit(d1: &DataMatrices, d2: &DataMatrices, rel: f64) -> bool {
    let z = hstack(&regressor(d1), &regressor(d2));
    let xp = hstack(&x_plus(d1), &x_plus(d2));
    if z.ncols() == 0 {
        return true;
    }
    // The residual is the part of X₊ outside the row space of Z.
    let (_, complement) = split_range(&z.transpose(), 1e-12);
    (&xp * complement).norm() <= rel * xp.norm()
}

fn hstack(l: &Matrix, r: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(l.nrows(), l.ncols() + r.ncols());
    out.columns_mut(0, l.ncols()).copy_from(l);
    out.columns_mut(l.ncols(), r.ncols()).copy_from(r);
    out
}

/// Minimum-norm `[A₀ B₀]` fitting the data and an orthonormal basis `W` of
/// the left kernel of the regressor; every `[A₀ B₀] + Ξ Wᵀ` explains it.
pub fn sigma_parts(d: &DataMatrices) -> (Matrix, Matrix) {
    let (n, q) = (d.n(), d.n() + d.m());
    if d.transitions() == 0 {
        return (Matrix::zeros(n, q), Matrix::identity(q, q));
    }
    let z = regressor(d);
    let (range, w) = split_range(&z, 1e-9);
    // Z = range·C with C of full row rank, so [A₀ B₀] = X₊ C⁺ rangeᵀ.
    let c = range.transpose() * &z;
    let qr = c.transpose().qr();
    let r_inv = qr.r().try_inverse().unwrap();
    let c_pinv = qr.q() * r_inv.transpose();
    (x_plus(d) * c_pinv * range.transpose(), w)
}

/// `count` members of the consistent set: the nominal, then random offsets
/// of Frobenius size up to `radius`.
pub fn sample_sigma(d: &DataMatrices, count: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<(Matrix, Matrix)> {
    let n = d.n();
    let (nominal, w) = sigma_parts(d);
    (0..count)
        .map(|i| {
            let mut full = nominal.clone();
            if i > 0 && w.ncols() > 0 {
                let xi = gaussian(rng, n, w.ncols());
                let scale = radius * rng.random::<f64>() / xi.norm();
                full += xi * scale * w.transpose();
            }
            (full.columns(0, n).into_owned(), full.columns(n, d.m()).into_owned())
        })
        .collect()
}

/// Smallest eigenvalue of `λP + slack·I - (A+BK)ᵀP(A+BK)`.
pub fn decay_margin(a: &Matrix, b: &Matrix, k: &Matrix, p: &Matrix, lambda: f64, slack: f64) -> f64 {
    let cl = a + b * k;
    let mut m = p * lambda - cl.transpose() * p * &cl;
    for i in 0..m.nrows() {
        m[(i, i)] += slack;
    }
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// `ln(xᵀPx)`, rescaled so that tiny states do not underflow.
pub fn ln_quadratic(p: &Matrix, x: &Vector) -> f64 {
    let s = x.amax();
    if s == 0.0 {
        return f64::NEG_INFINITY;
    }
    let y = x / s;
    2.0 * s.ln() + (y.transpose() * p * &y)[(0, 0)].ln()
}

pub fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let k = values.len();
    if k == 0 {
        return 0.0;
    }
    if k % 2 == 1 {
        values[k / 2] as f64
    } else {
        (values[k / 2 - 1] + values[k / 2]) as f64 / 2.0
    }
}

/// Structural audit of a closed-loop log: phases alternate from a detection
/// phase, completed phases last at most `n + m` steps, the true mode is
/// never pruned and each phase resolves to the mode that was active.
pub fn audit_detection(log: &RunLog) -> Result<(), String> {
    let (n, m, h) = (log.meta.n, log.meta.m, log.horizon());
    let steps = &log.steps;
    if steps.first().map(|s| s.phase) != Some(Phase::Detect) {
        return Err("first step is not a detection step".into());
    }
    let mut starts = (Vec::new(), Vec::new());
    for t in 0..h {
        let prev = (t > 0).then(|| steps[t - 1].phase);
        if prev != Some(steps[t].phase) {
            match steps[t].phase {
                Phase::Detect => starts.0.push(t),
                Phase::Stabilize => starts.1.push(t),
            }
        }
    }
    if starts.0 != log.meta.detect_starts || starts.1 != log.meta.stabilize_starts {
        return Err("phase starts disagree with the metadata".into());
    }
    for (i, &b) in starts.0.iter().enumerate() {
        let e = starts.1.get(i).copied().unwrap_or(h);
        if e <= b || starts.0.get(i + 1).is_some_and(|&next| next <= e) {
            return Err(format!("phases do not interleave at {b}"));
        }
        if e < h && e - b > n + m {
            return Err(format!("detection phase at {b} lasted {} steps", e - b));
        }
        for t in b..e {
            let s = &steps[t];
            if s.sigma_true != steps[b].sigma_true {
                return Err(format!("mode switched during detection at {t}"));
            }
            match &s.matches {
                Some(ms) if ms.contains(s.sigma_true) => {}
                _ => return Err(format!("true mode missing from the match set at {t}")),
            }
        }
        if e < h && steps[e].sigma_d != Some(steps[e - 1].sigma_true) {
            return Err(format!("phase at {b} resolved {:?}, true {}", steps[e].sigma_d, steps[e - 1].sigma_true));
        }
    }
    Ok(())
}

/// Timers from their closed form with a direct minimum over `s ≤ t`.
/// Starts come from the metadata and activity from the phases.
pub fn timers_oracle(log: &RunLog, tau: f64, n0: f64, eta: f64, t0: f64) -> (Vec<f64>, Vec<f64>) {
    let h = log.horizon();
    let count_n = |t: usize| log.meta.detect_starts.iter().filter(|&&s| s < t).count() as f64;
    let count_m = |t: usize| (0..t).filter(|&s| log.steps[s].phase == Phase::Detect).count() as f64;
    let sd: Vec<f64> = (0..=h).map(|t| count_n(t) - t as f64 / tau).collect();
    let sa: Vec<f64> = (0..=h).map(|t| count_m(t) - eta * t as f64).collect();
    let timer = |s: &[f64], offset: f64| -> Vec<f64> {
        (0..s.len())
            .map(|t| offset + s[..=t].iter().copied().fold(f64::INFINITY, f64::min) - s[t])
            .collect()
    };
    (timer(&sd, n0), timer(&sa, t0))
}

/// Recurrences and ranges of the timers at absolute tolerance `tol`.
pub fn audit_timers(log: &RunLog, tau_d: &[f64], tau_a: &[f64], p: (f64, f64, f64, f64), tol: f64) -> Result<(), String> {
    let (tau, n0, eta, t0) = p;
    let h = log.horizon();
    let starts: std::collections::BTreeSet<usize> = log.meta.detect_starts.iter().copied().collect();
    for t in 0..=h {
        if tau_d[t] < -tol || tau_d[t] > n0 + tol || tau_a[t] < -tol || tau_a[t] > t0 + tol {
            return Err(format!("timer out of range at {t}: {} {}", tau_d[t], tau_a[t]));
        }
    }
    for t in 0..h {
        let (dd, da) = (tau_d[t + 1] - tau_d[t], tau_a[t + 1] - tau_a[t]);
        let d_ok = if starts.contains(&t) {
            (dd - (1.0 / tau - 1.0)).abs() <= tol
        } else {
            dd >= -tol && dd <= 1.0 / tau + tol
        };
        let a_ok = if log.steps[t].phase == Phase::Detect {
            (da - (eta - 1.0)).abs() <= tol
        } else {
            da >= -tol && da <= eta + tol
        };
        if !d_ok || !a_ok {
            return Err(format!("recurrence broken at {t}: {dd} {da}"));
        }
    }
    Ok(())
}
