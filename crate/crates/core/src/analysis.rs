//! Closed-loop stability analysis of a run log: dwell-time and
//! activation-time fits, the discrete timers, the stability condition,
//! the ISS-like bound and the per-step `W = U·V` certificate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::Phase;
use crate::error::{Error, Result};
use crate::linalg::{sym_eig_extremes, Matrix};
use crate::lmi::{compute_mu, growth_params, GainCertificate};
use crate::simulate::RunLog;

/// Relative slack on the one-step certificate inequality.
pub const CERT_REL_TOL: f64 = 1e-8;
/// Absolute tolerance on the timer recurrences.
pub const TIMER_TOL: f64 = 1e-12;

fn check_interval(log: &RunLog, ta: usize, tb: usize) -> Result<()> {
    if ta >= tb || tb > log.horizon() {
        return Err(Error::InvalidArgument(format!(
            "interval [{ta}, {tb}) not inside [0, {}]",
            log.horizon()
        )));
    }
    Ok(())
}

/// Detection phases starting in `[ta, tb)`.
pub fn count_n(log: &RunLog, ta: usize, tb: usize) -> Result<usize> {
    check_interval(log, ta, tb)?;
    Ok(log
        .meta
        .detect_starts
        .iter()
        .filter(|&&s| s >= ta && s < tb)
        .count())
}

/// Detection steps in `[ta, tb)`.
pub fn count_m(log: &RunLog, ta: usize, tb: usize) -> Result<usize> {
    check_interval(log, ta, tb)?;
    Ok((ta..tb).filter(|&t| log.detecting(t)).count())
}

/// `N(0, t)` for `t = 0..=H`.
fn prefix_starts(log: &RunLog) -> Vec<f64> {
    let h = log.horizon();
    let mut out = vec![0.0; h + 1];
    let mut k = 0usize;
    for t in 0..h {
        if log.steps[t].phase == Phase::Detect && (t == 0 || log.steps[t - 1].phase == Phase::Stabilize) {
            k += 1;
        }
        out[t + 1] = k as f64;
    }
    out
}

/// `M(0, t)` for `t = 0..=H`.
fn prefix_active(log: &RunLog) -> Vec<f64> {
    let h = log.horizon();
    let mut out = vec![0.0; h + 1];
    for t in 0..h {
        out[t + 1] = out[t] + if log.detecting(t) { 1.0 } else { 0.0 };
    }
    out
}

/// `max_{a < b} (S(b) - S(a))` for `S(t) = count(t) - rate·t`.
fn max_excess(prefix: &[f64], rate: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut running_min = prefix[0];
    for (t, &c) in prefix.iter().enumerate().skip(1) {
        let s = c - rate * t as f64;
        best = best.max(s - running_min);
        running_min = running_min.min(s);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdtPoint {
    pub tau: f64,
    pub n0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AatPoint {
    pub eta: f64,
    pub t0: f64,
}

/// Smallest `N0 ≥ 1` with `N(ta, tb) ≤ N0 + (tb - ta)/τ` on every interval
/// of the log, for each `τ ≥ 1` in the grid.
pub fn fit_adt(log: &RunLog, tau_grid: &[f64]) -> Result<Vec<AdtPoint>> {
    if log.horizon() == 0 {
        return Err(Error::InvalidArgument("empty log".into()));
    }
    let prefix = prefix_starts(log);
    tau_grid
        .iter()
        .map(|&tau| {
            if !(tau >= 1.0 && tau.is_finite()) {
                return Err(Error::InvalidArgument(format!("dwell parameter {tau} must be ≥ 1")));
            }
            Ok(AdtPoint {
                tau,
                n0: max_excess(&prefix, 1.0 / tau).max(1.0),
            })
        })
        .collect()
}

/// Smallest `T0 ≥ 0` with `M(ta, tb) ≤ T0 + η (tb - ta)` on every interval
/// of the log, for each `η ∈ [0, 1]` in the grid.
pub fn fit_aat(log: &RunLog, eta_grid: &[f64]) -> Result<Vec<AatPoint>> {
    if log.horizon() == 0 {
        return Err(Error::InvalidArgument("empty log".into()));
    }
    let prefix = prefix_active(log);
    eta_grid
        .iter()
        .map(|&eta| {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidArgument(format!("activation fraction {eta} not in [0, 1]")));
            }
            Ok(AatPoint {
                eta,
                t0: max_excess(&prefix, eta).max(0.0),
            })
        })
        .collect()
}

/// Long-run rates of the log: mean spacing of detection starts and the
/// fraction of time spent detecting.
pub fn empirical_rates(log: &RunLog) -> (f64, f64) {
    let h = log.horizon() as f64;
    let starts = log.meta.detect_starts.len().max(1) as f64;
    let active = (0..log.horizon()).filter(|&t| log.detecting(t)).count() as f64;
    ((h / starts).max(1.0), active / h)
}

/// Default grids: `τ` from 1 up to the empirical mean spacing and `η` from
/// the empirical fraction up to 1, so that the fits describe rates rather
/// than absorbing the whole log into `N0` or `T0`.
pub fn default_grids(log: &RunLog) -> (Vec<f64>, Vec<f64>) {
    let (tau_emp, eta_emp) = empirical_rates(log);
    let mut taus: Vec<f64> = (0..)
        .map(|i| 1.25f64.powi(i))
        .take_while(|&v| v < tau_emp)
        .collect();
    taus.push(tau_emp);
    let mut etas = vec![eta_emp];
    etas.extend(
        (1..=20)
            .map(|i| i as f64 * 0.05)
            .filter(|&v| v > eta_emp),
    );
    (taus, etas)
}

/// Constants that depend only on the modes and the gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryConstants {
    pub lambda: f64,
    pub lambda_u: f64,
    pub k: f64,
    pub mu: f64,
    pub lambda_bar: f64,
    pub lambda_under: f64,
}

pub fn library_constants(
    modes: &[(Matrix, Matrix)],
    certs: &[GainCertificate],
) -> Result<LibraryConstants> {
    let growth = growth_params(modes, certs, 0.0)?;
    let mu = compute_mu(certs)?;
    let mut lambda_bar = f64::NEG_INFINITY;
    let mut lambda_under = f64::INFINITY;
    for c in certs {
        let (lo, hi) = sym_eig_extremes(&c.p)?;
        lambda_bar = lambda_bar.max(hi);
        lambda_under = lambda_under.min(lo);
    }
    Ok(LibraryConstants {
        lambda: certs[0].lambda,
        lambda_u: growth.lambda_u,
        k: growth.k,
        mu,
        lambda_bar,
        lambda_under,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub lambda: f64,
    pub lambda_u: f64,
    pub k: f64,
    pub mu: f64,
    pub tau: f64,
    pub n0: f64,
    pub eta: f64,
    pub t0: f64,
    pub u_max: f64,
    pub lambda_bar: f64,
    pub lambda_under: f64,
    pub a: f64,
    pub b: f64,
    /// Transient gain `sqrt(λ̄ λ b / (λ̲ a))`.
    pub c: f64,
    /// Decay rate `sqrt(a)` of the transient.
    pub zeta: f64,
    /// Input-to-state offset; only defined when `a < 1`.
    pub r_const: Option<f64>,
    /// `k u_max²`.
    pub r: f64,
}

impl StabilityParams {
    pub fn new(
        lib: &LibraryConstants,
        u_max: f64,
        adt: AdtPoint,
        aat: AatPoint,
    ) -> Result<Self> {
        let LibraryConstants {
            lambda,
            lambda_u,
            k,
            mu,
            lambda_bar,
            lambda_under,
        } = *lib;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("invalid {what}")));
        if !(lambda > 0.0 && lambda < 1.0) {
            return bad("decay rate");
        }
        if !(lambda_u >= 1.0) || !(mu >= 1.0) || !(k > 0.0) {
            return bad("growth constants");
        }
        if !(adt.tau >= 1.0) || !(adt.n0 >= 1.0) || !(0.0..=1.0).contains(&aat.eta) || !(aat.t0 >= 0.0) {
            return bad("dwell or activation parameters");
        }
        if !(u_max >= 0.0) || !(lambda_under > 0.0) {
            return bad("input bound or certificate spectrum");
        }
        let (tau, n0, eta, t0) = (adt.tau, adt.n0, aat.eta, aat.t0);
        let a = lambda * (mu / lambda).powf(1.0 / tau) * (lambda_u / lambda).powf(eta);
        let b = (mu / lambda).powf(1.0 / tau + n0) * (lambda_u / lambda).powf(eta + t0);
        let r_const = (a < 1.0).then(|| u_max * (b * k / (lambda_under * (1.0 - a))).sqrt());
        Ok(Self {
            lambda,
            lambda_u,
            k,
            mu,
            tau,
            n0,
            eta,
            t0,
            u_max,
            lambda_bar,
            lambda_under,
            a,
            b,
            c: (lambda_bar * lambda * b / (lambda_under * a)).sqrt(),
            zeta: a.sqrt(),
            r_const,
            r: k * u_max * u_max,
        })
    }

    /// `ln(μ/λ)` and `ln(λ_u/λ)`: the exponents' bases of `U`.
    fn log_bases(&self) -> (f64, f64) {
        ((self.mu / self.lambda).ln(), (self.lambda_u / self.lambda).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `(1 - ln λ_u / ln λ) η + (1 - ln μ / ln λ) / τ`
    pub lhs: f64,
    pub holds: bool,
    pub a: f64,
    pub a_below_one: bool,
}

pub fn condition_lhs(lambda: f64, lambda_u: f64, mu: f64, tau: f64, eta: f64) -> f64 {
    let ll = lambda.ln();
    (1.0 - lambda_u.ln() / ll) * eta + (1.0 - mu.ln() / ll) / tau
}

pub fn check_condition(params: &StabilityParams) -> ConditionReport {
    let lhs = condition_lhs(params.lambda, params.lambda_u, params.mu, params.tau, params.eta);
    ConditionReport {
        lhs,
        holds: lhs < 1.0,
        a: params.a,
        a_below_one: params.a < 1.0,
    }
}

/// `t ↦ c a^{t/2} |x0| + r_const`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssBound {
    pub c: f64,
    pub a: f64,
    pub x0_norm: f64,
    pub r_const: f64,
}

impl IssBound {
    pub fn at(&self, t: usize) -> f64 {
        self.c * self.a.powf(t as f64 / 2.0) * self.x0_norm + self.r_const
    }
}

pub fn iss_bound(params: &StabilityParams, x0_norm: f64) -> Result<IssBound> {
    let Some(r_const) = params.r_const else {
        return Err(Error::ConditionUnsatisfied { a: params.a });
    };
    Ok(IssBound {
        c: params.c,
        a: params.a,
        x0_norm,
        r_const,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    pub steps: usize,
    pub violations: usize,
    /// `max_t |x(t)| / bound(t)`.
    pub worst_ratio: f64,
}

/// Compare `|x(t)|` against the bound for `t = 0..=H`.
pub fn audit_bound(log: &RunLog, bound: &IssBound) -> BoundAudit {
    let mut audit = BoundAudit {
        steps: log.horizon() + 1,
        violations: 0,
        worst_ratio: 0.0,
    };
    for t in 0..=log.horizon() {
        let (x, b) = (log.state(t).norm(), bound.at(t));
        if x > b {
            audit.violations += 1;
        }
        audit.worst_ratio = audit.worst_ratio.max(if b > 0.0 { x / b } else if x > 0.0 { f64::INFINITY } else { 0.0 });
    }
    audit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimerPair {
    pub tau_d: Vec<f64>,
    pub tau_a: Vec<f64>,
}

/// Timers `τ_d(t) = N0 + n_d(t) - (N(0,t) - t/τ)` with
/// `n_d(t) = min_{s ≤ t} (N(0,s) - s/τ)`, and `τ_a` likewise from `M`,
/// `η`, `T0`, for `t = 0..=H`. The recurrences and ranges are audited.
pub fn build_timers(log: &RunLog, params: &StabilityParams) -> Result<TimerPair> {
    let h = log.horizon();
    let n_prefix = prefix_starts(log);
    let m_prefix = prefix_active(log);
    let timer = |prefix: &[f64], rate: f64, offset: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(prefix.len());
        let mut running_min = f64::INFINITY;
        for (t, &c) in prefix.iter().enumerate() {
            let s = c - rate * t as f64;
            running_min = running_min.min(s);
            out.push(offset + running_min - s);
        }
        out
    };
    let tau_d = timer(&n_prefix, 1.0 / params.tau, params.n0);
    let tau_a = timer(&m_prefix, params.eta, params.t0);

    let violated = |t: usize, detail: String| Err(Error::RecurrenceViolated { t, detail });
    for t in 0..=h {
        if !(-TIMER_TOL..=params.n0 + TIMER_TOL).contains(&tau_d[t]) {
            return violated(t, format!("τ_d = {} outside [0, {}]", tau_d[t], params.n0));
        }
        if !(-TIMER_TOL..=params.t0 + TIMER_TOL).contains(&tau_a[t]) {
            return violated(t, format!("τ_a = {} outside [0, {}]", tau_a[t], params.t0));
        }
    }
    for t in 0..h {
        let start = n_prefix[t + 1] > n_prefix[t];
        let dd = tau_d[t + 1] - tau_d[t];
        if start {
            if (dd - (1.0 / params.tau - 1.0)).abs() > TIMER_TOL {
                return violated(t, format!("τ_d jump {dd} at a detection start"));
            }
        } else if dd < -TIMER_TOL || dd > 1.0 / params.tau + TIMER_TOL {
            return violated(t, format!("τ_d step {dd} outside [0, 1/τ]"));
        }
        let da = tau_a[t + 1] - tau_a[t];
        if log.detecting(t) {
            if (da - (params.eta - 1.0)).abs() > TIMER_TOL {
                return violated(t, format!("τ_a step {da} on a detection step"));
            }
        } else if da < -TIMER_TOL || da > params.eta + TIMER_TOL {
            return violated(t, format!("τ_a step {da} outside [0, η]"));
        }
    }
    Ok(TimerPair { tau_d, tau_a })
}

/// The mode whose certificate enters `V` at each `t = 0..=H`. Within a
/// detection phase (after its first step) this is the mode the phase
/// resolves to; at the first step of a phase it is the previous estimate.
pub fn certificate_modes(log: &RunLog) -> Vec<usize> {
    let h = log.horizon();
    let mut out: Vec<Option<usize>> = log.steps.iter().map(|s| s.sigma_d).collect();
    out.push(None);
    for (b, e) in log.detection_phases() {
        let theta = if e < h {
            log.steps[e].sigma_d
        } else {
            log.steps[h - 1]
                .matches
                .as_ref()
                .filter(|ms| ms.len() == 1)
                .and_then(|ms| ms.iter().next())
        };
        for t in b..=e {
            if t > b || b == 0 {
                out[t] = Some(theta.unwrap_or_else(|| log.steps[t.min(h - 1)].sigma_true));
            }
        }
    }
    if out[h].is_none() {
        out[h] = log.steps[h - 1].sigma_d;
    }
    out.into_iter()
        .enumerate()
        .map(|(t, m)| m.unwrap_or(log.steps[t.min(h - 1)].sigma_true))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateStep {
    pub t: usize,
    /// 1: first step of a detection phase; 2: later detection step;
    /// 3: stabilization step.
    pub case: u8,
    pub ln_w: f64,
    pub ln_w_next: f64,
    /// `ln(a W(t) + b r)`
    pub ln_rhs: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub steps: Vec<CertificateStep>,
    /// `ln W(t)`, `t = 0..=H`.
    pub ln_w: Vec<f64>,
    pub case_counts: [usize; 3],
    pub violations: Vec<usize>,
    /// `U ∈ [1, λb/a]` at every step.
    pub u_in_range: bool,
    /// `λ̲ |x(t)|² ≤ W(t)` at every step.
    pub lower_bound_holds: bool,
    /// `W(t) ≤ aᵗ W(0) + b r / (1 - a)` at every step (only when `a < 1`).
    pub comparison_holds: Option<bool>,
}

impl CertificateReport {
    pub fn all_cases_exercised(&self) -> bool {
        self.case_counts.iter().all(|&c| c > 0)
    }

    pub fn ensure(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(&i) => {
                let s = &self.steps[i];
                Err(Error::CertificateViolated {
                    t: s.t,
                    case: s.case,
                    lhs: s.ln_w_next.exp(),
                    rhs: s.ln_rhs.exp(),
                })
            }
        }
    }
}

/// `ln |x|` without underflow for tiny states.
fn ln_norm(x: &crate::linalg::Vector) -> f64 {
    let s = x.amax();
    if s == 0.0 {
        return f64::NEG_INFINITY;
    }
    s.ln() + (x / s).norm().ln()
}

fn log_add_exp(x: f64, y: f64) -> f64 {
    let m = x.max(y);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((x - m).exp() + (y - m).exp()).ln()
}

/// Evaluate `W(ξ(t+1)) ≤ a W(ξ(t)) + b r` at every step of the log, in
/// logarithms so that large `U` values do not overflow.
pub fn w_certificate(
    log: &RunLog,
    params: &StabilityParams,
    certs: &[GainCertificate],
) -> Result<CertificateReport> {
    let h = log.horizon();
    if h == 0 {
        return Err(Error::InvalidArgument("empty log".into()));
    }
    if certs.len() != log.meta.p {
        return Err(Error::Dimension("certificates do not match the log".into()));
    }
    let timers = build_timers(log, params)?;
    let modes = certificate_modes(log);
    let (lb_d, lb_a) = params.log_bases();
    let ln_u: Vec<f64> = (0..=h)
        .map(|t| timers.tau_d[t] * lb_d + timers.tau_a[t] * lb_a)
        .collect();
    let ln_w: Vec<f64> = (0..=h)
        .map(|t| ln_u[t] + certs[modes[t]].ln_lyapunov(log.state(t)))
        .collect();

    let starts: std::collections::BTreeSet<usize> = log.meta.detect_starts.iter().copied().collect();
    let ln_a = params.a.ln();
    let ln_br = (params.b * params.r).ln();
    let slack = CERT_REL_TOL.ln_1p();
    let mut steps = Vec::with_capacity(h);
    let mut case_counts = [0usize; 3];
    let mut violations = Vec::new();
    for t in 0..h {
        let case = if starts.contains(&t) {
            1
        } else if log.detecting(t) {
            2
        } else {
            3
        };
        case_counts[case as usize - 1] += 1;
        let ln_rhs = log_add_exp(ln_a + ln_w[t], ln_br);
        let ok = ln_w[t + 1] <= ln_rhs + slack || ln_w[t + 1] == f64::NEG_INFINITY;
        if !ok {
            violations.push(steps.len());
        }
        steps.push(CertificateStep {
            t,
            case,
            ln_w: ln_w[t],
            ln_w_next: ln_w[t + 1],
            ln_rhs,
            ok,
        });
    }

    let ln_u_max = (params.lambda * params.b / params.a).ln();
    let u_in_range = ln_u
        .iter()
        .all(|&v| v >= -1e-9 && v <= ln_u_max + 1e-9 * ln_u_max.abs().max(1.0));
    let lower_bound_holds = (0..=h).all(|t| {
        let ln_lhs = params.lambda_under.ln() + 2.0 * ln_norm(log.state(t));
        ln_lhs == f64::NEG_INFINITY || ln_lhs <= ln_w[t] + slack
    });
    let comparison_holds = (params.a < 1.0).then(|| {
        let ln_offset = ln_br - (1.0 - params.a).ln();
        (0..=h).all(|t| ln_w[t] <= log_add_exp(t as f64 * ln_a + ln_w[0], ln_offset) + slack)
    });
    Ok(CertificateReport {
        steps,
        ln_w,
        case_counts,
        violations,
        u_in_range,
        lower_bound_holds,
        comparison_holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub tau: f64,
    pub n0: f64,
    pub eta: f64,
    pub t0: f64,
    pub lhs: f64,
    pub holds: bool,
    pub b: f64,
}

/// Evaluate the condition on every grid combination; the selected pair has
/// the smallest left-hand side, ties broken by the smaller `b`.
pub fn evaluate_pairs(
    lib: &LibraryConstants,
    adt: &[AdtPoint],
    aat: &[AatPoint],
    u_max: f64,
) -> Result<(Vec<PairEvaluation>, StabilityParams)> {
    let mut evals = Vec::with_capacity(adt.len() * aat.len());
    let mut best: Option<(f64, f64, StabilityParams)> = None;
    for &d in adt {
        for &s in aat {
            let params = StabilityParams::new(lib, u_max, d, s)?;
            let cond = check_condition(&params);
            evals.push(PairEvaluation {
                tau: d.tau,
                n0: d.n0,
                eta: s.eta,
                t0: s.t0,
                lhs: cond.lhs,
                holds: cond.holds,
                b: params.b,
            });
            let better = match &best {
                None => true,
                Some((lhs, b, _)) => cond.lhs < *lhs || (cond.lhs == *lhs && params.b < *b),
            };
            if better {
                best = Some((cond.lhs, params.b, params));
            }
        }
    }
    best.map(|(_, _, p)| (evals, p))
        .ok_or_else(|| Error::InvalidArgument("empty parameter grid".into()))
}

/// Everything the analysis produces for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub horizon: usize,
    pub constants: LibraryConstants,
    pub adt_curve: Vec<AdtPoint>,
    pub aat_curve: Vec<AatPoint>,
    pub pairs: Vec<PairEvaluation>,
    pub selected: StabilityParams,
    pub condition: ConditionReport,
    pub margin: f64,
    pub bound: Option<IssBound>,
    pub bound_audit: Option<BoundAudit>,
    pub certificate_cases: [usize; 3],
    pub certificate_violations: Vec<CertificateStep>,
    pub certificate_invariants: CertificateInvariants,
    pub timers: TimerPair,
    #[serde(skip)]
    pub ln_w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateInvariants {
    pub u_in_range: bool,
    pub lower_bound_holds: bool,
    pub comparison_holds: Option<bool>,
}

impl AnalysisReport {
    /// Whether every audited property holds.
    pub fn passed(&self) -> bool {
        self.condition.holds
            && self.bound_audit.is_some_and(|a| a.violations == 0)
            && self.certificate_violations.is_empty()
            && self.certificate_invariants.u_in_range
            && self.certificate_invariants.lower_bound_holds
            && self.certificate_invariants.comparison_holds != Some(false)
    }

    /// Time series `t,norm_x,bound,w,tau_d,tau_a,case`.
    pub fn write_series<W: Write>(&self, log: &RunLog, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "norm_x", "bound", "w", "tau_d", "tau_a", "case"])?;
        let h = log.horizon();
        let starts: std::collections::BTreeSet<usize> = log.meta.detect_starts.iter().copied().collect();
        for t in 0..=h {
            let case = if t == h {
                String::new()
            } else if starts.contains(&t) {
                "1".into()
            } else if log.detecting(t) {
                "2".into()
            } else {
                "3".into()
            };
            w.write_record([
                t.to_string(),
                log.state(t).norm().to_string(),
                self.bound.map(|b| b.at(t).to_string()).unwrap_or_default(),
                self.ln_w[t].exp().to_string(),
                self.timers.tau_d[t].to_string(),
                self.timers.tau_a[t].to_string(),
                case,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fit, select, and audit a run. `grids` defaults to [`default_grids`].
pub fn analyze(
    log: &RunLog,
    modes: &[(Matrix, Matrix)],
    certs: &[GainCertificate],
    grids: Option<(&[f64], &[f64])>,
) -> Result<AnalysisReport> {
    let constants = library_constants(modes, certs)?;
    let defaults;
    let (taus, etas) = match grids {
        Some(g) => g,
        None => {
            defaults = default_grids(log);
            (defaults.0.as_slice(), defaults.1.as_slice())
        }
    };
    let adt_curve = fit_adt(log, taus)?;
    let aat_curve = fit_aat(log, etas)?;
    let (pairs, selected) = evaluate_pairs(&constants, &adt_curve, &aat_curve, log.meta.u_max)?;
    let condition = check_condition(&selected);
    let bound = iss_bound(&selected, log.state(0).norm()).ok();
    let bound_audit = bound.as_ref().map(|b| audit_bound(log, b));
    let cert = w_certificate(log, &selected, certs)?;
    let timers = build_timers(log, &selected)?;
    Ok(AnalysisReport {
        seed: log.meta.seed,
        horizon: log.horizon(),
        constants,
        adt_curve,
        aat_curve,
        pairs,
        selected,
        condition,
        margin: 1.0 - condition.lhs,
        bound,
        bound_audit,
        certificate_cases: cert.case_counts,
        certificate_violations: cert.violations.iter().map(|&i| cert.steps[i]).collect(),
        certificate_invariants: CertificateInvariants {
            u_in_range: cert.u_in_range,
            lower_bound_holds: cert.lower_bound_holds,
            comparison_holds: cert.comparison_holds,
        },
        timers,
        ln_w: cert.ln_w,
    })
}
