mod common;

use common::*;
use ddsc_core::analysis::{
    analyze, certificate_modes, default_grids, fit_aat, fit_adt, library_constants, w_certificate, StabilityParams,
};
use ddsc_core::simulate::{replay_detection, run_closed_loop};
use ddsc_core::{
    ModeLibrary, Phase, ResetPolicy, RunLog, RunOptions, Scenario, ScenarioConfig, SwitchedPlant, SwitchingSignal,
    Tolerance, Vector,
};
use proptest::prelude::*;

fn config(seed: u64, n: usize, m: usize, p: usize) -> ScenarioConfig {
    ScenarioConfig {
        n,
        m,
        p,
        t_init: n + m + 1,
        lambda: 0.8,
        signal: SwitchingSignal::Adaptive { mean_dwell: 6.0 },
        horizon: 80,
        seed,
        ..ScenarioConfig::default()
    }
}

/// Scenario and library, or `None` when the random modes break the
/// standing assumptions.
fn setup(cfg: &ScenarioConfig) -> Option<(Scenario, ModeLibrary)> {
    let scenario = Scenario::generate(cfg).ok()?;
    let library = scenario.library(&Tolerance::default()).ok()?;
    Some((scenario, library))
}

fn ln_decay_ok(library: &ModeLibrary, log: &RunLog) -> Result<(), String> {
    let lam = library.lambda();
    for (t, s) in log.steps.iter().enumerate() {
        if s.phase == Phase::Detect {
            if s.trigger_fired {
                return Err(format!("trigger on a detection step {t}"));
            }
            continue;
        }
        let i = s.sigma_d.ok_or(format!("stabilizing without a mode at {t}"))?;
        let p = &library.cert(i).p;
        let v = s.v_value.ok_or(format!("missing V at {t}"))?;
        let direct = (s.x.transpose() * p * &s.x)[(0, 0)];
        if (v - direct).abs() > 1e-12 * direct.abs().max(f64::MIN_POSITIVE) {
            return Err(format!("logged V {v} but xᵀPx = {direct} at {t}"));
        }
        let (now, next) = (ln_quadratic(p, &s.x), ln_quadratic(p, log.state(t + 1)));
        if now == f64::NEG_INFINITY {
            continue;
        }
        let limit = (lam + 1e-9).ln() + now;
        if !s.trigger_fired && next > limit + 1e-12 {
            return Err(format!("V grew without a trigger at {t}: {next} > {limit}"));
        }
        if s.trigger_fired && next < limit - 1e-12 {
            return Err(format!("trigger fired although V decreased at {t}"));
        }
    }
    Ok(())
}

/// Every interval of the log against the fitted offsets, and minimality of
/// the offsets.
fn fits_exact(log: &RunLog, taus: &[f64], etas: &[f64]) -> Result<(), String> {
    let h = log.horizon();
    let count_n = |a: usize, b: usize| log.meta.detect_starts.iter().filter(|&&s| s >= a && s < b).count() as f64;
    let count_m = |a: usize, b: usize| (a..b).filter(|&s| log.steps[s].phase == Phase::Detect).count() as f64;
    let adt = fit_adt(log, taus).map_err(|e| e.to_string())?;
    for pt in adt {
        let mut tight = pt.n0 == 1.0;
        for a in 0..h {
            for b in a + 1..=h {
                let excess = count_n(a, b) - (b - a) as f64 / pt.tau - pt.n0;
                if excess > 1e-9 {
                    return Err(format!("N({a},{b}) exceeds N0 = {} at τ = {}", pt.n0, pt.tau));
                }
                tight |= excess > -1e-9;
            }
        }
        if !tight {
            return Err(format!("N0 = {} is not the smallest for τ = {}", pt.n0, pt.tau));
        }
    }
    let aat = fit_aat(log, etas).map_err(|e| e.to_string())?;
    for pt in aat {
        let mut tight = pt.t0 == 0.0;
        for a in 0..h {
            for b in a + 1..=h {
                let excess = count_m(a, b) - pt.eta * (b - a) as f64 - pt.t0;
                if excess > 1e-9 {
                    return Err(format!("M({a},{b}) exceeds T0 = {} at η = {}", pt.t0, pt.eta));
                }
                tight |= excess > -1e-9;
            }
        }
        if !tight {
            return Err(format!("T0 = {} is not the smallest for η = {}", pt.t0, pt.eta));
        }
    }
    Ok(())
}

/// `W`, its invariants and the one-step inequality, recomputed from the
/// timers and the certificates.
fn certificate_exact(scenario: &Scenario, library: &ModeLibrary, log: &RunLog) -> Result<(), String> {
    let modes = scenario.plant.pairs();
    let report = analyze(log, &modes, library.certs(), None).map_err(|e| e.to_string())?;
    let s: StabilityParams = report.selected;
    let (tau_d, tau_a) = timers_oracle(log, s.tau, s.n0, s.eta, s.t0);
    audit_timers(log, &tau_d, &tau_a, (s.tau, s.n0, s.eta, s.t0), 1e-12)?;
    let owners = certificate_modes(log);
    let (lb_d, lb_a) = ((s.mu / s.lambda).ln(), (s.lambda_u / s.lambda).ln());
    let h = log.horizon();
    let ln_u: Vec<f64> = (0..=h).map(|t| tau_d[t] * lb_d + tau_a[t] * lb_a).collect();
    let ln_w: Vec<f64> = (0..=h)
        .map(|t| ln_u[t] + ln_quadratic(&library.cert(owners[t]).p, log.state(t)))
        .collect();
    let u_top = (s.lambda * s.b / s.a).ln();
    for t in 0..=h {
        if ln_u[t] < -1e-9 || ln_u[t] > u_top + 1e-9 {
            return Err(format!("ln U = {} outside [0, {u_top}] at {t}", ln_u[t]));
        }
        if (ln_w[t] - report.ln_w[t]).abs() > 1e-9 * ln_w[t].abs().max(1.0) {
            return Err(format!("ln W differs at {t}: {} vs {}", ln_w[t], report.ln_w[t]));
        }
        let x = log.state(t);
        if x.amax() > 0.0 && s.lambda_under.ln() + 2.0 * x.norm().ln() > ln_w[t] + 1e-8 {
            return Err(format!("λ̲|x|² above W at {t}"));
        }
    }
    // The one-step inequality may fail only where the plant switched under
    // the stabilizing gain: the input there is K x, not bounded by u_max,
    // and the proof's cases do not cover it.
    let ln_br = (s.b * s.r).ln();
    let mut violated = Vec::new();
    for t in 0..h {
        if ln_w[t + 1] == f64::NEG_INFINITY {
            continue;
        }
        let rhs = (s.a * (ln_w[t] - ln_br).exp() + 1.0).ln() + ln_br;
        if ln_w[t + 1] > rhs + 1e-8 {
            let st = &log.steps[t];
            if !st.trigger_fired || st.sigma_d == Some(st.sigma_true) {
                return Err(format!("W(t+1) > a W(t) + b r at {t}, not a switch under feedback"));
            }
            violated.push(t);
        }
    }
    let reported: Vec<usize> = report.certificate_violations.iter().map(|v| v.t).collect();
    if reported != violated {
        return Err(format!("violations {reported:?} reported, {violated:?} recomputed"));
    }
    if s.a < 1.0 && violated.is_empty() {
        let offset = (s.b * s.r / (1.0 - s.a)).ln();
        for t in 0..=h {
            let chain = t as f64 * s.a.ln() + ln_w[0];
            let m = chain.max(offset);
            let rhs = m + ((chain - m).exp() + (offset - m).exp()).ln();
            if ln_w[t] > rhs + 1e-8 {
                return Err(format!("W above the comparison sequence at {t}"));
            }
        }
    }
    if report.certificate_cases[0] == 0 {
        return Err("no detection start in the certificate cases".into());
    }
    let (taus, etas) = default_grids(log);
    fits_exact(log, &taus, &etas)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_loop_invariants(
        seed in 0u64..5000,
        n in 2usize..=4,
        m in 1usize..=2,
        p in 2usize..=4,
        run_seed in any::<u64>(),
        seed_violation in any::<bool>(),
        u_max in prop::sample::select(vec![0.5, 1.0, 2.0]),
    ) {
        let cfg = config(seed, n, m, p);
        let setup = setup(&cfg);
        prop_assume!(setup.is_some());
        let (scenario, library) = setup.unwrap();
        let mut opts = RunOptions::new(u_max);
        if seed_violation {
            opts.reset_policy = ResetPolicy::SeedViolation;
        }
        let x0 = cfg.initial_state(run_seed);
        let log = run_closed_loop(&scenario.plant, &library, &x0, cfg.horizon, run_seed, &opts)
            .map_err(|f| TestCaseError::fail(f.error.to_string()))?;

        prop_assert_eq!(log.transition_residual(&scenario.plant), 0.0);
        prop_assert_eq!(log.state(0), &x0);
        if let Err(e) = audit_detection(&log) {
            prop_assert!(false, "{}", e);
        }
        for s in log.steps.iter().filter(|s| s.phase == Phase::Detect) {
            prop_assert!(s.u.norm() <= u_max, "|u| = {} at {}", s.u.norm(), s.t);
        }
        if let Err(e) = ln_decay_ok(&library, &log) {
            prop_assert!(false, "{}", e);
        }

        let again = run_closed_loop(&scenario.plant, &library, &x0, cfg.horizon, run_seed, &opts).unwrap();
        prop_assert_eq!(&again, &log);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let back = RunLog::read_csv(csv.as_slice(), log.meta.clone()).unwrap();
        prop_assert_eq!(&back, &log);

        let replay = replay_detection(&log, &scenario.init, &Tolerance::default()).unwrap();
        prop_assert!(replay.reproduces_log(), "replay mismatches at {:?}", replay.mismatches);

        if let Err(e) = certificate_exact(&scenario, &library, &log) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[test]
fn zero_initial_state_is_detected_and_held() {
    let cfg = config(3, 3, 2, 3);
    let (scenario, library) = setup(&cfg).expect("valid scenario");
    let x0 = Vector::zeros(3);
    let log = run_closed_loop(&scenario.plant, &library, &x0, 60, 11, &RunOptions::new(1.0)).unwrap();
    assert_eq!(log.transition_residual(&scenario.plant), 0.0);
    audit_detection(&log).unwrap();
    // Nothing is recorded yet at t = 0, so the input is zero and the state
    // stays put; then 0 lies in the recorded span and the input saturates.
    assert_eq!(log.steps[0].u.norm(), 0.0);
    assert_eq!(log.state(1).norm(), 0.0);
    assert_eq!(log.steps[1].phase, Phase::Detect);
    assert!((log.steps[1].u.norm() - 1.0).abs() < 1e-12);
    assert!(log.meta.stabilize_starts.first().is_some_and(|&s| s <= 5));
}

#[test]
fn precomputed_schedule_is_followed() {
    let cfg = config(8, 2, 1, 3);
    let (scenario, library) = setup(&cfg).expect("valid scenario");
    let schedule = vec![(0, 2), (25, 0), (50, 1), (75, 2)];
    let plant = SwitchedPlant::new(
        scenario.plant.modes.clone(),
        SwitchingSignal::Precomputed { schedule: schedule.clone() },
    )
    .unwrap();
    let x0 = cfg.initial_state(4);
    let log = match run_closed_loop(&plant, &library, &x0, 100, 4, &RunOptions::new(1.0)) {
        Ok(log) => log,
        // A switch inside a detection phase can empty the match set; the
        // partial log is still audited.
        Err(f) => *f.log,
    };
    assert!(log.horizon() > 0);
    assert_eq!(log.transition_residual(&plant), 0.0);
    for s in &log.steps {
        let expected = schedule.iter().rev().find(|&&(t, _)| t <= s.t).unwrap().1;
        assert_eq!(s.sigma_true, expected, "mode at {}", s.t);
    }
}

#[test]
fn constants_match_library() {
    let cfg = config(1, 2, 1, 2);
    let (scenario, library) = setup(&cfg).expect("valid scenario");
    let lib = library_constants(&scenario.plant.pairs(), library.certs()).unwrap();
    for c in library.certs() {
        let eig = c.p.clone().symmetric_eigenvalues();
        assert!(eig.min() >= lib.lambda_under && eig.max() <= lib.lambda_bar);
    }
    assert!(lib.mu >= 1.0 && lib.lambda_u >= 1.0);
    let log = run_closed_loop(&scenario.plant, &library, &cfg.initial_state(0), 80, 0, &RunOptions::new(1.0)).unwrap();
    let (taus, etas) = default_grids(&log);
    let adt = fit_adt(&log, &taus).unwrap();
    let aat = fit_aat(&log, &etas).unwrap();
    let params = StabilityParams::new(&lib, 1.0, adt[0], aat[0]).unwrap();
    let report = w_certificate(&log, &params, library.certs()).unwrap();
    assert!(report.violations.is_empty());
    assert!(report.u_in_range && report.lower_bound_holds);
}
