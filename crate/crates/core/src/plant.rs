//! Ground-truth switched linear plant, switching signals and random
//! scenario generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrices;
use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, is_controllable, numeric_rank, spectral_radius, Matrix, Tolerance, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMode {
    pub a: Matrix,
    pub b: Matrix,
}

impl LinearMode {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        ensure_finite(&a)?;
        ensure_finite(&b)?;
        Ok(Self { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    pub fn pair(&self) -> (Matrix, Matrix) {
        (self.a.clone(), self.b.clone())
    }
}

/// How the active mode evolves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwitchingSignal {
    /// `(time, mode)` pairs; the mode holds until the next entry. Ignores
    /// the controller entirely.
    Precomputed { schedule: Vec<(usize, usize)> },
    /// Geometric dwell times with the given mean. A switch that falls due
    /// while the controller is detecting is held back until the first
    /// stabilization step.
    Adaptive { mean_dwell: f64 },
}

impl SwitchingSignal {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            SwitchingSignal::Precomputed { schedule } => {
                if schedule.first().map(|e| e.0) != Some(0) {
                    return Err(Error::InvalidArgument("schedule must start at time 0".into()));
                }
                if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::InvalidArgument(
                        "schedule times must be strictly increasing".into(),
                    ));
                }
                if let Some(e) = schedule.iter().find(|e| e.1 >= p) {
                    return Err(Error::InvalidArgument(format!("schedule names unknown mode {}", e.1)));
                }
            }
            SwitchingSignal::Adaptive { mean_dwell } => {
                if !(*mean_dwell >= 1.0 && mean_dwell.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "mean dwell {mean_dwell} must be at least 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum SignalKind {
    Precomputed { schedule: Vec<(usize, usize)>, next: usize },
    Adaptive { dwell: Geometric, rng: ChaCha8Rng, next_switch: usize },
}

/// Running switching signal; query it once per step in increasing time.
#[derive(Debug, Clone)]
pub struct SignalState {
    kind: SignalKind,
    current: usize,
    p: usize,
    last_t: Option<usize>,
}

impl SignalState {
    pub fn new(signal: &SwitchingSignal, p: usize, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("no modes".into()));
        }
        signal.validate(p)?;
        Ok(match signal {
            SwitchingSignal::Precomputed { schedule } => Self {
                current: schedule[0].1,
                kind: SignalKind::Precomputed {
                    schedule: schedule.clone(),
                    next: 1,
                },
                p,
                last_t: None,
            },
            SwitchingSignal::Adaptive { mean_dwell } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dwell = Geometric::new(1.0 / mean_dwell)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let current = rng.random_range(0..p);
                let next_switch = 1 + dwell.sample(&mut rng) as usize;
                Self {
                    kind: SignalKind::Adaptive {
                        dwell,
                        rng,
                        next_switch,
                    },
                    current,
                    p,
                    last_t: None,
                }
            }
        })
    }

    /// Active mode at time `t`; `detecting` is the controller phase at `t`.
    pub fn mode_at(&mut self, t: usize, detecting: bool) -> usize {
        debug_assert!(self.last_t.is_none_or(|l| t > l), "signal queried out of order");
        self.last_t = Some(t);
        let p = self.p;
        match &mut self.kind {
            SignalKind::Precomputed { schedule, next } => {
                while *next < schedule.len() && schedule[*next].0 <= t {
                    self.current = schedule[*next].1;
                    *next += 1;
                }
            }
            SignalKind::Adaptive {
                dwell,
                rng,
                next_switch,
            } => {
                if t >= *next_switch && !detecting && p > 1 {
                    let pick = rng.random_range(0..p - 1);
                    self.current = if pick >= self.current { pick + 1 } else { pick };
                    *next_switch = t + 1 + dwell.sample(rng) as usize;
                }
            }
        }
        self.current
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedPlant {
    pub modes: Vec<LinearMode>,
    pub signal: SwitchingSignal,
}

impl SwitchedPlant {
    pub fn new(modes: Vec<LinearMode>, signal: SwitchingSignal) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidArgument("plant needs at least one mode".into()))?;
        let (n, m) = (first.n(), first.m());
        if modes.iter().any(|md| md.n() != n || md.m() != m) {
            return Err(Error::Dimension("modes disagree on (n, m)".into()));
        }
        signal.validate(modes.len())?;
        Ok(Self { modes, signal })
    }

    pub fn n(&self) -> usize {
        self.modes[0].n()
    }

    pub fn m(&self) -> usize {
        self.modes[0].m()
    }

    pub fn p(&self) -> usize {
        self.modes.len()
    }

    pub fn step(&self, mode: usize, x: &Vector, u: &Vector) -> Vector {
        self.modes[mode].step(x, u)
    }

    pub fn pairs(&self) -> Vec<(Matrix, Matrix)> {
        self.modes.iter().map(LinearMode::pair).collect()
    }

    /// Whether every mode passes the controllability rank test.
    pub fn all_controllable(&self, tol: &Tolerance) -> Result<bool> {
        for md in &self.modes {
            if !is_controllable(&md.a, &md.b, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

const MAX_ATTEMPTS: usize = 100;

/// Seed for mode `i` derived from a scenario seed.
pub fn mode_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// One random controllable pair with spectral radius drawn uniformly from
/// `spectral_range` and Gaussian `B`.
pub fn gen_mode(seed: u64, n: usize, m: usize, spectral_range: (f64, f64)) -> Result<LinearMode> {
    let (lo, hi) = spectral_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "bad generator arguments n={n}, m={m}, range=({lo}, {hi})"
        )));
    }
    let tol = Tolerance::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let a = gaussian(&mut rng, n, n);
        let rho = spectral_radius(&a);
        if rho < 1e-6 {
            continue;
        }
        let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let a = a * (target / rho);
        let b = gaussian(&mut rng, n, m);
        if is_controllable(&a, &b, &tol)? {
            return LinearMode::new(a, b);
        }
    }
    Err(Error::GenerationFailed(MAX_ATTEMPTS))
}

/// `p` random modes, mode `i` drawn from `mode_seed(seed, i)`.
pub fn gen_modes(
    seed: u64,
    n: usize,
    m: usize,
    p: usize,
    spectral_range: (f64, f64),
) -> Result<Vec<LinearMode>> {
    let seeds: Vec<u64> = (0..p).map(|i| mode_seed(seed, i)).collect();
    gen_modes_from_seeds(&seeds, n, m, spectral_range)
}

/// One mode per explicit seed; repeating a seed repeats the mode.
pub fn gen_modes_from_seeds(
    seeds: &[u64],
    n: usize,
    m: usize,
    spectral_range: (f64, f64),
) -> Result<Vec<LinearMode>> {
    seeds
        .iter()
        .map(|&s| gen_mode(s, n, m, spectral_range))
        .collect()
}

/// Exact length-`t` trajectory of `mode` from a Gaussian start under
/// Gaussian inputs, redrawn until the regressor has rank `min(t, n+m)`.
pub fn gen_init_data(
    mode: &LinearMode,
    t: usize,
    seed: u64,
    x0_scale: f64,
    u_scale: f64,
) -> Result<DataMatrices> {
    if t == 0 || !(x0_scale > 0.0) || !(u_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need T ≥ 1 and positive scales (T={t}, x0_scale={x0_scale}, u_scale={u_scale})"
        )));
    }
    let (n, m) = (mode.n(), mode.m());
    let want = t.min(n + m);
    let tol = Tolerance::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let x0 = gaussian(&mut rng, n, 1).column(0) * x0_scale;
        let mut data = DataMatrices::initial(&x0, m);
        for _ in 0..t {
            let u = gaussian(&mut rng, m, 1).column(0) * u_scale;
            let x = data.last_state();
            data.push(&u, &mode.step(&x, &u))?;
        }
        if numeric_rank(&data.regressor(), &tol)? == want {
            return Ok(data);
        }
    }
    Err(Error::ExcitationFailed(MAX_ATTEMPTS))
}

/// Gaussian initial state of the given scale.
pub fn random_initial_state(n: usize, scale: f64, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    gaussian(&mut rng, n, 1).column(0) * scale
}
