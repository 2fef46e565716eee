//! The switched feedback controller: alternates between detecting the
//! active mode and stabilizing it with that mode's gain, and falls back to
//! detection when the Lyapunov decrease fails.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compatible, DataMatrices, MatchSet};
use crate::detection::{detect_input, detect_update, is_resolved, DetectionState};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, MatrixRecord, Tolerance, Vector};
use crate::lmi::{synth_gain, verify_uniform_decay, GainCertificate};
use crate::lmi::synthesis::{VERIFY_SAMPLES, VERIFY_TOL};

/// Relative slack on the Lyapunov trigger.
pub const TRIGGER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Detect,
    Stabilize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Detect => "detect",
            Phase::Stabilize => "stabilize",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(Phase::Detect),
            "stabilize" => Ok(Phase::Stabilize),
            other => Err(Error::Schema(format!("unknown phase {other:?}"))),
        }
    }
}

/// What the online buffer holds after the trigger fires at step `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    /// `X^on = [x(t+1)]`, no inputs.
    #[default]
    NextState,
    /// `X^on = [x(t), x(t+1)]`, `U^on = [u(t)]`: keep the violating
    /// transition.
    SeedViolation,
}

/// Per-mode initialization data with the synthesised gains.
#[derive(Debug, Clone)]
pub struct ModeLibrary {
    init: Vec<DataMatrices>,
    certs: Vec<GainCertificate>,
    lambda: f64,
}

/// Pairs `(i, j)`, `i < j`, whose initialization data are compatible.
pub fn compatible_pairs(init: &[DataMatrices], tol: &Tolerance) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for i in 0..init.len() {
        for j in i + 1..init.len() {
            if compatible(&init[i], &init[j], tol)? {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

fn check_incompatible(init: &[DataMatrices], tol: &Tolerance) -> Result<()> {
    if let Some((i, j)) = compatible_pairs(init, tol)?.first() {
        return Err(Error::AssumptionViolated(format!(
            "initialization data of modes {i} and {j} are compatible"
        )));
    }
    Ok(())
}

impl ModeLibrary {
    /// Synthesise a gain for every mode (in parallel) and check that the
    /// initialization data separate the modes.
    pub fn build(init: Vec<DataMatrices>, lambda: f64, tol: &Tolerance) -> Result<Self> {
        if init.is_empty() {
            return Err(Error::InvalidArgument("no modes".into()));
        }
        let certs = init
            .par_iter()
            .map(|d| synth_gain(d, lambda, tol, tol.psd_margin))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(init, certs, tol)
    }

    /// Assemble a library from stored gains, re-checking every certificate
    /// against its data.
    pub fn from_parts(
        init: Vec<DataMatrices>,
        certs: Vec<GainCertificate>,
        tol: &Tolerance,
    ) -> Result<Self> {
        if init.is_empty() || init.len() != certs.len() {
            return Err(Error::Dimension(format!(
                "{} datasets against {} gains",
                init.len(),
                certs.len()
            )));
        }
        let (n, m) = (init[0].n(), init[0].m());
        let lambda = certs[0].lambda;
        for (i, (d, c)) in init.iter().zip(&certs).enumerate() {
            if d.n() != n || d.m() != m || c.k.shape() != (m, n) {
                return Err(Error::Dimension(format!("mode {i} has inconsistent dimensions")));
            }
            if c.lambda != lambda {
                return Err(Error::InvalidArgument("gains certify different decay rates".into()));
            }
            if !verify_uniform_decay(d, c, VERIFY_SAMPLES, VERIFY_TOL, tol)? {
                return Err(Error::AssumptionViolated(format!(
                    "gain of mode {i} does not stabilize every system consistent with its data"
                )));
            }
        }
        check_incompatible(&init, tol)?;
        Ok(Self {
            init,
            certs,
            lambda,
        })
    }

    pub fn p(&self) -> usize {
        self.init.len()
    }

    pub fn n(&self) -> usize {
        self.init[0].n()
    }

    pub fn m(&self) -> usize {
        self.init[0].m()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn init(&self) -> &[DataMatrices] {
        &self.init
    }

    pub fn certs(&self) -> &[GainCertificate] {
        &self.certs
    }

    pub fn cert(&self, i: usize) -> &GainCertificate {
        &self.certs[i]
    }
}

/// Result of feeding one measured transition to the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Match set after pruning, on detection steps.
    pub matches: Option<MatchSet>,
    pub resolved: Option<usize>,
    pub triggered: bool,
}

#[derive(Debug, Clone)]
pub struct SwitchedController<'a> {
    library: &'a ModeLibrary,
    tol: Tolerance,
    reset: ResetPolicy,
    phase: Phase,
    sigma_d: Option<usize>,
    det: DetectionState,
}

/// Serializable controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub phase: Phase,
    pub sigma_d: Option<usize>,
    pub matches: MatchSet,
    pub online_x: MatrixRecord,
    pub online_u: MatrixRecord,
    pub u_max: f64,
    pub lambda: f64,
    pub reset_policy: ResetPolicy,
    pub tolerance: Tolerance,
}

impl<'a> SwitchedController<'a> {
    pub fn new(
        library: &'a ModeLibrary,
        x0: &Vector,
        u_max: f64,
        reset: ResetPolicy,
        tol: Tolerance,
    ) -> Result<Self> {
        if x0.len() != library.n() {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {}",
                x0.len(),
                library.n()
            )));
        }
        Ok(Self {
            library,
            tol,
            reset,
            phase: Phase::Detect,
            sigma_d: None,
            det: DetectionState::new(x0, library.m(), library.p(), u_max)?,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn sigma_d(&self) -> Option<usize> {
        self.sigma_d
    }

    pub fn detection(&self) -> &DetectionState {
        &self.det
    }

    /// `x ᵀ P_{σ_d} x` for the current detected mode.
    pub fn lyapunov(&self, x: &Vector) -> Option<f64> {
        self.sigma_d.map(|i| self.library.cert(i).lyapunov(x))
    }

    pub fn control(&self, x: &Vector) -> Result<Vector> {
        match self.phase {
            Phase::Detect => detect_input(&self.det, x, &self.tol),
            Phase::Stabilize => {
                let i = self.sigma_d.expect("stabilizing without a detected mode");
                Ok(&self.library.cert(i).k * x)
            }
        }
    }

    pub fn observe(&mut self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<Observation> {
        match self.phase {
            Phase::Detect => {
                self.det = detect_update(&self.det, x, u, x_next, self.library.init(), &self.tol)?;
                let matches = self.det.matches.clone();
                let resolved = is_resolved(&self.det)?;
                if let Some(theta) = resolved {
                    self.sigma_d = Some(theta);
                    self.det.matches = MatchSet::full(self.library.p());
                    self.phase = Phase::Stabilize;
                }
                Ok(Observation {
                    matches: Some(matches),
                    resolved,
                    triggered: false,
                })
            }
            Phase::Stabilize => {
                let cert = self.library.cert(self.sigma_d.expect("stabilizing without a mode"));
                let triggered = cert.decrease_violated(x, x_next, TRIGGER_SLACK);
                if triggered {
                    self.phase = Phase::Detect;
                    let m = self.library.m();
                    self.det.online = match self.reset {
                        ResetPolicy::NextState => DataMatrices::initial(x_next, m),
                        ResetPolicy::SeedViolation => {
                            let mut d = DataMatrices::initial(x, m);
                            d.push(u, x_next)?;
                            d
                        }
                    };
                    self.det.matches = MatchSet::full(self.library.p());
                }
                Ok(Observation {
                    matches: None,
                    resolved: None,
                    triggered,
                })
            }
        }
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            phase: self.phase,
            sigma_d: self.sigma_d,
            matches: self.det.matches.clone(),
            online_x: MatrixRecord::from(self.det.online.x()),
            online_u: MatrixRecord::from(self.det.online.u_minus()),
            u_max: self.det.u_max,
            lambda: self.library.lambda(),
            reset_policy: self.reset,
            tolerance: self.tol,
        }
    }

    pub fn restore(library: &'a ModeLibrary, snap: &ControllerSnapshot) -> Result<Self> {
        let online = DataMatrices::new(Matrix::try_from(&snap.online_x)?, Matrix::try_from(&snap.online_u)?)?;
        if online.n() != library.n() || online.m() != library.m() {
            return Err(Error::Dimension("snapshot does not match the library".into()));
        }
        if snap.sigma_d.is_some_and(|i| i >= library.p())
            || snap.matches.iter().any(|i| i >= library.p())
            || (snap.phase == Phase::Stabilize && snap.sigma_d.is_none())
        {
            return Err(Error::Schema("snapshot refers to unknown modes".into()));
        }
        Ok(Self {
            library,
            tol: snap.tolerance,
            reset: snap.reset_policy,
            phase: snap.phase,
            sigma_d: snap.sigma_d,
            det: DetectionState {
                online,
                matches: snap.matches.clone(),
                u_max: snap.u_max,
            },
        })
    }
}
