//! Online mode detection: exciting inputs, data accumulation and pruning
//! of the modes whose initialization data no longer fit.

use crate::data::{prune_matches, DataMatrices, MatchSet, FIT_REL};
use crate::error::{Error, Result};
use crate::linalg::{kernel_basis, least_squares, svd, Tolerance, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionState {
    pub online: DataMatrices,
    pub matches: MatchSet,
    pub u_max: f64,
}

/// A left-kernel vector `(xi, nu)` of the online regressor `[X₋; U₋]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationDirection {
    pub xi: Vector,
    pub nu: Vector,
}

impl DetectionState {
    pub fn new(x0: &Vector, m: usize, p: usize, u_max: f64) -> Result<Self> {
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("input bound {u_max} must be positive")));
        }
        Ok(Self {
            online: DataMatrices::initial(x0, m),
            matches: MatchSet::full(p),
            u_max,
        })
    }
}

/// Whether `x` lies in the column span of `X₋` of the online data.
pub fn in_state_span(online: &DataMatrices, x: &Vector, tol: &Tolerance) -> Result<bool> {
    if online.transitions() == 0 {
        return Ok(x.iter().all(|v| *v == 0.0));
    }
    let xm = online.x_minus();
    let xs = crate::linalg::Matrix::from_column_slice(x.len(), 1, x.as_slice());
    let c = least_squares(&xm, &xs, tol)?;
    let residual = (&xm * c - xs).norm();
    Ok(residual <= FIT_REL * x.norm())
}

/// The left-kernel direction of the online regressor with the largest
/// input component.
pub fn excitation_direction(online: &DataMatrices, tol: &Tolerance) -> Result<ExcitationDirection> {
    let (n, m) = (online.n(), online.m());
    let kernel = kernel_basis(&online.regressor().transpose(), tol)?;
    if kernel.ncols() == 0 {
        return Err(Error::NoExcitationDirection);
    }
    // Over unit combinations c of the basis, ‖ν(c)‖ is maximised by the top
    // right singular vector of the input block.
    let nu_block = kernel.rows(n, m).into_owned();
    let dec = svd(&nu_block);
    let (v_t, sigma) = (dec.v_t, dec.s.first().copied().unwrap_or(0.0));
    if !(sigma > tol.rank_rel) {
        return Err(Error::NoExcitationDirection);
    }
    let c = v_t.row(0).transpose();
    let dir = &kernel * c;
    Ok(ExcitationDirection {
        xi: dir.rows(0, n).into_owned(),
        nu: dir.rows(n, m).into_owned(),
    })
}

/// Input for one detection step: zero unless the current state already
/// lies in the span of the recorded states, in which case a saturated
/// input pushes the regressor out of its current range.
pub fn detect_input(st: &DetectionState, x: &Vector, tol: &Tolerance) -> Result<Vector> {
    let m = st.online.m();
    if st.matches.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    if st.online.transitions() == 0 || !in_state_span(&st.online, x, tol)? {
        return Ok(Vector::zeros(m));
    }
    let dir = excitation_direction(&st.online, tol)?;
    let nu_norm = dir.nu.norm();
    let base = dir.xi.dot(x);
    let s = if base >= 0.0 { 1.0 } else { -1.0 };
    let mut u = &dir.nu * (s * st.u_max / nu_norm);
    // Rounding can leave |u| an ulp above the bound.
    while u.norm() > st.u_max {
        u *= 1.0 - f64::EPSILON;
    }
    if (base + dir.nu.dot(&u)).abs() < FIT_REL * (1.0 + x.norm()) {
        return Err(Error::NoExcitationDirection);
    }
    Ok(u)
}

/// Record one transition and prune the match set.
pub fn detect_update(
    st: &DetectionState,
    x: &Vector,
    u: &Vector,
    x_next: &Vector,
    init: &[DataMatrices],
    tol: &Tolerance,
) -> Result<DetectionState> {
    let last = st.online.last_state();
    if last != *x {
        return Err(Error::InvalidArgument(
            "transition does not start at the newest online state".into(),
        ));
    }
    let mut online = st.online.clone();
    online.push(u, x_next)?;
    let matches = prune_matches(&st.matches, init, &online, tol)?;
    Ok(DetectionState {
        online,
        matches,
        u_max: st.u_max,
    })
}

/// `Some(θ)` once only mode `θ` remains.
pub fn is_resolved(st: &DetectionState) -> Result<Option<usize>> {
    match st.matches.len() {
        0 => Err(Error::EmptyMatchSet),
        1 => Ok(st.matches.iter().next()),
        _ => Ok(None),
    }
}
