//! Growth bounds used by the dwell-time analysis: the per-mode rate
//! `λ_u`, the input gain `k` and the certificate mismatch `μ`.

use serde::{Deserialize, Serialize};

use super::synthesis::GainCertificate;
use crate::error::{Error, Result};
use crate::linalg::{
    least_squares, min_sym_eig, spectral_norm, sym_eig_extremes, symmetrize, Matrix, Tolerance,
};

/// `V_i(A_i x + B_i u) ≤ λ_u V_i(x) + k |u|²` for every mode `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub lambda_u: f64,
    pub k: f64,
}

/// Bisection resolution on `λ_u`.
pub const LAMBDA_U_RESOLUTION: f64 = 1e-3;
const K_FLOOR: f64 = 1e-12;
const K_CAP: f64 = 1e12;

fn check_inputs(modes: &[(Matrix, Matrix)], certs: &[GainCertificate]) -> Result<()> {
    if modes.is_empty() || modes.len() != certs.len() {
        return Err(Error::Dimension(format!(
            "{} modes against {} certificates",
            modes.len(),
            certs.len()
        )));
    }
    for ((a, b), c) in modes.iter().zip(certs) {
        let n = c.n();
        if a.shape() != (n, n) || b.nrows() != n {
            return Err(Error::Dimension("mode does not match its certificate".into()));
        }
        if min_sym_eig(&c.p)? <= 0.0 {
            return Err(Error::InvalidArgument("certificate P is not positive definite".into()));
        }
    }
    Ok(())
}

/// Smallest `k` with `diag(λ_u P, k I) - [A B]ᵀ P [A B] ⪰ margin·I` for
/// one mode, or `None` if no finite `k` works. Eliminating the `k` block
/// by a Schur complement gives the exact value
/// `margin + λ_max(BᵀPB + BᵀPA M⁻¹ AᵀPB)` with `M = λ_u P - AᵀPA - margin·I ≻ 0`.
fn minimal_k(a: &Matrix, b: &Matrix, p: &Matrix, lambda_u: f64, margin: f64) -> Result<Option<f64>> {
    let n = a.nrows();
    let m = symmetrize(&(p * lambda_u - a.transpose() * p * a - Matrix::identity(n, n) * margin));
    let scale = p.norm() * lambda_u.max(1.0) + (a.transpose() * p * a).norm();
    if min_sym_eig(&m)? < -1e-12 * scale {
        return Ok(None);
    }
    // M may be singular (e.g. a marginally stable mode at λ_u = 1); the
    // coupling must then lie in its range and M⁺ replaces M⁻¹.
    let cross = a.transpose() * p * b;
    let tol = Tolerance::default();
    let w = least_squares(&m, &cross, &tol)?;
    if (&m * &w - &cross).norm() > 1e-9 * (cross.norm() + scale) {
        return Ok(None);
    }
    let inner = symmetrize(&(b.transpose() * p * b + cross.transpose() * w));
    let k = margin + sym_eig_extremes(&inner)?.1.max(0.0);
    Ok(Some(k))
}

fn minimal_k_all(
    modes: &[(Matrix, Matrix)],
    certs: &[GainCertificate],
    lambda_u: f64,
    margin: f64,
) -> Result<Option<f64>> {
    let mut worst: f64 = 0.0;
    for ((a, b), c) in modes.iter().zip(certs) {
        match minimal_k(a, b, &c.p, lambda_u, margin)? {
            Some(k) => worst = worst.max(k),
            None => return Ok(None),
        }
    }
    Ok(Some(worst))
}

/// Whether `diag(λ_u P, k I) - [A B]ᵀ P [A B] ⪰ margin·I` holds for every
/// mode. By a Schur complement on the `P⁻¹` block this is the block
/// inequality `[[P⁻¹, A, B], [Aᵀ, λ_u P, 0], [Bᵀ, 0, k I]] ⪰ 0`.
pub fn growth_feasible(
    modes: &[(Matrix, Matrix)],
    certs: &[GainCertificate],
    lambda_u: f64,
    k: f64,
    margin: f64,
) -> Result<bool> {
    check_inputs(modes, certs)?;
    Ok(matches!(minimal_k_all(modes, certs, lambda_u, margin)?, Some(kmin) if kmin <= k))
}

/// Smallest `λ_u ≥ 1` on the bisection grid for which some `k ≤ 1e12`
/// works, paired with the smallest such `k`.
pub fn growth_params(
    modes: &[(Matrix, Matrix)],
    certs: &[GainCertificate],
    margin: f64,
) -> Result<GrowthParams> {
    check_inputs(modes, certs)?;
    let feasible = |lu: f64| -> Result<bool> {
        Ok(matches!(minimal_k_all(modes, certs, lu, margin)?, Some(k) if k <= K_CAP))
    };

    let mut lo = 1.0;
    let lambda_u = if feasible(lo)? {
        lo
    } else {
        let mut hi = 2.0;
        while !feasible(hi)? {
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::InvalidArgument("no finite growth rate found".into()));
            }
        }
        while hi - lo > LAMBDA_U_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            if feasible(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let k = minimal_k_all(modes, certs, lambda_u, margin)?
        .expect("feasible by construction")
        .max(K_FLOOR);
    Ok(GrowthParams { lambda_u, k })
}

/// `max_{i,j} ‖P_i P_j⁻¹‖`.
pub fn compute_mu(certs: &[GainCertificate]) -> Result<f64> {
    if certs.is_empty() {
        return Err(Error::InvalidArgument("no certificates".into()));
    }
    let mut mu: f64 = 1.0;
    for pj in certs {
        let lu = pj.p.clone().lu();
        for pi in certs {
            // (P_i P_j⁻¹)ᵀ = P_j⁻¹ P_i has the same norm.
            let q = lu
                .solve(&pi.p)
                .ok_or_else(|| Error::InvalidArgument("singular certificate".into()))?;
            mu = mu.max(spectral_norm(&q)?);
        }
    }
    Ok(mu)
}
