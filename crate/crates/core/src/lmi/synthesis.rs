//! Stabilizing gain synthesis from data.
//!
//! With unknowns `Q ≻ 0` and `L`, the data certify a common gain iff
//!
//! ```text
//! ⎡λQ 0 0 0 ⎤   ⎡ X₊⎤⎡ X₊⎤ᵀ
//! ⎢0  0 0 Q ⎥ + ⎢-X₋⎥⎢-X₋⎥  ⪰ 0
//! ⎢0  0 0 L ⎥   ⎢-U₋⎥⎢-U₋⎥
//! ⎣0  Q Lᵀ Q⎦   ⎣ 0 ⎦⎣ 0 ⎦
//! ```
//!
//! and then `K = L Q⁻¹`, `P = Q⁻¹`. The middle diagonal block equals
//! `Z Zᵀ` with `Z = [X₋; U₋]`, which is singular whenever `Z` lacks full
//! row rank, so the inequality has no interior. Positive semidefiniteness
//! forces `[Q; L]` into `im Z`; we impose that as a linear parameterisation
//! and compress the middle block onto `im Z`, after which the reduced
//! inequality is strictly feasible whenever the data are informative.

use serde::{Deserialize, Serialize};

use super::feasibility::{solve_feasibility, AffineLmi, Feasibility, SolverOptions};
use crate::data::{consistent_set, sample_consistent, DataMatrices};
use crate::error::{Error, Result};
use crate::linalg::{
    kernel_basis, range_basis, spectral_norm, sym_eig_extremes, symmetrize, vstack, Matrix,
    MatrixRecord, Tolerance,
};

/// Feedback gain with its quadratic Lyapunov certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCertificate {
    pub k: Matrix,
    pub p: Matrix,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainRecord {
    pub k: MatrixRecord,
    pub p: MatrixRecord,
    pub lambda: f64,
}

impl From<&GainCertificate> for GainRecord {
    fn from(c: &GainCertificate) -> Self {
        Self {
            k: MatrixRecord::from(&c.k),
            p: MatrixRecord::from(&c.p),
            lambda: c.lambda,
        }
    }
}

impl TryFrom<&GainRecord> for GainCertificate {
    type Error = Error;

    fn try_from(r: &GainRecord) -> Result<Self> {
        GainCertificate::new(Matrix::try_from(&r.k)?, Matrix::try_from(&r.p)?, r.lambda)
    }
}

impl GainCertificate {
    pub fn new(k: Matrix, p: Matrix, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidArgument(format!("decay rate {lambda} not in (0, 1)")));
        }
        if !p.is_square() || k.ncols() != p.nrows() {
            return Err(Error::Dimension(format!(
                "gain {}x{} does not match certificate {}x{}",
                k.nrows(),
                k.ncols(),
                p.nrows(),
                p.ncols()
            )));
        }
        let scale = p.amax().max(1.0);
        if (&p - p.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidArgument("certificate P is not symmetric".into()));
        }
        if sym_eig_extremes(&p)?.0 <= 0.0 {
            return Err(Error::InvalidArgument("certificate P is not positive definite".into()));
        }
        Ok(Self { k, p, lambda })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    /// `V(x) = xᵀ P x`.
    pub fn lyapunov(&self, x: &crate::linalg::Vector) -> f64 {
        x.dot(&(&self.p * x))
    }

    /// `ln V(x)`, evaluated on `x / |x|∞` so tiny states do not underflow.
    pub fn ln_lyapunov(&self, x: &crate::linalg::Vector) -> f64 {
        let s = x.amax();
        if s == 0.0 {
            return f64::NEG_INFINITY;
        }
        let y = x / s;
        2.0 * s.ln() + y.dot(&(&self.p * &y)).ln()
    }

    /// Whether `V(x_next) > λ V(x)` beyond a relative `slack`. Both states
    /// share one rescaling, which leaves the comparison unchanged.
    pub fn decrease_violated(
        &self,
        x: &crate::linalg::Vector,
        x_next: &crate::linalg::Vector,
        slack: f64,
    ) -> bool {
        let s = x.amax().max(x_next.amax());
        if s == 0.0 {
            return false;
        }
        let v = self.lyapunov(&(x / s));
        let v_next = self.lyapunov(&(x_next / s));
        v_next > self.lambda * v + slack * v
    }

    /// Largest eigenvalue of `(A+BK)ᵀP(A+BK) - λP`; non-positive iff the
    /// pair decays at rate `λ` under this certificate.
    pub fn decay_excess(&self, a: &Matrix, b: &Matrix) -> Result<f64> {
        let acl = a + b * &self.k;
        let m = acl.transpose() * &self.p * &acl - &self.p * self.lambda;
        Ok(sym_eig_extremes(&m)?.1)
    }
}

/// Symmetric basis element `eᵢeⱼᵀ + eⱼeᵢᵀ` (or `eᵢeᵢᵀ`).
fn sym_basis(n: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut e = Matrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            out.push(e);
        }
    }
    out
}

/// Samples drawn from the consistent set by [`synth_gain`]'s self-check.
pub const VERIFY_SAMPLES: usize = 200;
/// Absolute eigenvalue slack of the self-check (with `‖P‖ = 1`).
pub const VERIFY_TOL: f64 = 1e-6;

/// Synthesise `(K, P)` certifying decay rate `lambda` for every system
/// consistent with `data`.
///
/// `P` is returned normalised to unit spectral norm; any positive multiple
/// of a certificate is a certificate.
pub fn synth_gain(
    data: &DataMatrices,
    lambda: f64,
    tol: &Tolerance,
    margin: f64,
) -> Result<GainCertificate> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("decay rate {lambda} not in (0, 1)")));
    }
    if data.transitions() == 0 {
        return Err(Error::InvalidArgument("synthesis needs at least one transition".into()));
    }
    let (n, m) = (data.n(), data.m());

    // Σ is invariant under a common scaling of X and U; normalise so the
    // data term has unit size.
    let scale = spectral_norm(data.x())?.max(spectral_norm(data.u_minus())?);
    if scale == 0.0 {
        return Err(Error::InvalidArgument("data matrices are identically zero".into()));
    }
    let xs = data.x() / scale;
    let us = data.u_minus() / scale;
    let t = data.transitions();
    let x_plus = xs.columns(1, t).into_owned();
    let z = vstack(&xs.columns(0, t).into_owned(), &us);

    let range = range_basis(&z, tol)?;
    let r = range.ncols();
    let annihilator = kernel_basis(&range.transpose(), tol)?;

    // Raw coordinates: symmetric Q, then L row-major.
    let q_basis = sym_basis(n);
    let mut raw: Vec<(Matrix, Matrix)> = q_basis
        .iter()
        .map(|q| (q.clone(), Matrix::zeros(m, n)))
        .collect();
    for i in 0..m {
        for j in 0..n {
            let mut l = Matrix::zeros(m, n);
            l[(i, j)] = 1.0;
            raw.push((Matrix::zeros(n, n), l));
        }
    }

    // Linear constraint Vᵀ [Q; L] = 0 for the annihilator V of Z.
    let q_dirs = annihilator.ncols();
    let mut constraint = Matrix::zeros(q_dirs * n, raw.len());
    for (c, (q, l)) in raw.iter().enumerate() {
        let g = vstack(q, l);
        let v = annihilator.transpose() * g;
        for (i, val) in v.iter().enumerate() {
            constraint[(i, c)] = *val;
        }
    }
    let free = kernel_basis(&constraint, tol)?;
    let d = free.ncols();
    if d == 0 {
        return Err(Error::NotInformative { lambda });
    }
    let vars: Vec<(Matrix, Matrix)> = (0..d)
        .map(|k| {
            let mut q = Matrix::zeros(n, n);
            let mut l = Matrix::zeros(m, n);
            for (c, (qr, lr)) in raw.iter().enumerate() {
                let w = free[(c, k)];
                if w != 0.0 {
                    q += qr * w;
                    l += lr * w;
                }
            }
            (symmetrize(&q), l)
        })
        .collect();

    // Reduced block layout: [a (n) | b (r) | c (n)].
    let size = 2 * n + r;
    let mut data_col = Matrix::zeros(size, t);
    data_col.view_mut((0, 0), (n, t)).copy_from(&x_plus);
    data_col
        .view_mut((n, 0), (r, t))
        .copy_from(&(-(range.transpose() * &z)));
    // The data term carries its own multiplier α ≥ 0 and Q is normalised to
    // Q ⪯ I. This is equivalent to the unit-multiplier form (α = 0 would
    // force Q = 0), but it makes the margin on Q a bound on the condition
    // number of P instead of an absolute size that depends on the data.
    let size_q = |q: &Matrix| {
        let mut f = Matrix::zeros(size, size);
        f.view_mut((0, 0), (n, n)).copy_from(&(q * lambda));
        f.view_mut((n + r, n + r), (n, n)).copy_from(q);
        f
    };
    let mut coefficients: Vec<Matrix> = vars
        .iter()
        .map(|(q, l)| {
            let mut f = size_q(q);
            let cross = range.transpose() * vstack(q, l);
            f.view_mut((n, n + r), (r, n)).copy_from(&cross);
            f.view_mut((n + r, n), (n, r)).copy_from(&cross.transpose());
            symmetrize(&f)
        })
        .collect();
    coefficients.push(symmetrize(&(&data_col * data_col.transpose())));
    let main = AffineLmi::new(Matrix::zeros(size, size), coefficients)?;
    let with_alpha = |mut cs: Vec<Matrix>, k: usize| {
        cs.push(Matrix::zeros(k, k));
        cs
    };
    let positivity = AffineLmi::new(
        Matrix::zeros(n, n),
        with_alpha(vars.iter().map(|(q, _)| q.clone()).collect(), n),
    )?;
    let normalisation = AffineLmi::new(
        Matrix::identity(n, n),
        with_alpha(vars.iter().map(|(q, _)| -q).collect(), n),
    )?;
    let mut alpha_only = vec![Matrix::zeros(1, 1); d];
    alpha_only.push(Matrix::identity(1, 1));
    let multiplier = AffineLmi::new(Matrix::zeros(1, 1), alpha_only)?;

    let outcome = solve_feasibility(
        &[main, positivity, normalisation, multiplier],
        &[1],
        margin,
        &SolverOptions::default(),
    )?;
    let zsol = match outcome {
        Feasibility::Feasible(z) => z,
        Feasibility::Infeasible { .. } => return Err(Error::NotInformative { lambda }),
        Feasibility::Unknown => {
            return Err(Error::SynthesisInconclusive(
                "solver stopped without a certificate".into(),
            ))
        }
    };
    let mut q = Matrix::zeros(n, n);
    let mut l = Matrix::zeros(m, n);
    for (k, (qk, lk)) in vars.iter().enumerate() {
        q += qk * zsol[k];
        l += lk * zsol[k];
    }
    let q = symmetrize(&q);
    let q_inv = q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SynthesisInconclusive("Q is not positive definite".into()))?
        .inverse();
    let k = &l * &q_inv;
    let p = symmetrize(&q_inv);
    let p = &p / sym_eig_extremes(&p)?.1;
    let cert = GainCertificate::new(k, p, lambda)?;

    if !verify_uniform_decay(data, &cert, VERIFY_SAMPLES, VERIFY_TOL, tol)? {
        return Err(Error::SynthesisInconclusive(
            "synthesised gain failed the consistent-set check".into(),
        ));
    }
    Ok(cert)
}

/// Check `(A+BK)ᵀP(A+BK) ⪯ λP + tol·I` on the least-squares nominal pair
/// and on `sample_count - 1` further members of the consistent set.
pub fn verify_uniform_decay(
    data: &DataMatrices,
    cert: &GainCertificate,
    sample_count: usize,
    tol: f64,
    rank_tol: &Tolerance,
) -> Result<bool> {
    let cs = consistent_set(data, rank_tol)?;
    let radius = 1.0 + cs.nominal().norm();
    for (a, b) in sample_consistent(&cs, sample_count.max(1), radius, 0x5eed) {
        if cert.decay_excess(&a, &b)? > tol {
            return Ok(false);
        }
    }
    Ok(true)
}
