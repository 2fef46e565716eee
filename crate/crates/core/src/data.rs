//! Recorded trajectories, the set of systems consistent with them, and the
//! pairwise compatibility test used to rule modes out.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_finite, hstack, kernel_basis, kernel_included, least_squares, spectral_norm, vstack,
    Matrix, Tolerance, Vector,
};

/// Relative residual allowed when claiming an exact linear fit.
pub const FIT_REL: f64 = 1e-8;

/// A state/input trajectory `x(0..=T)`, `u(0..T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    x: Matrix,
    u_minus: Matrix,
}

impl DataMatrices {
    pub fn new(x: Matrix, u_minus: Matrix) -> Result<Self> {
        if x.ncols() != u_minus.ncols() + 1 {
            return Err(Error::Dimension(format!(
                "state matrix has {} columns, input matrix {}; expected one more state than input",
                x.ncols(),
                u_minus.ncols()
            )));
        }
        ensure_finite(&x)?;
        ensure_finite(&u_minus)?;
        Ok(Self { x, u_minus })
    }

    /// Trajectory containing only the initial state.
    pub fn initial(x0: &Vector, m: usize) -> Self {
        Self {
            x: Matrix::from_column_slice(x0.len(), 1, x0.as_slice()),
            u_minus: Matrix::zeros(m, 0),
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u_minus.nrows()
    }

    /// Number of recorded transitions.
    pub fn transitions(&self) -> usize {
        self.u_minus.ncols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn u_minus(&self) -> &Matrix {
        &self.u_minus
    }

    pub fn x_plus(&self) -> Matrix {
        self.x.columns(1, self.transitions()).into_owned()
    }

    pub fn x_minus(&self) -> Matrix {
        self.x.columns(0, self.transitions()).into_owned()
    }

    /// `[X₋; U₋]`.
    pub fn regressor(&self) -> Matrix {
        vstack(&self.x_minus(), &self.u_minus)
    }

    /// Newest recorded state.
    pub fn last_state(&self) -> Vector {
        self.x.column(self.x.ncols() - 1).into_owned()
    }

    /// Append one transition `(u, x_next)` starting from the newest state.
    pub fn push(&mut self, u: &Vector, x_next: &Vector) -> Result<()> {
        if u.len() != self.m() || x_next.len() != self.n() {
            return Err(Error::Dimension(format!(
                "push expects u in R^{} and x in R^{}, got {} and {}",
                self.m(),
                self.n(),
                u.len(),
                x_next.len()
            )));
        }
        let xs = self.x.ncols();
        self.x = self.x.clone().insert_column(xs, 0.0);
        self.x.set_column(xs, x_next);
        let us = self.u_minus.ncols();
        self.u_minus = self.u_minus.clone().insert_column(us, 0.0);
        self.u_minus.set_column(us, u);
        Ok(())
    }

    /// Read a trajectory CSV with header `t,x1..xn,u1..um`; the input
    /// columns of the final row are empty.
    pub fn read_csv<R: Read>(reader: R, n: usize, m: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = trajectory_header(n, m);
        if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Schema(format!(
                "trajectory header {:?} does not match expected {:?}",
                header, expected
            )));
        }
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut us: Vec<Vec<f64>> = Vec::new();
        let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
        for (i, rec) in rows.iter().enumerate() {
            let t: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("bad time index {:?}", &rec[0])))?;
            if t != i {
                return Err(Error::Schema(format!("row {i} has time index {t}")));
            }
            xs.push(parse_fields(rec, 1, n)?);
            let last = i + 1 == rows.len();
            if last {
                if (1 + n..1 + n + m).any(|j| !rec[j].trim().is_empty()) {
                    return Err(Error::Schema("final row must leave inputs empty".into()));
                }
            } else {
                us.push(parse_fields(rec, 1 + n, m)?);
            }
        }
        if xs.is_empty() {
            return Err(Error::Schema("trajectory has no rows".into()));
        }
        let x = Matrix::from_fn(n, xs.len(), |i, j| xs[j][i]);
        let u = Matrix::from_fn(m, us.len(), |i, j| us[j][i]);
        Self::new(x, u)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(trajectory_header(n, m))?;
        for t in 0..self.x.ncols() {
            let mut row = vec![t.to_string()];
            row.extend(self.x.column(t).iter().map(|v| v.to_string()));
            if t < self.transitions() {
                row.extend(self.u_minus.column(t).iter().map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), m));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn trajectory_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.extend((1..=m).map(|i| format!("u{i}")));
    h
}

pub(crate) fn parse_fields(rec: &csv::StringRecord, start: usize, count: usize) -> Result<Vec<f64>> {
    (start..start + count)
        .map(|j| {
            let s = rec.get(j).ok_or_else(|| Error::Schema("short row".into()))?;
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("bad number {s:?}")))
        })
        .collect()
}

/// Affine set of all `[A B]` with `X₊ = A X₋ + B U₋`, stored as a nominal
/// minimum-norm solution plus the left annihilator of the regressor.
#[derive(Debug, Clone)]
pub struct ConsistentSet {
    pub nominal_a: Matrix,
    pub nominal_b: Matrix,
    /// Orthonormal columns `v` with `vᵀ [X₋; U₋] = 0`. Members are
    /// `[A B] = [A₀ B₀] + Ξ Vᵀ` for arbitrary `Ξ ∈ R^{n×q}`.
    pub kernel_dirs: Matrix,
}

impl ConsistentSet {
    pub fn n(&self) -> usize {
        self.nominal_a.nrows()
    }

    pub fn m(&self) -> usize {
        self.nominal_b.ncols()
    }

    pub fn is_singleton(&self) -> bool {
        self.kernel_dirs.ncols() == 0
    }

    /// Dimension of the set as a subset of `R^{n×(n+m)}`.
    pub fn dimension(&self) -> usize {
        self.n() * self.kernel_dirs.ncols()
    }

    pub fn nominal(&self) -> Matrix {
        hstack(&self.nominal_a, &self.nominal_b)
    }

    /// Member `[A₀ B₀] + Ξ Vᵀ`, split into `(A, B)`.
    pub fn member(&self, xi: &Matrix) -> (Matrix, Matrix) {
        let w = self.nominal() + xi * self.kernel_dirs.transpose();
        let n = self.n();
        (
            w.columns(0, n).into_owned(),
            w.columns(n, self.m()).into_owned(),
        )
    }
}

pub fn consistent_set(data: &DataMatrices, tol: &Tolerance) -> Result<ConsistentSet> {
    let (n, m) = (data.n(), data.m());
    let z = data.regressor();
    let xp = data.x_plus();
    // W Z = X₊  ⇔  Zᵀ Wᵀ = X₊ᵀ
    let w = least_squares(&z.transpose(), &xp.transpose(), tol)?.transpose();
    let residual = spectral_norm(&(&xp - &w * &z))?;
    let threshold = FIT_REL * spectral_norm(&xp)?.max(f64::MIN_POSITIVE);
    if residual > threshold && residual > 0.0 {
        return Err(Error::NoExactFit {
            residual,
            threshold,
        });
    }
    let kernel_dirs = kernel_basis(&z.transpose(), tol)?;
    Ok(ConsistentSet {
        nominal_a: w.columns(0, n).into_owned(),
        nominal_b: w.columns(n, m).into_owned(),
        kernel_dirs,
    })
}

/// `count` members of the consistent set: the nominal first, then points
/// drawn uniformly from the Frobenius ball of `radius` around it.
pub fn sample_consistent(
    cs: &ConsistentSet,
    count: usize,
    radius: f64,
    seed: u64,
) -> Vec<(Matrix, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, q) = (cs.n(), cs.kernel_dirs.ncols());
    let dim = (n * q).max(1);
    (0..count)
        .map(|i| {
            if i == 0 || q == 0 {
                return cs.member(&Matrix::zeros(n, q));
            }
            let mut xi = Matrix::from_fn(n, q, |_, _| StandardNormal.sample(&mut rng));
            let norm = xi.norm();
            if norm > 0.0 {
                let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64) * radius;
                xi *= r / norm;
            }
            cs.member(&xi)
        })
        .collect()
}

fn check_same_dims(d1: &DataMatrices, d2: &DataMatrices) -> Result<()> {
    if d1.n() != d2.n() || d1.m() != d2.m() {
        return Err(Error::Dimension(format!(
            "datasets have (n, m) = ({}, {}) and ({}, {})",
            d1.n(),
            d1.m(),
            d2.n(),
            d2.m()
        )));
    }
    Ok(())
}

/// Whether some `(A, B)` explains both datasets:
/// `ker [Z₁ Z₂] ⊆ ker [X₊¹ X₊²]`.
pub fn compatible(d1: &DataMatrices, d2: &DataMatrices, tol: &Tolerance) -> Result<bool> {
    check_same_dims(d1, d2)?;
    if d1.transitions() == 0 || d2.transitions() == 0 {
        // A lone state constrains nothing.
        let other = if d1.transitions() == 0 { d2 } else { d1 };
        if other.transitions() == 0 {
            return Ok(true);
        }
        return kernel_included(&other.regressor(), &other.x_plus(), tol);
    }
    let regressor = hstack(&d1.regressor(), &d2.regressor());
    let successors = hstack(&d1.x_plus(), &d2.x_plus());
    kernel_included(&regressor, &successors, tol)
}

/// Modes still compatible with the online data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    remaining: BTreeSet<usize>,
}

impl MatchSet {
    pub fn full(p: usize) -> Self {
        Self {
            remaining: (0..p).collect(),
        }
    }

    pub fn from_modes(modes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            remaining: modes.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_empty(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn contains(&self, mode: usize) -> bool {
        self.remaining.contains(&mode)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.remaining.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

/// Drop every mode whose initialization data is incompatible with `online`.
pub fn prune_matches(
    ms: &MatchSet,
    init: &[DataMatrices],
    online: &DataMatrices,
    tol: &Tolerance,
) -> Result<MatchSet> {
    if online.transitions() == 0 {
        return Ok(ms.clone());
    }
    let mut keep = BTreeSet::new();
    for mode in ms.iter() {
        let data = init.get(mode).ok_or_else(|| {
            Error::InvalidArgument(format!("match set refers to unknown mode {mode}"))
        })?;
        if compatible(data, online, tol)? {
            keep.insert(mode);
        }
    }
    Ok(MatchSet { remaining: keep })
}

/// No two modes' initialization data admit a common system.
pub fn pairwise_incompatible(init: &[DataMatrices], tol: &Tolerance) -> Result<bool> {
    for i in 0..init.len() {
        for j in i + 1..init.len() {
            if compatible(&init[i], &init[j], tol)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
