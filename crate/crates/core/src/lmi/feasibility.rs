//! Feasibility of affine linear matrix inequalities
//! `F₀ + Σ zₖ Fₖ ⪰ 0` by a phase-I log-barrier method.
//!
//! The solver maximises a common slack `t` with `Fⱼ(z) - mⱼ I ⪰ t I` for
//! every constraint (`mⱼ` is the margin for strict constraints, zero
//! otherwise) inside the box `|zₖ| ≤ R`. Every centred iterate yields a
//! dual point whose objective upper-bounds the optimal slack, so a negative
//! bound proves that no `z` in the box satisfies the constraints.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eig, Matrix, Vector};

/// `constant + Σ zₖ coefficients[k] ⪰ 0`.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub constant: Matrix,
    pub coefficients: Vec<Matrix>,
}

impl AffineLmi {
    pub fn new(constant: Matrix, coefficients: Vec<Matrix>) -> Result<Self> {
        let s = constant.nrows();
        let check = |m: &Matrix| -> Result<()> {
            if m.nrows() != s || m.ncols() != s {
                return Err(Error::Dimension(format!(
                    "LMI blocks must all be {s}x{s}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            let scale = m.amax().max(1.0);
            if (m - m.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidArgument("LMI block is not symmetric".into()));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite);
            }
            Ok(())
        };
        check(&constant)?;
        for c in &coefficients {
            check(c)?;
        }
        Ok(Self {
            constant,
            coefficients,
        })
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.coefficients.len()
    }

    pub fn evaluate(&self, z: &Vector) -> Matrix {
        let mut m = self.constant.clone();
        for (zk, fk) in z.iter().zip(&self.coefficients) {
            if *zk != 0.0 {
                m += fk * *zk;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Box bound `R` on every decision variable.
    pub box_bound: f64,
    pub max_newton: usize,
    /// Barrier weight multiplier between centering rounds.
    pub growth: f64,
    pub gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            box_bound: 1e6,
            max_newton: 2000,
            growth: 10.0,
            gap_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Feasibility {
    /// A point satisfying every constraint, verified by eigenvalues.
    Feasible(Vector),
    /// Certified: no point in the box satisfies the constraints. `bound` is
    /// the dual upper bound on the achievable common slack.
    Infeasible { bound: f64 },
    /// Iteration budget exhausted without a certificate either way.
    Unknown,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }
}

struct Problem<'a> {
    lmis: &'a [AffineLmi],
    /// `F₀ⱼ - mⱼ I`
    shifted: Vec<Matrix>,
    d: usize,
    r: f64,
}

#[derive(Clone)]
struct Point {
    z: Vector,
    t: f64,
}

impl Problem<'_> {
    fn slack(&self, j: usize, p: &Point) -> Matrix {
        let mut s = self.shifted[j].clone();
        for (zk, fk) in p.z.iter().zip(&self.lmis[j].coefficients) {
            if *zk != 0.0 {
                s += fk * *zk;
            }
        }
        for i in 0..s.nrows() {
            s[(i, i)] -= p.t;
        }
        s
    }

    /// Barrier objective `-w t - Σ log det Sⱼ - Σ log(R ∓ zₖ)`, or `None`
    /// outside the domain. Also returns the Cholesky factors.
    fn objective(&self, p: &Point, w: f64) -> Option<(f64, Vec<Cholesky<f64, nalgebra::Dyn>>)> {
        let mut f = -w * p.t;
        let mut chols = Vec::with_capacity(self.lmis.len());
        for j in 0..self.lmis.len() {
            let chol = Cholesky::new(self.slack(j, p))?;
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            if !logdet.is_finite() {
                return None;
            }
            f -= logdet;
            chols.push(chol);
        }
        for &zk in p.z.iter() {
            let (lo, hi) = (self.r + zk, self.r - zk);
            if lo <= 0.0 || hi <= 0.0 {
                return None;
            }
            f -= lo.ln() + hi.ln();
        }
        Some((f, chols))
    }

    fn inverses(chols: &[Cholesky<f64, nalgebra::Dyn>]) -> Vec<Matrix> {
        chols.iter().map(|c| c.inverse()).collect()
    }

    /// Gradient and Hessian of the barrier objective in `(z, t)`.
    fn newton_system(&self, p: &Point, w: f64, inv: &[Matrix]) -> (Vector, Matrix) {
        let d = self.d;
        let mut g = Vector::zeros(d + 1);
        let mut h = Matrix::zeros(d + 1, d + 1);
        g[d] = -w;
        for (j, sinv) in inv.iter().enumerate() {
            let coeffs = &self.lmis[j].coefficients;
            // Aₐ = S⁻¹ Fₐ S⁻¹
            let products: Vec<Matrix> = coeffs.iter().map(|f| sinv * f * sinv).collect();
            for a in 0..d {
                g[a] -= sinv.dot(&coeffs[a]);
                for b in a..d {
                    let v = products[a].dot(&coeffs[b]);
                    h[(a, b)] += v;
                    if a != b {
                        h[(b, a)] += v;
                    }
                }
                // ∂S/∂t = -I
                let v = -products[a].trace();
                h[(a, d)] += v;
                h[(d, a)] += v;
            }
            g[d] += sinv.trace();
            h[(d, d)] += sinv.dot(sinv);
        }
        for k in 0..d {
            let (lo, hi) = (self.r + p.z[k], self.r - p.z[k]);
            g[k] += 1.0 / hi - 1.0 / lo;
            h[(k, k)] += 1.0 / (hi * hi) + 1.0 / (lo * lo);
        }
        (g, h)
    }

    /// Dual upper bound on the optimal slack built from `Yⱼ ∝ Sⱼ⁻¹`.
    fn dual_bound(&self, inv: &[Matrix]) -> f64 {
        let total: f64 = inv.iter().map(|m| m.trace()).sum();
        if !(total > 0.0) {
            return f64::INFINITY;
        }
        let mut bound = 0.0;
        let mut g = vec![0.0; self.d];
        for (j, sinv) in inv.iter().enumerate() {
            let y = sinv / total;
            bound += y.dot(&self.shifted[j]);
            for (k, fk) in self.lmis[j].coefficients.iter().enumerate() {
                g[k] += y.dot(fk);
            }
        }
        bound + self.r * g.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn verified(&self, z: &Vector) -> bool {
        (0..self.lmis.len()).all(|j| {
            let p = Point {
                z: z.clone(),
                t: 0.0,
            };
            min_sym_eig(&self.slack(j, &p)).map(|e| e >= 0.0).unwrap_or(false)
        })
    }
}

fn solve_spd(h: &Matrix, rhs: &Vector) -> Option<Vector> {
    // Jacobi scaling first: near the boundary the diagonal spans many
    // orders of magnitude.
    let d = h.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 });
    let hs = Matrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * d[i] * d[j]);
    let rs = rhs.component_mul(&d);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut hr = hs.clone();
        if reg > 0.0 {
            for i in 0..hr.nrows() {
                hr[(i, i)] += reg;
            }
        }
        if let Some(c) = Cholesky::new(hr) {
            return Some(c.solve(&rs).component_mul(&d));
        }
        reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
    }
    None
}

/// Find `z` with `lmis[j](z) ⪰ 0` for all `j`, and `⪰ margin·I` for `j` in
/// `strict`.
const ROUND_STEPS: usize = 100;

pub fn solve_feasibility(
    lmis: &[AffineLmi],
    strict: &[usize],
    margin: f64,
    opts: &SolverOptions,
) -> Result<Feasibility> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    if lmis.is_empty() {
        return Err(Error::InvalidArgument("no constraints given".into()));
    }
    let d = lmis[0].num_vars();
    if lmis.iter().any(|l| l.num_vars() != d) {
        return Err(Error::Dimension("constraints disagree on the number of variables".into()));
    }
    if let Some(&bad) = strict.iter().find(|&&j| j >= lmis.len()) {
        return Err(Error::InvalidArgument(format!("strict index {bad} out of range")));
    }
    let shifted: Vec<Matrix> = lmis
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let mut s = l.constant.clone();
            if strict.contains(&j) {
                for i in 0..s.nrows() {
                    s[(i, i)] -= margin;
                }
            }
            s
        })
        .collect();
    let prob = Problem {
        lmis,
        shifted,
        d,
        r: opts.box_bound,
    };

    let t0 = prob
        .shifted
        .iter()
        .map(|s| min_sym_eig(s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let mut p = Point {
        z: Vector::zeros(d),
        t: t0 - 1.0,
    };
    let nu: f64 = lmis.iter().map(|l| l.size() as f64).sum::<f64>() + 2.0 * d as f64;
    let mut w = 1.0;
    let mut factor = opts.growth;
    let mut last_centred: Option<(Point, f64)> = None;
    let mut newton_steps = 0;

    while newton_steps < opts.max_newton {
        // Centre for the current barrier weight.
        let mut centred = false;
        let mut decrement = f64::INFINITY;
        // A round that needs this many steps has hit the precision wall.
        let round_end = (newton_steps + ROUND_STEPS).min(opts.max_newton);
        while newton_steps < round_end {
            let Some((f, chols)) = prob.objective(&p, w) else {
                return Ok(Feasibility::Unknown);
            };
            let inv = Problem::inverses(&chols);
            let (g, h) = prob.newton_system(&p, w, &inv);
            let Some(step) = solve_spd(&h, &(-&g)) else {
                break;
            };
            newton_steps += 1;
            decrement = -g.dot(&step);
            if decrement / 2.0 < 1e-8 {
                centred = true;
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-14 {
                let trial = Point {
                    z: &p.z + step.rows(0, d) * alpha,
                    t: p.t + step[d] * alpha,
                };
                if trial.z == p.z && trial.t == p.t {
                    // The step is below rounding.
                    break;
                }
                if let Some((ft, _)) = prob.objective(&trial, w) {
                    if ft <= f - 0.25 * alpha * decrement {
                        p = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Rounding stalls the line search near the boundary; the
                // gap bound below accounts for the remaining decrement.
                centred = decrement < 1e-4;
                break;
            }
        }

        if centred {
            if last_centred.as_ref().is_some_and(|(_, lw)| w > *lw) {
                factor = (factor * factor).min(opts.growth);
            }
            last_centred = Some((p.clone(), w));
        } else if let Some((lp, lw)) = last_centred.as_ref().filter(|_| factor > 1.2) {
            // Too large a jump for the precision left; retry a smaller one
            // from the last centred point.
            factor = factor.sqrt();
            p = lp.clone();
            w = lw * factor;
            continue;
        }

        let Some((_, chols)) = prob.objective(&p, w) else {
            return Ok(Feasibility::Unknown);
        };
        let inv = Problem::inverses(&chols);
        let mut bound = prob.dual_bound(&inv);
        if centred {
            // Near the central path, with Newton decrement δ², the gap is at
            // most (ν + (δ + √ν) δ / (1 - δ)) / w. The explicit bound above
            // can be swamped by rounding in S⁻¹ when the optimum sits at a
            // nearly singular slack.
            let delta = decrement.max(0.0).sqrt();
            let gap = (nu + (delta + nu.sqrt()) * delta / (1.0 - delta)) / w;
            bound = bound.min(p.t + gap);
        }

        if p.t >= 0.0 {
            let near_optimal = bound - p.t <= opts.gap_tol * bound.abs().max(1.0);
            if (near_optimal || p.t >= 0.5 * bound) && prob.verified(&p.z) {
                return Ok(Feasibility::Feasible(p.z));
            }
        }
        if centred && bound < 0.0 {
            return Ok(Feasibility::Infeasible { bound });
        }
        if nu / w < opts.gap_tol * p.t.abs().max(1.0) {
            // Fully converged: the optimum is numerically zero.
            if p.t >= 0.0 && prob.verified(&p.z) {
                return Ok(Feasibility::Feasible(p.z));
            }
            return Ok(Feasibility::Unknown);
        }
        w *= factor;
    }
    Ok(Feasibility::Unknown)
}
