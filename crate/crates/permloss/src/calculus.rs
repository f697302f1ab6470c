//! Conditional-risk calculus: probability vectors, finite differences,
//! reduced derivatives, and the structure matrix `A(z)`.
//!
//! For a template `ψ` and label distribution `p ∈ Δ^k`, the conditional
//! risk in margin coordinates is
//!
//! ```text
//!     C_p(z) = Σ_y p_y · ψ(ρ_y z),
//! ```
//!
//! whose stationarity condition organizes itself around the matrix
//!
//! ```text
//!     A(z) = [∇(ψ∘ρ_1)(z) | … | ∇(ψ∘ρ_{k−1})(z)]      (columns),
//! ```
//!
//! via `∇C_p(z) = p_k ∇ψ(z) + A(z) p̃` with `p̃ = (p_1, …, p_{k−1})`.
//! When `ψ` has entrywise-negative gradients, every `A(z)` is a Z-matrix
//! with positive diagonal whose *columns* are strictly diagonally dominant
//! (the dominance gap of column `y` is exactly `−[∇ψ(ρ_y z)]_y > 0`), and
//! therefore a nonsingular M-matrix. [`mmatrix_report`] checks those three
//! facts with an explicit indeterminacy margin. Note the dominance is a
//! column property: row sums of `|A|` genuinely exceed the diagonal for
//! very asymmetric `z`, so probing rows would reject correct templates.

use crate::label_code::{rho_apply, rho_transpose_apply};
use crate::template::Template;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Margin under which strict-inequality probes refuse to call a winner.
pub const STRICT_MARGIN: f64 = 1e-12;

// ===================================================================
// Probability vectors
// ===================================================================

/// A validated point of the probability simplex `Δ^k` (1-based classes).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbVector {
    p: Vec<f64>,
}

impl ProbVector {
    /// Validates length ≥ 2, nonnegative entries, and `Σ p_y = 1` within
    /// `1e−12`.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidProbability(format!(
                "need at least 2 classes, got {}",
                p.len()
            )));
        }
        for (i, &pi) in p.iter().enumerate() {
            if !pi.is_finite() {
                return Err(Error::InvalidProbability(format!(
                    "entry {} is {}",
                    i + 1,
                    pi
                )));
            }
            if pi < 0.0 {
                return Err(Error::InvalidProbability(format!(
                    "entry {} is negative ({})",
                    i + 1,
                    pi
                )));
            }
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector { p })
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        Self::new(p.to_vec())
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector {
            p: vec![1.0 / k as f64; k],
        }
    }

    /// The vertex `e_y` (all mass on class `y`).
    pub fn vertex(k: usize, y: usize) -> Result<Self> {
        Error::check_class(y, k)?;
        let mut p = vec![0.0; k];
        p[y - 1] = 1.0;
        Ok(ProbVector { p })
    }

    /// Uniform sample from the simplex (normalized exponential spacings).
    pub fn sample_uniform<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        loop {
            let e: Vec<f64> = (0..k)
                .map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln())
                .collect();
            let s: f64 = e.iter().sum();
            if s > 0.0 && s.is_finite() {
                return ProbVector {
                    p: e.iter().map(|&x| x / s).collect(),
                };
            }
        }
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    /// 1-based access.
    pub fn get(&self, y: usize) -> f64 {
        self.p[y - 1]
    }

    /// First `k − 1` coordinates (the reduced vector `p̃`).
    pub fn reduced(&self) -> &[f64] {
        &self.p[..self.p.len() - 1]
    }

    /// Mass of the last class, `p_k`.
    pub fn last(&self) -> f64 {
        self.p[self.p.len() - 1]
    }

    pub fn min_entry(&self) -> f64 {
        self.p.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// All entries at least `eps`.
    pub fn is_interior(&self, eps: f64) -> bool {
        self.min_entry() >= eps
    }
}

// ===================================================================
// Finite differences
// ===================================================================

/// Step size for central differences: `∛ε · max(1, ‖z‖_∞)`.
pub fn fd_step(z: &[f64]) -> f64 {
    let scale = z.iter().fold(1.0_f64, |acc, &x| acc.max(x.abs()));
    f64::EPSILON.cbrt() * scale
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, z: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(z.len());
    let mut buf = z.to_vec();
    for j in 0..z.len() {
        buf[j] = z[j] + h;
        let up = f(&buf)?;
        buf[j] = z[j] - h;
        let dn = f(&buf)?;
        buf[j] = z[j];
        g.push((up - dn) / (2.0 * h));
    }
    Ok(g)
}

/// Four-point central-difference Hessian, computed on the upper triangle
/// and mirrored, so the result is symmetric by construction.
pub fn fd_hessian<F>(f: F, z: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = z.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut buf = z.to_vec();
    let f0 = f(z)?;
    for i in 0..n {
        // Diagonal: (f(+h) − 2 f(0) + f(−h)) / h².
        buf[i] = z[i] + h;
        let up = f(&buf)?;
        buf[i] = z[i] - h;
        let dn = f(&buf)?;
        buf[i] = z[i];
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h * h);
        for j in (i + 1)..n {
            let mut probe = |si: f64, sj: f64| -> Result<f64> {
                buf[i] = z[i] + si * h;
                buf[j] = z[j] + sj * h;
                let v = f(&buf);
                buf[i] = z[i];
                buf[j] = z[j];
                v
            };
            let pp = probe(1.0, 1.0)?;
            let pm = probe(1.0, -1.0)?;
            let mp = probe(-1.0, 1.0)?;
            let mm = probe(-1.0, -1.0)?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

// ===================================================================
// Reduced derivatives and A(z)
// ===================================================================

/// Float copy of the code matrix `ρ_y` at dimension `n = k − 1`.
fn rho_matrix(y: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        if y <= n && c == y - 1 {
            -1.0
        } else {
            f64::from(u8::from(r == c))
        }
    })
}

/// Gradient of the class-`y` reduced loss: `∇(ψ∘ρ_y)(z) = ρ_yᵀ ∇ψ(ρ_y z)`.
pub fn reduced_grad(t: &Template, y: usize, z: &[f64]) -> Result<Vec<f64>> {
    Error::check_class(y, t.arity())?;
    let g = t.grad(&rho_apply(y, z))?;
    Ok(rho_transpose_apply(y, &g))
}

/// Hessian of the class-`y` reduced loss: `ρ_yᵀ ∇²ψ(ρ_y z) ρ_y`.
pub fn reduced_hessian(t: &Template, y: usize, z: &[f64]) -> Result<DMatrix<f64>> {
    Error::check_class(y, t.arity())?;
    let h = t.hessian(&rho_apply(y, z))?;
    if y == t.arity() {
        return Ok(h);
    }
    let r = rho_matrix(y, t.dim());
    Ok(r.transpose() * h * r)
}

/// The structure matrix whose `y`-th column is `∇(ψ∘ρ_y)(z)`,
/// `y = 1, …, k−1`.
pub fn a_matrix(t: &Template, z: &[f64]) -> Result<DMatrix<f64>> {
    let n = t.dim();
    Error::check_len(z.len(), n)?;
    let mut a = DMatrix::zeros(n, n);
    for y in 1..=n {
        let col = reduced_grad(t, y, z)?;
        for (r, &v) in col.iter().enumerate() {
            a[(r, y - 1)] = v;
        }
    }
    Ok(a)
}

// ===================================================================
// Conditional risk
// ===================================================================

/// `C_p(z) = Σ_y p_y ψ(ρ_y z)`.
pub fn conditional_risk(t: &Template, p: &ProbVector, z: &[f64]) -> Result<f64> {
    Error::check_len(p.k(), t.arity())?;
    Error::check_len(z.len(), t.dim())?;
    let mut acc = 0.0;
    for y in 1..=t.arity() {
        let py = p.get(y);
        if py != 0.0 {
            acc += py * t.eval(&rho_apply(y, z))?;
        }
    }
    Ok(acc)
}

/// `∇C_p(z) = p_k ∇ψ(z) + A(z) p̃`, accumulated class by class.
pub fn risk_grad(t: &Template, p: &ProbVector, z: &[f64]) -> Result<Vec<f64>> {
    Error::check_len(p.k(), t.arity())?;
    Error::check_len(z.len(), t.dim())?;
    let mut acc = vec![0.0; t.dim()];
    for y in 1..=t.arity() {
        let py = p.get(y);
        if py != 0.0 {
            let gy = reduced_grad(t, y, z)?;
            for (a, g) in acc.iter_mut().zip(gy) {
                *a += py * g;
            }
        }
    }
    Ok(acc)
}

/// `∇²C_p(z) = Σ_y p_y ρ_yᵀ ∇²ψ(ρ_y z) ρ_y`.
pub fn risk_hessian(t: &Template, p: &ProbVector, z: &[f64]) -> Result<DMatrix<f64>> {
    Error::check_len(p.k(), t.arity())?;
    Error::check_len(z.len(), t.dim())?;
    let n = t.dim();
    let mut acc = DMatrix::zeros(n, n);
    for y in 1..=t.arity() {
        let py = p.get(y);
        if py != 0.0 {
            acc += reduced_hessian(t, y, z)? * py;
        }
    }
    Ok(acc)
}

// ===================================================================
// M-matrix checks
// ===================================================================

/// Structural verdict on one matrix. Strict inequalities are judged with
/// a margin: values inside `±margin` count as indeterminate rather than
/// violations, and `pass` stays true as long as nothing lands on the
/// wrong side of the margin.
#[derive(Clone, Debug, Serialize)]
pub struct MMatrixReport {
    /// Off-diagonal entries all ≤ 0 (up to the margin).
    pub z_pattern_ok: bool,
    pub max_offdiag: f64,
    /// Diagonal entries all strictly positive.
    pub diag_positive: bool,
    pub min_diag: f64,
    /// Columns strictly diagonally dominant:
    /// `|A_yy| − Σ_{j≠y} |A_jy| > 0`.
    pub column_dominant: bool,
    pub min_dominance_gap: f64,
    /// Number of strict checks that fell inside the margin.
    pub indeterminate: usize,
    pub margin: f64,
    pub pass: bool,
}

/// Check Z-pattern, positive diagonal, and strict column dominance.
pub fn mmatrix_report(a: &DMatrix<f64>, margin: f64) -> MMatrixReport {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "A(z) is square");
    let mut max_offdiag = f64::NEG_INFINITY;
    let mut min_diag = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut indeterminate = 0usize;
    let mut z_ok = true;
    let mut diag_ok = true;
    let mut dom_ok = true;
    for c in 0..n {
        let diag = a[(c, c)];
        min_diag = min_diag.min(diag);
        if diag <= -margin {
            diag_ok = false;
        } else if diag <= margin {
            indeterminate += 1;
        }
        let mut off_abs_sum = 0.0;
        for r in 0..n {
            if r == c {
                continue;
            }
            let v = a[(r, c)];
            max_offdiag = max_offdiag.max(v);
            off_abs_sum += v.abs();
            if v > margin {
                z_ok = false;
            } else if v > 0.0 {
                indeterminate += 1;
            }
        }
        let gap = diag.abs() - off_abs_sum;
        min_gap = min_gap.min(gap);
        if gap <= -margin {
            dom_ok = false;
        } else if gap <= margin {
            indeterminate += 1;
        }
    }
    if n == 0 {
        max_offdiag = 0.0;
        min_diag = 0.0;
        min_gap = 0.0;
    }
    let pass = z_ok && diag_ok && dom_ok;
    MMatrixReport {
        z_pattern_ok: z_ok,
        max_offdiag,
        diag_positive: diag_ok,
        min_diag,
        column_dominant: dom_ok,
        min_dominance_gap: min_gap,
        indeterminate,
        margin,
        pass,
    }
}

/// Aggregate M-matrix verdict over random margin vectors in
/// `[−band, band]^(k−1)`.
#[derive(Clone, Debug, Serialize)]
pub struct MMatrixProbe {
    pub template: String,
    pub k: usize,
    pub samples: usize,
    pub band: f64,
    pub seed: u64,
    pub margin: f64,
    pub violations: usize,
    pub indeterminate: usize,
    pub worst_offdiag: f64,
    pub worst_diag: f64,
    pub worst_dominance_gap: f64,
    pub pass: bool,
}

pub fn mmatrix_probe(
    t: &Template,
    samples: usize,
    band: f64,
    seed: u64,
    margin: f64,
) -> Result<MMatrixProbe> {
    let n = t.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut indeterminate = 0usize;
    let mut worst_offdiag = f64::NEG_INFINITY;
    let mut worst_diag = f64::INFINITY;
    let mut worst_gap = f64::INFINITY;
    for _ in 0..samples {
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-band..band)).collect();
        let a = a_matrix(t, &z)?;
        let rep = mmatrix_report(&a, margin);
        if !rep.pass {
            violations += 1;
        }
        indeterminate += rep.indeterminate;
        worst_offdiag = worst_offdiag.max(rep.max_offdiag);
        worst_diag = worst_diag.min(rep.min_diag);
        worst_gap = worst_gap.min(rep.min_dominance_gap);
    }
    Ok(MMatrixProbe {
        template: t.name(),
        k: t.arity(),
        samples,
        band,
        seed,
        margin,
        violations,
        indeterminate,
        worst_offdiag,
        worst_diag,
        worst_dominance_gap: worst_gap,
        pass: violations == 0,
    })
}

// ===================================================================
// Tests
// ===================================================================
