//! Losses generated by a negentropy through convex duality.
//!
//! A negentropy `Ω` is a symmetric, closed, convex function on the
//! probability simplex with `Ω(e_i) = 0` (hence `Ω ≤ 0`). Together with a
//! target margin `μ ≥ 0` it induces the symmetric template
//!
//! ```text
//! ψ(z) = max_{p̃ ∈ Δ̃} −Ω̃(p̃) + Σ_i p̃_i (μ − z_i)
//! ```
//!
//! where `p̃` collects the first `k−1` coordinates of a distribution and
//! `Ω̃(p̃) = Ω(p̃, 1 − Σ p̃)`. Shannon negentropy with `μ = 0` recovers
//! cross-entropy in closed form. Transforms of Shannon (including
//! zero-padded ones) reduce to a one-dimensional root find on the
//! softmax temperature; anything else falls back to mirror ascent over
//! the simplex. Either way the Frank-Wolfe gap is reported as a
//! computable certificate of how far the returned value can sit below
//! the true maximum. The maximizer doubles as the gradient: by Danskin's
//! theorem `∇ψ(z) = −p̃*`.
//!
//! The module also houses the negentropy calculus used elsewhere:
//! transformed generators `Θ = g(Ω − Ω(u)) − g(−Ω(u))` (convex increasing
//! `g`), class removal by zero-padding, and a sampled validity check.

use crate::calculus::{fd_hessian, ProbVector};
use crate::label_code::{d_apply, rho_apply, Permutation};
use crate::template::{ScalarFn, Template};
use crate::truncation::TruncationSchedule;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::sync::Arc;

// ===================================================================
// Scalar transforms
// ===================================================================

/// A scalar map with two derivatives, used to build transformed
/// negentropies. Must be increasing and convex on `[0, span]` where
/// `span = Ω(vertex) − Ω(uniform)` of the base generator; validated on a
/// grid at construction time.
#[derive(Clone)]
pub struct GTransform {
    name: String,
    g: ScalarFn,
    d1: ScalarFn,
    d2: ScalarFn,
}

impl fmt::Debug for GTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GTransform").field("name", &self.name).finish()
    }
}

impl GTransform {
    /// `g(x) = x²` — increasing and convex on `x ≥ 0`, with `g′(0) = 0`.
    /// The vanishing derivative at the origin is what flattens the
    /// transformed generator's curvature at the uniform distribution.
    pub fn square() -> Self {
        GTransform {
            name: "square".into(),
            g: Arc::new(|x| x * x),
            d1: Arc::new(|x| 2.0 * x),
            d2: Arc::new(|_| 2.0),
        }
    }

    /// `g(x) = x`; transforming by it is a no-op up to the constant shift.
    pub fn identity() -> Self {
        GTransform {
            name: "identity".into(),
            g: Arc::new(|x| x),
            d1: Arc::new(|_| 1.0),
            d2: Arc::new(|_| 0.0),
        }
    }

    pub fn custom(name: impl Into<String>, g: ScalarFn, d1: ScalarFn, d2: ScalarFn) -> Self {
        GTransform {
            name: name.into(),
            g,
            d1,
            d2,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn g(&self, x: f64) -> f64 {
        (self.g)(x)
    }
    pub fn d1(&self, x: f64) -> f64 {
        (self.d1)(x)
    }
    pub fn d2(&self, x: f64) -> f64 {
        (self.d2)(x)
    }
}

// ===================================================================
// Negentropies
// ===================================================================

/// Evaluation hook for hand-rolled generators (used mostly by tests as
/// counterexamples); gradients fall back to finite differences.
pub type SimplexFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A generator `Ω` on the `k`-simplex.
#[derive(Clone)]
pub enum Negentropy {
    /// `Ω(p) = Σ_i p_i log p_i`.
    Shannon { k: usize },
    /// `Θ(p) = g(Ω(p) − c) − g(−c)` with `c = Ω(uniform)` frozen at
    /// construction. Keeping `c` explicit lets class removal reuse the
    /// original centering instead of re-centering at the smaller arity.
    Transformed {
        base: Box<Negentropy>,
        g: GTransform,
        center: f64,
    },
    /// `Ω′(q) = Ω(0, q)`: the arity-`(k−1)` generator obtained by pinning
    /// one class to probability zero.
    ZeroPadded { inner: Box<Negentropy> },
    /// Arbitrary evaluation; symmetric generators only make sense here,
    /// but nothing is enforced until `negentropy_check` runs.
    Custom {
        k: usize,
        name: String,
        f: SimplexFn,
    },
}

impl fmt::Debug for Negentropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Negentropy({})", self.name())
    }
}

impl Negentropy {
    pub fn shannon(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArity { min: 2, got: k });
        }
        Ok(Negentropy::Shannon { k })
    }

    /// Shannon negentropy pushed through `g(x) = x²`.
    pub fn squared_shannon(k: usize) -> Result<Self> {
        negentropy_transformed(Negentropy::shannon(k)?, GTransform::square())
    }

    pub fn custom(k: usize, name: impl Into<String>, f: SimplexFn) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArity { min: 2, got: k });
        }
        Ok(Negentropy::Custom {
            k,
            name: name.into(),
            f,
        })
    }

    /// Number of classes the generator serves.
    pub fn arity(&self) -> usize {
        match self {
            Negentropy::Shannon { k } | Negentropy::Custom { k, .. } => *k,
            Negentropy::Transformed { base, .. } => base.arity(),
            Negentropy::ZeroPadded { inner } => inner.arity() - 1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Negentropy::Shannon { k } => format!("shannon(k={k})"),
            Negentropy::Transformed { base, g, .. } => {
                format!("{}[{}]", g.name(), base.name())
            }
            Negentropy::ZeroPadded { inner } => format!("zero_padded({})", inner.name()),
            Negentropy::Custom { k, name, .. } => format!("{name}(k={k})"),
        }
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        Error::check_len(p.len(), self.arity())?;
        for &pi in p {
            if !pi.is_finite() || pi < -1e-9 {
                return Err(Error::InvalidProbability(format!(
                    "simplex point contains {pi}"
                )));
            }
        }
        Ok(())
    }

    /// `Ω(p)` for `p` on the full simplex (entries may be exactly zero).
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        self.check_point(p)?;
        let v = match self {
            Negentropy::Shannon { .. } => p
                .iter()
                .map(|&pi| if pi > 0.0 { pi * pi.ln() } else { 0.0 })
                .sum(),
            Negentropy::Transformed { base, g, center } => {
                g.g(base.eval(p)? - center) - g.g(-center)
            }
            Negentropy::ZeroPadded { inner } => {
                let mut padded = Vec::with_capacity(p.len() + 1);
                padded.push(0.0);
                padded.extend_from_slice(p);
                inner.eval(&padded)?
            }
            Negentropy::Custom { f, .. } => f(p),
        };
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced {v} at p={p:?}",
                self.name()
            )));
        }
        Ok(v)
    }

    /// `Ω̃(p̃) = Ω(p̃, 1 − Σ p̃)`, with the slack clamped at zero against
    /// rounding in the caller's coordinates.
    pub fn reduced_eval(&self, p_tilde: &[f64]) -> Result<f64> {
        Error::check_len(p_tilde.len(), self.arity() - 1)?;
        let slack = (1.0 - p_tilde.iter().sum::<f64>()).max(0.0);
        let mut full = Vec::with_capacity(self.arity());
        full.extend_from_slice(p_tilde);
        full.push(slack);
        self.eval(&full)
    }

    /// Gradient of `Ω` in the full coordinates, at an interior point.
    /// Closed form for Shannon and its transforms, finite differences for
    /// zero-padded and custom generators.
    pub fn full_grad(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_point(p)?;
        match self {
            Negentropy::Shannon { .. } => p
                .iter()
                .map(|&pi| {
                    if pi > 0.0 {
                        Ok(pi.ln() + 1.0)
                    } else {
                        Err(Error::RegularityViolation(
                            "gradient requested on the simplex boundary".into(),
                        ))
                    }
                })
                .collect(),
            Negentropy::Transformed { base, g, center } => {
                let slope = g.d1(base.eval(p)? - center);
                Ok(base.full_grad(p)?.into_iter().map(|gi| slope * gi).collect())
            }
            _ => {
                // No structural derivative; central differences with steps
                // shrunk near the boundary to keep probes nonnegative.
                let mut grad = vec![0.0; p.len()];
                let mut buf = p.to_vec();
                for i in 0..p.len() {
                    let h = (1e-6_f64).min(0.5 * p[i].max(2e-12));
                    buf[i] = p[i] + h;
                    let up = self.eval(&buf)?;
                    buf[i] = p[i] - h;
                    let dn = self.eval(&buf)?;
                    buf[i] = p[i];
                    grad[i] = (up - dn) / (2.0 * h);
                }
                Ok(grad)
            }
        }
    }

    /// Gradient of the reduced form `Ω̃` at an interior `p̃` (every entry
    /// and the slack at least `1e−12`).
    pub fn reduced_grad(&self, p_tilde: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(p_tilde.len(), self.arity() - 1)?;
        let slack = 1.0 - p_tilde.iter().sum::<f64>();
        if slack < 1e-12 || p_tilde.iter().any(|&pi| pi < 1e-12) {
            return Err(Error::RegularityViolation(
                "reduced gradient needs an interior point of the simplex".into(),
            ));
        }
        let mut full = Vec::with_capacity(self.arity());
        full.extend_from_slice(p_tilde);
        full.push(slack);
        let g = self.full_grad(&full)?;
        let last = g[g.len() - 1];
        Ok(g[..g.len() - 1].iter().map(|&gi| gi - last).collect())
    }

    /// `Ω(u)` at the uniform distribution.
    pub fn uniform_value(&self) -> Result<f64> {
        match self {
            Negentropy::Shannon { k } => Ok(-(*k as f64).ln()),
            _ => {
                let k = self.arity();
                self.eval(&vec![1.0 / k as f64; k])
            }
        }
    }
}

/// Build `Θ(p) = g(Ω(p) − Ω(u)) − g(−Ω(u))`. Validates that `g` is
/// increasing and convex on the range `Ω − Ω(u)` actually takes, i.e.
/// `[0, Ω(e_1) − Ω(u)]`, by sampling `g′` and `g″` on a grid.
pub fn negentropy_transformed(base: Negentropy, g: GTransform) -> Result<Negentropy> {
    let k = base.arity();
    let center = base.uniform_value()?;
    let mut vertex = vec![0.0; k];
    vertex[0] = 1.0;
    let span = base.eval(&vertex)? - center;
    if !(span > 0.0) {
        return Err(Error::InvalidTransform(format!(
            "base generator has no spread between uniform and vertex (span {span})"
        )));
    }
    let grid = 64;
    for i in 0..=grid {
        let x = span * i as f64 / grid as f64;
        if g.d1(x) < -1e-12 {
            return Err(Error::InvalidTransform(format!(
                "transform '{}' is decreasing at x={x} (g'={})",
                g.name(),
                g.d1(x)
            )));
        }
        if g.d2(x) < -1e-12 {
            return Err(Error::InvalidTransform(format!(
                "transform '{}' is concave at x={x} (g''={})",
                g.name(),
                g.d2(x)
            )));
        }
    }
    if !(g.g(span) > g.g(0.0)) {
        return Err(Error::InvalidTransform(format!(
            "transform '{}' does not increase over [0, {span}]",
            g.name()
        )));
    }
    Ok(Negentropy::Transformed {
        base: Box::new(base),
        g,
        center,
    })
}

/// Remove one class: the arity-`(k−1)` generator `q ↦ Ω(0, q)`.
/// Shannon pads to itself one arity down; transforms are padded inside
/// the transform so the original centering constant is preserved.
pub fn negentropy_truncate(omega: &Negentropy) -> Result<Negentropy> {
    let k = omega.arity();
    if k < 3 {
        return Err(Error::InvalidArity { min: 3, got: k });
    }
    Ok(match omega {
        // 0·log 0 = 0, so pinning a class drops its term exactly.
        Negentropy::Shannon { .. } => Negentropy::Shannon { k: k - 1 },
        Negentropy::Transformed { base, g, center } => Negentropy::Transformed {
            base: Box::new(negentropy_truncate(base)?),
            g: g.clone(),
            center: *center,
        },
        other => Negentropy::ZeroPadded {
            inner: Box::new(other.clone()),
        },
    })
}

// ===================================================================
// Sampled generator validation
// ===================================================================

/// Outcome of [`negentropy_check`]: random-sample evidence that `Ω` has
/// the defining properties, plus a boundary probe for gradient blow-up.
/// Sampled, not proven.
#[derive(Clone, Debug, Serialize)]
pub struct NegentropyCheckReport {
    pub name: String,
    pub samples: usize,
    /// max |Ω(S_σ p) − Ω(p)| over random (p, σ).
    pub symmetry_gap: f64,
    /// max |Ω(e_i)| over vertices.
    pub max_vertex_value: f64,
    /// max Ω(p) over samples (should not exceed ~0).
    pub max_value: f64,
    /// max Ω((p+q)/2) − (Ω(p)+Ω(q))/2 over sampled pairs.
    pub worst_midpoint_gap: f64,
    /// ‖∇Ω‖_∞ along p(t) = (1−t)u + t·e_1 at t = 1 − 10^−j, j = 1..6.
    pub boundary_grad_norms: Vec<f64>,
    /// Last over first of the norms above.
    pub boundary_growth_ratio: f64,
    pub pass: bool,
    pub note: String,
}

/// Check symmetry, vertex zeros, nonpositivity and midpoint convexity on
/// random samples, and probe for the gradient blow-up toward the simplex
/// boundary that keeps maximizers interior.
pub fn negentropy_check(
    omega: &Negentropy,
    samples: usize,
    seed: u64,
) -> Result<NegentropyCheckReport> {
    let k = omega.arity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut symmetry_gap: f64 = 0.0;
    let mut max_value = f64::NEG_INFINITY;
    let mut worst_midpoint: f64 = f64::NEG_INFINITY;
    for _ in 0..samples {
        let p = ProbVector::sample_uniform(k, &mut rng);
        let q = ProbVector::sample_uniform(k, &mut rng);
        let vp = omega.eval(p.as_slice())?;
        let vq = omega.eval(q.as_slice())?;
        max_value = max_value.max(vp).max(vq);

        let sigma = Permutation::random(k, &mut rng);
        let shuffled = sigma.apply(p.as_slice());
        symmetry_gap = symmetry_gap.max((omega.eval(&shuffled)? - vp).abs());

        let mid: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect();
        worst_midpoint = worst_midpoint.max(omega.eval(&mid)? - 0.5 * (vp + vq));
    }

    let mut max_vertex_value: f64 = 0.0;
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        max_vertex_value = max_vertex_value.max(omega.eval(&e)?.abs());
    }

    // Path toward a vertex: the gradient of a Legendre-type generator
    // must grow without bound as the boundary is approached.
    let mut boundary_grad_norms = Vec::with_capacity(6);
    for j in 1..=6 {
        let t: f64 = 1.0 - 10.0_f64.powi(-j);
        let p: Vec<f64> = (0..k)
            .map(|i| (1.0 - t) / k as f64 + if i == 0 { t } else { 0.0 })
            .collect();
        let norm = omega
            .full_grad(&p)?
            .into_iter()
            .fold(0.0_f64, |acc, gi| acc.max(gi.abs()));
        boundary_grad_norms.push(norm);
    }
    let boundary_growth_ratio = boundary_grad_norms[5] / boundary_grad_norms[0].max(1e-300);
    let growing = boundary_grad_norms
        .windows(2)
        .all(|w| w[1] >= 0.99 * w[0])
        && boundary_growth_ratio >= 2.0;

    let pass = symmetry_gap <= 1e-10
        && max_vertex_value <= 1e-12
        && max_value <= 1e-12
        && worst_midpoint <= 1e-10
        && growing;
    Ok(NegentropyCheckReport {
        name: omega.name(),
        samples,
        symmetry_gap,
        max_vertex_value,
        max_value,
        worst_midpoint_gap: worst_midpoint,
        boundary_grad_norms,
        boundary_growth_ratio,
        pass,
        note: "sampled, not proven".into(),
    })
}

/// Finite-difference Hessian of the reduced form `Ω̃` at `p_tilde`.
pub fn reduced_hessian_fd(
    omega: &Negentropy,
    p_tilde: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    fd_hessian(|w| omega.reduced_eval(w), p_tilde, step)
}

/// Smallest eigenvalue of (the symmetric part of) a matrix.
pub fn min_eigenvalue_symmetric(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

// ===================================================================
// The induced template
// ===================================================================

/// Generator plus target margin: everything needed to evaluate the
/// induced template and loss.
#[derive(Clone, Debug)]
pub struct FySpec {
    negentropy: Negentropy,
    mu: f64,
}

impl FySpec {
    pub fn new(negentropy: Negentropy, mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidTransform(format!(
                "target margin must be nonnegative and finite, got {mu}"
            )));
        }
        Ok(FySpec { negentropy, mu })
    }

    pub fn negentropy(&self) -> &Negentropy {
        &self.negentropy
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn arity(&self) -> usize {
        self.negentropy.arity()
    }

    /// Per-class cost vector `c_y = μ(1 − e_y)`: a margin of `μ` is asked
    /// from every class except the true one.
    pub fn cost_vector(&self, y: usize) -> Result<Vec<f64>> {
        let k = self.arity();
        Error::check_class(y, k)?;
        Ok((1..=k)
            .map(|i| if i == y { 0.0 } else { self.mu })
            .collect())
    }

    fn is_shannon(&self) -> bool {
        matches!(self.negentropy, Negentropy::Shannon { .. })
    }
}

/// One solved evaluation: the template value, the maximizing
/// distribution (full `k` coordinates), and the solver certificate.
#[derive(Clone, Debug, Serialize)]
pub struct FySolution {
    pub value: f64,
    pub maximizer: Vec<f64>,
    /// Frank-Wolfe duality gap at the returned point; an upper bound on
    /// `max − value`. Zero for closed-form evaluations.
    pub gap: f64,
    pub iterations: usize,
    pub exact: bool,
}

fn logsumexp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + w.iter().map(|&wi| (wi - m).exp()).sum::<f64>().ln()
}

const SIMPLEX_MAX_ITERS: usize = 500;
const SIMPLEX_GAP_TOL: f64 = 1e-8;

/// Arity of a Shannon generator reached through zero-padding alone.
fn shannon_arity(omega: &Negentropy) -> Option<usize> {
    match omega {
        Negentropy::Shannon { k } => Some(*k),
        Negentropy::ZeroPadded { inner } => shannon_arity(inner).map(|k| k - 1),
        _ => None,
    }
}

/// If `omega` is a scalar transform of a Shannon generator, possibly
/// wrapped in zero-padding, return the transform and its frozen center.
/// Padding drops straight through: Shannon of a padded vector equals
/// Shannon of the remaining coordinates, so `Θ(0, q)` keeps the exact
/// `g(Ω_sh − c)` shape at the smaller arity.
fn shannon_core(omega: &Negentropy) -> Option<(&GTransform, f64)> {
    match omega {
        Negentropy::Transformed { base, g, center } => {
            shannon_arity(base).map(|_| (g, *center))
        }
        Negentropy::ZeroPadded { inner } => shannon_core(inner),
        _ => None,
    }
}

/// Maximize `−g(Ω_sh(p) − c) + g(−c) + ⟨p, w⟩` by collapsing the KKT
/// system to one scalar equation. Stationarity forces
/// `p ∝ exp(w / s)` with `s = g′(Ω_sh(p) − c)`, and
/// `s ↦ g′(Ω_sh(p(s)) − c) − s` is continuous and changes sign, so
/// bisection pins `s` to machine precision. Ascent iterations cannot do
/// this: `g′ = 0` at the uniform distribution flattens the objective to
/// fourth order and the Frank-Wolfe gap crawls.
fn maximize_g_of_shannon(
    omega: &Negentropy,
    g: &GTransform,
    center: f64,
    w: &[f64],
) -> Result<FySolution> {
    let k = w.len();
    let objective = |p: &[f64]| -> Result<f64> {
        Ok(-omega.eval(p)? + p.iter().zip(w).map(|(&pi, &wi)| pi * wi).sum::<f64>())
    };

    let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    if w_max == w_min {
        // Constant coefficients: the linear term is flat and the
        // transform is smallest exactly at the uniform distribution.
        let p = vec![1.0 / k as f64; k];
        return Ok(FySolution {
            value: objective(&p)?,
            maximizer: p,
            gap: 0.0,
            iterations: 0,
            exact: false,
        });
    }

    // softmax(w / s) together with its (stable) log; exponents are
    // clamped where exp underflows anyway, so no ln(0) ever appears.
    let dist_at = |s: f64| -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = w.iter().map(|&wi| ((wi - w_max) / s).max(-745.0)).collect();
        let ln_z = t.iter().map(|&ti| ti.exp()).sum::<f64>().ln();
        let ln_p: Vec<f64> = t.iter().map(|&ti| ti - ln_z).collect();
        let p = ln_p.iter().map(|&li| li.exp()).collect();
        (p, ln_p)
    };
    let balance = |s: f64| -> f64 {
        let (p, ln_p) = dist_at(s);
        let omega_sh: f64 = p.iter().zip(&ln_p).map(|(&pi, &li)| pi * li).sum();
        g.d1(omega_sh - center) - s
    };

    // Bracket the root. As s → 0 the softmax concentrates (Ω_sh → max),
    // so the balance starts positive for any non-constant w; for large s
    // the −s term wins.
    let mut iterations = 0usize;
    let mut lo = 1.0_f64;
    while balance(lo) <= 0.0 && lo >= 1e-300 {
        lo *= 0.5;
        iterations += 1;
    }
    let mut hi = 2.0 * lo.max(1.0);
    while balance(hi) > 0.0 {
        hi *= 2.0;
        iterations += 1;
        if hi > 1e300 {
            return Err(Error::SolverFailure(
                "transformed-Shannon balance equation has no finite root".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        iterations += 1;
        if balance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let s = 0.5 * (lo + hi);
    let (p, ln_p) = dist_at(s);
    let omega_sh: f64 = p.iter().zip(&ln_p).map(|(&pi, &li)| pi * li).sum();
    let scale = g.d1(omega_sh - center);
    // ∇f_i = w_i − g′(Ω_sh − c)(ln p_i + 1).
    let grad: Vec<f64> = w
        .iter()
        .zip(&ln_p)
        .map(|(&wi, &li)| wi - scale * (li + 1.0))
        .collect();
    let g_top = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap =
        (g_top - grad.iter().zip(&p).map(|(&gi, &pi)| gi * pi).sum::<f64>()).max(0.0);
    Ok(FySolution {
        value: objective(&p)?,
        maximizer: p,
        gap,
        iterations,
        exact: false,
    })
}

/// Maximize `f(p) = −Ω(p) + ⟨p, w⟩` over the full simplex. Transforms of
/// Shannon go through the scalar reduction above; everything else runs
/// entropic mirror ascent with backtracking, deterministic from the
/// uniform start.
fn maximize_over_simplex(omega: &Negentropy, w: &[f64]) -> Result<FySolution> {
    const FLOOR: f64 = 1e-30;

    let k = omega.arity();
    Error::check_len(w.len(), k)?;
    if let Some((g, center)) = shannon_core(omega) {
        let sol = maximize_g_of_shannon(omega, g, center, w)?;
        if sol.gap <= SIMPLEX_GAP_TOL {
            return Ok(sol);
        }
        // Otherwise fall through and let ascent try; the certificate
        // below is what counts either way.
    }

    let mut p = vec![1.0 / k as f64; k];
    let objective = |p: &[f64]| -> Result<f64> {
        Ok(-omega.eval(p)? + p.iter().zip(w).map(|(&pi, &wi)| pi * wi).sum::<f64>())
    };
    let mut f_cur = objective(&p)?;
    let mut eta = 1.0_f64;
    let mut iterations = 0;

    for iter in 0..SIMPLEX_MAX_ITERS {
        iterations = iter;
        let grad_omega = omega.full_grad(&p)?;
        let g: Vec<f64> = w.iter().zip(&grad_omega).map(|(&wi, &oi)| wi - oi).collect();
        let g_max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gap = g_max - g.iter().zip(&p).map(|(&gi, &pi)| gi * pi).sum::<f64>();
        if gap <= SIMPLEX_GAP_TOL {
            return Ok(FySolution {
                value: f_cur,
                maximizer: p,
                gap,
                iterations: iter,
                exact: false,
            });
        }

        // Multiplicative step, accepted only on strict improvement —
        // tolerating flat steps lets the step size inflate and the
        // iterate orbit the optimum instead of approaching it.
        let mut stepped = false;
        while eta >= 1e-18 {
            let mut cand: Vec<f64> = p
                .iter()
                .zip(&g)
                .map(|(&pi, &gi)| (pi * (eta * (gi - g_max)).exp()).max(FLOOR))
                .collect();
            let total: f64 = cand.iter().sum();
            for ci in &mut cand {
                *ci /= total;
            }
            let f_new = objective(&cand)?;
            if f_new > f_cur {
                p = cand;
                f_cur = f_new;
                eta = (eta * 1.5).min(1e12);
                stepped = true;
                break;
            }
            eta *= 0.5;
        }
        if !stepped {
            // No mirror step of any size improves the objective: the
            // iterate is numerically settled. The certificate decides.
            break;
        }
    }

    let grad_omega = omega.full_grad(&p)?;
    let g: Vec<f64> = w.iter().zip(&grad_omega).map(|(&wi, &oi)| wi - oi).collect();
    let g_max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = g_max - g.iter().zip(&p).map(|(&gi, &pi)| gi * pi).sum::<f64>();
    if gap <= SIMPLEX_GAP_TOL {
        return Ok(FySolution {
            value: f_cur,
            maximizer: p,
            gap,
            iterations,
            exact: false,
        });
    }
    Err(Error::SolverFailure(format!(
        "simplex ascent gap {gap:.3e} > {SIMPLEX_GAP_TOL:.0e} after {iterations} iterations"
    )))
}

/// Coefficient vector for the template problem at margins `z`: the
/// reduced coordinates carry `μ − z_i`, the slack class carries `0`.
fn template_coefficients(spec: &FySpec, z: &[f64]) -> Result<Vec<f64>> {
    Error::check_len(z.len(), spec.arity() - 1)?;
    for &zi in z {
        if !zi.is_finite() {
            return Err(Error::NonFinite(format!("template input contains {zi}")));
        }
    }
    let mut w: Vec<f64> = z.iter().map(|&zi| spec.mu - zi).collect();
    w.push(0.0);
    Ok(w)
}

/// Evaluate the template, using the closed form where one exists
/// (Shannon: `ψ(z) = log Σ e^{w}` with a softmax maximizer).
pub fn fy_template_eval(spec: &FySpec, z: &[f64]) -> Result<FySolution> {
    let w = template_coefficients(spec, z)?;
    if spec.is_shannon() {
        let value = logsumexp(&w);
        let maximizer: Vec<f64> = w.iter().map(|&wi| (wi - value).exp()).collect();
        return Ok(FySolution {
            value,
            maximizer,
            gap: 0.0,
            iterations: 0,
            exact: true,
        });
    }
    maximize_over_simplex(spec.negentropy(), &w)
}

/// Evaluate the template through the iterative solver even when a closed
/// form exists; used to exercise the solver against exact answers.
pub fn fy_template_eval_iterative(spec: &FySpec, z: &[f64]) -> Result<FySolution> {
    let w = template_coefficients(spec, z)?;
    maximize_over_simplex(spec.negentropy(), &w)
}

/// The template object plugged into [`Template::FenchelYoung`].
#[derive(Clone, Debug)]
pub struct FyTemplate {
    spec: FySpec,
}

impl FyTemplate {
    pub fn new(spec: FySpec) -> Self {
        FyTemplate { spec }
    }

    pub fn spec(&self) -> &FySpec {
        &self.spec
    }

    pub fn arity(&self) -> usize {
        self.spec.arity()
    }

    pub fn name(&self) -> String {
        format!(
            "fenchel_young({}, mu={})",
            self.spec.negentropy.name(),
            self.spec.mu
        )
    }

    /// Closed-form evaluation exists only for the Shannon generator.
    pub fn eval_is_exact(&self) -> bool {
        self.spec.is_shannon()
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        Ok(fy_template_eval(&self.spec, z)?.value)
    }

    /// `∇ψ(z) = −p̃*` — the negated reduced maximizer (Danskin).
    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        let sol = fy_template_eval(&self.spec, z)?;
        Ok(sol.maximizer[..self.arity() - 1]
            .iter()
            .map(|&pi| -pi)
            .collect())
    }

    /// Wrap into the template enum.
    pub fn into_template(self) -> Template {
        Template::FenchelYoung(Box::new(self))
    }
}

// ===================================================================
// The induced loss and its cross-checks
// ===================================================================

/// Loss value through the template path: `L_y(v) = ψ(ρ_y D v)`.
pub fn fy_loss_eval(spec: &FySpec, y: usize, v: &[f64]) -> Result<FySolution> {
    let k = spec.arity();
    Error::check_class(y, k)?;
    Error::check_len(v.len(), k)?;
    fy_template_eval(spec, &rho_apply(y, &d_apply(v)))
}

/// Loss value from the defining maximization, bypassing the label code:
/// `L_y(v) = max_{p ∈ Δ} −Ω(p) + ⟨p, v + c_y⟩ − v_y` with cost
/// `c_y = μ(1 − e_y)`.
pub fn fy_loss_direct(spec: &FySpec, y: usize, v: &[f64]) -> Result<FySolution> {
    let k = spec.arity();
    Error::check_class(y, k)?;
    Error::check_len(v.len(), k)?;
    let cost = spec.cost_vector(y)?;
    let w: Vec<f64> = v.iter().zip(&cost).map(|(&vi, &ci)| vi + ci).collect();
    let mut sol = maximize_over_simplex(spec.negentropy(), &w)?;
    sol.value -= v[y - 1];
    Ok(sol)
}

/// Agreement report between the two loss paths.
#[derive(Clone, Debug, Serialize)]
pub struct FyLossCrossCheck {
    pub template_value: f64,
    pub direct_value: f64,
    pub deviation: f64,
    pub pass: bool,
}

pub fn fy_loss_cross_check(spec: &FySpec, y: usize, v: &[f64]) -> Result<FyLossCrossCheck> {
    let template_value = fy_loss_eval(spec, y, v)?.value;
    let direct_value = fy_loss_direct(spec, y, v)?.value;
    let deviation = (template_value - direct_value).abs();
    Ok(FyLossCrossCheck {
        template_value,
        direct_value,
        deviation,
        pass: deviation <= 1e-6,
    })
}

/// Agreement report between the two class-removal routes.
#[derive(Clone, Debug, Serialize)]
pub struct FyCommuteReport {
    pub limit_value: f64,
    pub padded_value: f64,
    pub deviation: f64,
    pub pass: bool,
}

/// Removing a class from the induced template must equal inducing from
/// the zero-padded generator: `trunc[ψ^Ω] = ψ^{trunc[Ω]}`. The left side
/// runs the numeric λ-schedule on the full template; the right side is
/// forced through the iterative solver so the comparison never reduces
/// to one closed form against itself.
pub fn fy_truncation_commute_check(spec: &FySpec, q: &[f64]) -> Result<FyCommuteReport> {
    let k = spec.arity();
    if k < 3 {
        return Err(Error::InvalidArity { min: 3, got: k });
    }
    Error::check_len(q.len(), k - 2)?;

    let full = FyTemplate::new(spec.clone()).into_template();
    let schedule = TruncationSchedule::for_template(&full);
    let limit_value = Template::NumericTruncation {
        inner: Box::new(full),
        schedule,
    }
    .eval(q)?;

    let padded = FySpec::new(negentropy_truncate(spec.negentropy())?, spec.mu)?;
    let padded_value = fy_template_eval_iterative(&padded, q)?.value;

    let deviation = (limit_value - padded_value).abs();
    Ok(FyCommuteReport {
        limit_value,
        padded_value,
        deviation,
        pass: deviation <= 1e-5,
    })
}
