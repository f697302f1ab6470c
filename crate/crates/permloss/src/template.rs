//! Loss templates: the symmetric functions `ψ: R^(k−1) → R` that generate
//! every loss in the crate, plus combinators and full-loss assembly.
//!
//! A template only ever sees the class-adjusted margin vector `ρ_y D v`, so
//! one symmetric function of `k−1` arguments induces the whole k-vector of
//! class losses. Built-ins:
//!
//! - [`Template::cross_entropy`]: `ψ(z) = log(1 + Σ_j e^(−z_j))`, evaluated
//!   in shifted form so it is finite for any input.
//! - [`Template::exponential`]: `ψ(z) = Σ_j e^(−z_j)`.
//! - [`Template::ww_hinge`]: `ψ(z) = Σ_j max(0, 1 − z_j)` (pairwise hinge).
//! - [`Template::crammer_singer`]: `ψ(z) = max_j max(0, 1 − z_j)`.
//! - [`Template::gamma_phi`]: the composite family `γ(offset + Σ_j φ(z_j))`
//!   with user-supplied scalar pieces; the first three built-ins above are
//!   (or behave as) members of it.
//! - Fenchel-Young templates (built in [`crate::fenchel_young`]) and
//!   numeric class-removal limits (built in [`crate::truncation`]) plug in
//!   as further variants.
//!
//! Combinators [`Template::scale`] and [`Template::add`] preserve symmetry
//! and regularity (for positive weights), which is how mixtures like
//! `½·(cross-entropy + exponential)` are expressed.

use crate::fenchel_young::FyTemplate;
use crate::label_code::{d_apply, d_transpose_apply, rho_apply, rho_transpose_apply, LabelCode, Permutation};
use crate::truncation::TruncationSchedule;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

/// Shared scalar closure type for the γ/φ pieces.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

// ===================================================================
// Gamma-Phi scalar pairs
// ===================================================================

/// The scalar data of a composite template `ψ(z) = γ(c + Σ_j φ(z_j))`:
/// an outer transform `γ` and an inner decreasing penalty `φ`, each with
/// first and second derivatives, plus
/// - `phi_limit`: `lim_{t→+∞} φ(t)` (used by closed-form class removal),
/// - `smooth`: whether derivatives may be exposed,
/// - `input_cap`: if set, inputs below `−cap` are rejected instead of
///   letting `φ` overflow (`e^700` is near the largest finite double;
///   large *positive* inputs only underflow and stay exact).
#[derive(Clone)]
pub struct GammaPhiSpec {
    name: String,
    gamma: ScalarFn,
    gamma_d1: ScalarFn,
    gamma_d2: ScalarFn,
    phi: ScalarFn,
    phi_d1: ScalarFn,
    phi_d2: ScalarFn,
    phi_limit: f64,
    smooth: bool,
    input_cap: Option<f64>,
}

impl fmt::Debug for GammaPhiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GammaPhiSpec")
            .field("name", &self.name)
            .field("phi_limit", &self.phi_limit)
            .field("smooth", &self.smooth)
            .field("input_cap", &self.input_cap)
            .finish()
    }
}

/// Numerically stable `log(1 + e^s)`.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Logistic sigmoid `1 / (1 + e^(−s))`, stable on both tails.
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl GammaPhiSpec {
    /// The pair `γ(t) = log(1 + t)`, `φ(t) = e^(−t)` — composing them gives
    /// cross-entropy. Used by the regularity condition checker; evaluation
    /// of the actual cross-entropy template goes through the shifted form.
    pub fn cross_entropy_pair() -> Self {
        GammaPhiSpec {
            name: "log1p_of_exp_neg".into(),
            gamma: Arc::new(f64::ln_1p),
            gamma_d1: Arc::new(|t| 1.0 / (1.0 + t)),
            gamma_d2: Arc::new(|t| -1.0 / ((1.0 + t) * (1.0 + t))),
            phi: Arc::new(|t| (-t).exp()),
            phi_d1: Arc::new(|t| -(-t).exp()),
            phi_d2: Arc::new(|t| (-t).exp()),
            phi_limit: 0.0,
            smooth: true,
            input_cap: Some(700.0),
        }
    }

    /// `γ = id`, `φ(t) = e^(−t)`: the multiclass exponential template.
    pub fn exponential() -> Self {
        GammaPhiSpec {
            name: "exp_neg".into(),
            gamma: Arc::new(|t| t),
            gamma_d1: Arc::new(|_| 1.0),
            gamma_d2: Arc::new(|_| 0.0),
            phi: Arc::new(|t| (-t).exp()),
            phi_d1: Arc::new(|t| -(-t).exp()),
            phi_d2: Arc::new(|t| (-t).exp()),
            phi_limit: 0.0,
            smooth: true,
            input_cap: Some(700.0),
        }
    }

    /// `γ = id`, `φ(t) = max(0, 1 − t)`: the pairwise hinge. Not smooth;
    /// derivative requests on the composed template are rejected.
    pub fn ww_hinge() -> Self {
        GammaPhiSpec {
            name: "hinge".into(),
            gamma: Arc::new(|t| t),
            gamma_d1: Arc::new(|_| 1.0),
            gamma_d2: Arc::new(|_| 0.0),
            phi: Arc::new(|t| (1.0 - t).max(0.0)),
            phi_d1: Arc::new(|t| if t < 1.0 { -1.0 } else { 0.0 }),
            phi_d2: Arc::new(|_| 0.0),
            phi_limit: 0.0,
            smooth: false,
            input_cap: None,
        }
    }

    /// Softplus-smoothed hinge `φ_τ(t) = τ·log(1 + e^((1−t)/τ))`.
    /// Converges to the hinge as `τ → 0`; used where a differentiable
    /// stand-in for the pairwise hinge is needed.
    pub fn smoothed_hinge(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidTransform(format!(
                "smoothing temperature must be positive, got {tau}"
            )));
        }
        Ok(GammaPhiSpec {
            name: format!("smoothed_hinge(tau={tau})"),
            gamma: Arc::new(|t| t),
            gamma_d1: Arc::new(|_| 1.0),
            gamma_d2: Arc::new(|_| 0.0),
            phi: Arc::new(move |t| tau * softplus((1.0 - t) / tau)),
            phi_d1: Arc::new(move |t| -sigmoid((1.0 - t) / tau)),
            phi_d2: Arc::new(move |t| {
                let s = sigmoid((1.0 - t) / tau);
                s * (1.0 - s) / tau
            }),
            phi_limit: 0.0,
            smooth: true,
            input_cap: None,
        })
    }

    /// Fully custom pair. `phi_limit` must be the honest limit of `φ` at
    /// `+∞`; the closed-form class-removal path relies on it.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: impl Into<String>,
        gamma: ScalarFn,
        gamma_d1: ScalarFn,
        gamma_d2: ScalarFn,
        phi: ScalarFn,
        phi_d1: ScalarFn,
        phi_d2: ScalarFn,
        phi_limit: f64,
        smooth: bool,
        input_cap: Option<f64>,
    ) -> Self {
        GammaPhiSpec {
            name: name.into(),
            gamma,
            gamma_d1,
            gamma_d2,
            phi,
            phi_d1,
            phi_d2,
            phi_limit,
            smooth,
            input_cap,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn gamma(&self, t: f64) -> f64 {
        (self.gamma)(t)
    }
    pub fn gamma_d1(&self, t: f64) -> f64 {
        (self.gamma_d1)(t)
    }
    pub fn gamma_d2(&self, t: f64) -> f64 {
        (self.gamma_d2)(t)
    }
    pub fn phi(&self, t: f64) -> f64 {
        (self.phi)(t)
    }
    pub fn phi_d1(&self, t: f64) -> f64 {
        (self.phi_d1)(t)
    }
    pub fn phi_d2(&self, t: f64) -> f64 {
        (self.phi_d2)(t)
    }
    pub fn phi_limit(&self) -> f64 {
        self.phi_limit
    }
    pub fn is_smooth(&self) -> bool {
        self.smooth
    }
    pub fn input_cap(&self) -> Option<f64> {
        self.input_cap
    }
}

// ===================================================================
// Templates
// ===================================================================

/// A symmetric function `ψ: R^(k−1) → R` with optional derivatives.
#[derive(Clone, Debug)]
pub enum Template {
    /// `log(1 + Σ_j e^(−z_j))`, shifted evaluation.
    CrossEntropy { k: usize },
    /// `γ(offset + Σ_j φ(z_j))`. The offset accumulates `φ` limits when
    /// classes are removed.
    GammaPhi {
        k: usize,
        spec: GammaPhiSpec,
        offset: f64,
    },
    /// `max_j max(0, 1 − z_j)`.
    CrammerSinger { k: usize },
    /// `factor · inner`, `factor > 0`.
    Scaled { factor: f64, inner: Box<Template> },
    /// Pointwise sum of two templates of equal arity.
    Sum {
        left: Box<Template>,
        right: Box<Template>,
    },
    /// Support-function form driven by a negentropy; evaluated by the
    /// solver in [`crate::fenchel_young`].
    FenchelYoung(Box<FyTemplate>),
    /// `w ↦ lim_{λ→∞} inner(λ, w)`, taken numerically along a schedule.
    NumericTruncation {
        inner: Box<Template>,
        schedule: TruncationSchedule,
    },
}

fn check_arity(k: usize) -> Result<()> {
    if k < 2 {
        Err(Error::InvalidArity { min: 2, got: k })
    } else {
        Ok(())
    }
}

impl Template {
    // ----- constructors -----

    pub fn cross_entropy(k: usize) -> Result<Template> {
        check_arity(k)?;
        Ok(Template::CrossEntropy { k })
    }

    pub fn exponential(k: usize) -> Result<Template> {
        check_arity(k)?;
        Ok(Template::GammaPhi {
            k,
            spec: GammaPhiSpec::exponential(),
            offset: 0.0,
        })
    }

    pub fn ww_hinge(k: usize) -> Result<Template> {
        check_arity(k)?;
        Ok(Template::GammaPhi {
            k,
            spec: GammaPhiSpec::ww_hinge(),
            offset: 0.0,
        })
    }

    pub fn crammer_singer(k: usize) -> Result<Template> {
        check_arity(k)?;
        Ok(Template::CrammerSinger { k })
    }

    pub fn gamma_phi(k: usize, spec: GammaPhiSpec) -> Result<Template> {
        check_arity(k)?;
        Ok(Template::GammaPhi {
            k,
            spec,
            offset: 0.0,
        })
    }

    /// Positive rescaling; preserves symmetry, convexity and regularity.
    pub fn scale(self, factor: f64) -> Result<Template> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidTransform(format!(
                "scale factor must be positive and finite, got {factor}"
            )));
        }
        Ok(Template::Scaled {
            factor,
            inner: Box::new(self),
        })
    }

    /// Pointwise sum; arities must agree.
    pub fn add(self, other: Template) -> Result<Template> {
        Error::check_len(other.arity(), self.arity())?;
        Ok(Template::Sum {
            left: Box::new(self),
            right: Box::new(other),
        })
    }

    // ----- shape -----

    /// Number of classes `k` the template serves.
    pub fn arity(&self) -> usize {
        match self {
            Template::CrossEntropy { k }
            | Template::GammaPhi { k, .. }
            | Template::CrammerSinger { k } => *k,
            Template::Scaled { inner, .. } => inner.arity(),
            Template::Sum { left, .. } => left.arity(),
            Template::FenchelYoung(fy) => fy.arity(),
            Template::NumericTruncation { inner, .. } => inner.arity() - 1,
        }
    }

    /// Input dimension `k − 1`.
    pub fn dim(&self) -> usize {
        self.arity() - 1
    }

    /// Human-readable name for reports and error messages.
    pub fn name(&self) -> String {
        match self {
            Template::CrossEntropy { k } => format!("cross_entropy(k={k})"),
            Template::GammaPhi { k, spec, offset } => {
                if *offset == 0.0 {
                    format!("gamma_phi({}, k={k})", spec.name)
                } else {
                    format!("gamma_phi({}, k={k}, offset={offset})", spec.name)
                }
            }
            Template::CrammerSinger { k } => format!("crammer_singer(k={k})"),
            Template::Scaled { factor, inner } => format!("scaled({factor}, {})", inner.name()),
            Template::Sum { left, right } => format!("sum({}, {})", left.name(), right.name()),
            Template::FenchelYoung(fy) => fy.name(),
            Template::NumericTruncation { inner, .. } => {
                format!("numeric_class_removal({})", inner.name())
            }
        }
    }

    /// Whether first derivatives are well-defined and exposed.
    pub fn is_smooth(&self) -> bool {
        match self {
            Template::CrossEntropy { .. } => true,
            Template::GammaPhi { spec, .. } => spec.smooth,
            Template::CrammerSinger { .. } => false,
            Template::Scaled { inner, .. } => inner.is_smooth(),
            Template::Sum { left, right } => left.is_smooth() && right.is_smooth(),
            Template::FenchelYoung(_) => true,
            Template::NumericTruncation { .. } => false,
        }
    }

    /// Whether the underlying function is differentiable, even when no
    /// derivative code path exists. Numeric class-removal wrappers
    /// evaluate a smooth limit but cannot differentiate through the
    /// schedule, so they report `is_smooth() == false` while remaining
    /// smooth in this sense; probes fall back to finite differences.
    pub fn underlying_smooth(&self) -> bool {
        match self {
            Template::Scaled { inner, .. } => inner.underlying_smooth(),
            Template::Sum { left, right } => {
                left.underlying_smooth() && right.underlying_smooth()
            }
            Template::NumericTruncation { inner, .. } => inner.underlying_smooth(),
            _ => self.is_smooth(),
        }
    }

    /// Whether a closed-form Hessian is available.
    pub fn has_hessian(&self) -> bool {
        match self {
            Template::CrossEntropy { .. } => true,
            Template::GammaPhi { spec, .. } => spec.smooth,
            Template::CrammerSinger { .. } => false,
            Template::Scaled { inner, .. } => inner.has_hessian(),
            Template::Sum { left, right } => left.has_hessian() && right.has_hessian(),
            Template::FenchelYoung(_) => false,
            Template::NumericTruncation { .. } => false,
        }
    }

    /// True when `eval` is a closed-form computation (no iterative solver
    /// noise). Finite-difference step sizes and probe margins are widened
    /// for templates where this is false.
    pub fn eval_is_exact(&self) -> bool {
        match self {
            Template::CrossEntropy { .. }
            | Template::GammaPhi { .. }
            | Template::CrammerSinger { .. } => true,
            Template::Scaled { inner, .. } => inner.eval_is_exact(),
            Template::Sum { left, right } => left.eval_is_exact() && right.eval_is_exact(),
            Template::FenchelYoung(fy) => fy.eval_is_exact(),
            Template::NumericTruncation { .. } => false,
        }
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        Error::check_len(z.len(), self.dim())?;
        for &zj in z {
            if !zj.is_finite() {
                return Err(Error::NonFinite(format!(
                    "template input contains {zj}"
                )));
            }
        }
        Ok(())
    }

    // ----- evaluation -----

    /// Evaluate `ψ(z)`; `z.len()` must equal [`Template::dim`].
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        self.check_input(z)?;
        let v = match self {
            Template::CrossEntropy { .. } => {
                // log(1 + Σ e^(−z_j)) = m + log(e^(−m) + Σ e^(−z_j − m)),
                // m = max(0, max_j −z_j): every exponent is ≤ 0.
                let m = z.iter().fold(0.0_f64, |acc, &zj| acc.max(-zj));
                let s: f64 = (-m).exp() + z.iter().map(|&zj| (-zj - m).exp()).sum::<f64>();
                m + s.ln()
            }
            Template::GammaPhi { spec, offset, .. } => {
                if let Some(cap) = spec.input_cap {
                    for &zj in z {
                        if zj < -cap {
                            return Err(Error::InputCap {
                                name: spec.name.clone(),
                                value: zj,
                                cap,
                            });
                        }
                    }
                }
                let s: f64 = offset + z.iter().map(|&zj| spec.phi(zj)).sum::<f64>();
                spec.gamma(s)
            }
            Template::CrammerSinger { .. } => {
                let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
                (1.0 - zmin).max(0.0)
            }
            Template::Scaled { factor, inner } => factor * inner.eval(z)?,
            Template::Sum { left, right } => left.eval(z)? + right.eval(z)?,
            Template::FenchelYoung(fy) => fy.eval(z)?,
            Template::NumericTruncation { inner, schedule } => {
                let mut ext = Vec::with_capacity(z.len() + 1);
                ext.push(0.0);
                ext.extend_from_slice(z);
                schedule.limit(|lambda| {
                    ext[0] = lambda;
                    inner.eval(&ext)
                })?
            }
        };
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced {v} at z={z:?}",
                self.name()
            )));
        }
        Ok(v)
    }

    /// Gradient `∇ψ(z)`. Errors on non-smooth templates and on numeric
    /// class-removal wrappers (no derivative path through the limit).
    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        match self {
            Template::CrossEntropy { .. } => {
                let m = z.iter().fold(0.0_f64, |acc, &zj| acc.max(-zj));
                let terms: Vec<f64> = z.iter().map(|&zj| (-zj - m).exp()).collect();
                let denom = (-m).exp() + terms.iter().sum::<f64>();
                Ok(terms.iter().map(|&t| -t / denom).collect())
            }
            Template::GammaPhi { spec, offset, .. } => {
                if !spec.smooth {
                    return Err(Error::NonSmooth(self.name()));
                }
                if let Some(cap) = spec.input_cap {
                    for &zj in z {
                        if zj < -cap {
                            return Err(Error::InputCap {
                                name: spec.name.clone(),
                                value: zj,
                                cap,
                            });
                        }
                    }
                }
                let s: f64 = offset + z.iter().map(|&zj| spec.phi(zj)).sum::<f64>();
                let g1 = spec.gamma_d1(s);
                Ok(z.iter().map(|&zj| g1 * spec.phi_d1(zj)).collect())
            }
            Template::CrammerSinger { .. } => Err(Error::NonSmooth(self.name())),
            Template::Scaled { factor, inner } => {
                let mut g = inner.grad(z)?;
                for gi in &mut g {
                    *gi *= factor;
                }
                Ok(g)
            }
            Template::Sum { left, right } => {
                let mut g = left.grad(z)?;
                for (gi, ri) in g.iter_mut().zip(right.grad(z)?) {
                    *gi += ri;
                }
                Ok(g)
            }
            Template::FenchelYoung(fy) => fy.grad(z),
            Template::NumericTruncation { .. } => {
                Err(Error::DerivativeUnavailable(self.name()))
            }
        }
    }

    /// Hessian `∇²ψ(z)` where a closed form exists.
    pub fn hessian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(z)?;
        let n = self.dim();
        match self {
            Template::CrossEntropy { .. } => {
                // With q_j = e^(−z_j) / (1 + Σ e^(−z_l)):
                // ∇²ψ = diag(q) − q qᵀ.
                let m = z.iter().fold(0.0_f64, |acc, &zj| acc.max(-zj));
                let terms: Vec<f64> = z.iter().map(|&zj| (-zj - m).exp()).collect();
                let denom = (-m).exp() + terms.iter().sum::<f64>();
                let q: Vec<f64> = terms.iter().map(|&t| t / denom).collect();
                let mut h = DMatrix::from_fn(n, n, |r, c| -q[r] * q[c]);
                for j in 0..n {
                    h[(j, j)] += q[j];
                }
                Ok(h)
            }
            Template::GammaPhi { spec, offset, .. } => {
                if !spec.smooth {
                    return Err(Error::NonSmooth(self.name()));
                }
                let s: f64 = offset + z.iter().map(|&zj| spec.phi(zj)).sum::<f64>();
                let g1 = spec.gamma_d1(s);
                let g2 = spec.gamma_d2(s);
                let p1: Vec<f64> = z.iter().map(|&zj| spec.phi_d1(zj)).collect();
                let mut h = DMatrix::from_fn(n, n, |r, c| g2 * p1[r] * p1[c]);
                for j in 0..n {
                    h[(j, j)] += g1 * spec.phi_d2(z[j]);
                }
                Ok(h)
            }
            Template::CrammerSinger { .. } => Err(Error::NonSmooth(self.name())),
            Template::Scaled { factor, inner } => Ok(inner.hessian(z)? * *factor),
            Template::Sum { left, right } => Ok(left.hessian(z)? + right.hessian(z)?),
            Template::FenchelYoung(_) => Err(Error::HessianUnavailable(self.name())),
            Template::NumericTruncation { .. } => {
                Err(Error::DerivativeUnavailable(self.name()))
            }
        }
    }
}

// ===================================================================
// Symmetry and equivariance checks
// ===================================================================

/// Max relative deviation `|ψ(P z) − ψ(z)| / max(1, |ψ(z)|)` over
/// `trials` random (z, permutation) pairs drawn from the box
/// `[−band, band]^(k−1)`. The scaling matters: exponential sums reach
/// 10^13 on wide bands, where even reordering the same addends moves
/// the result by whole ulps.
pub fn symmetry_gap(t: &Template, trials: usize, band: f64, seed: u64) -> Result<f64> {
    let n = t.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-band..band)).collect();
        let perm = Permutation::random(n, &mut rng);
        let zp = perm.apply(&z);
        let a = t.eval(&z)?;
        let b = t.eval(&zp)?;
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

// ===================================================================
// Full loss assembly
// ===================================================================

/// A complete k-class loss: a template together with the label code.
/// `eval(y, v) = ψ(ρ_y D v)`.
#[derive(Clone, Debug)]
pub struct PermLoss {
    template: Template,
    code: LabelCode,
}

impl PermLoss {
    pub fn new(template: Template) -> Result<Self> {
        let code = LabelCode::build(template.arity())?;
        Ok(PermLoss { template, code })
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn code(&self) -> &LabelCode {
        &self.code
    }

    pub fn k(&self) -> usize {
        self.template.arity()
    }

    /// Loss of predicting scores `v ∈ R^k` when the true class is `y`.
    pub fn eval(&self, y: usize, v: &[f64]) -> Result<f64> {
        Error::check_class(y, self.k())?;
        Error::check_len(v.len(), self.k())?;
        self.template.eval(&rho_apply(y, &d_apply(v)))
    }

    /// All `k` class losses at once.
    pub fn loss_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(v.len(), self.k())?;
        let z = d_apply(v);
        (1..=self.k())
            .map(|y| self.template.eval(&rho_apply(y, &z)))
            .collect()
    }

    /// Gradient in score space: `∇_v L_y(v) = Dᵀ ρ_yᵀ ∇ψ(ρ_y D v)`.
    pub fn grad_v(&self, y: usize, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_class(y, self.k())?;
        Error::check_len(v.len(), self.k())?;
        let z = d_apply(v);
        let g = self.template.grad(&rho_apply(y, &z))?;
        Ok(d_transpose_apply(&rho_transpose_apply(y, &g)))
    }

    /// Max relative deviation of the relabelling law
    /// `L_y(S_σ v) = L_{σ(y)}(v)` over all classes, for one permutation,
    /// scaled by `max(1, |L_{σ(y)}(v)|)` so large exponential values are
    /// judged in ulps rather than absolute distance.
    pub fn equivariance_gap(&self, v: &[f64], sigma: &Permutation) -> Result<f64> {
        Error::check_len(v.len(), self.k())?;
        Error::check_len(sigma.k(), self.k())?;
        let permuted = sigma.apply(v);
        let base = self.loss_vector(v)?;
        let moved = self.loss_vector(&permuted)?;
        let mut worst: f64 = 0.0;
        for y in 1..=self.k() {
            let want = base[sigma.image(y) - 1];
            worst = worst.max((moved[y - 1] - want).abs() / want.abs().max(1.0));
        }
        Ok(worst)
    }
}

// ===================================================================
// Tests
// ===================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn cross_entropy_reference_values() {
        let ce2 = Template::cross_entropy(2).unwrap();
        assert!(
            close(ce2.eval(&[0.0]).unwrap(), 0.69314718055994529, 1e-14),
            "binary value at the origin should be ln 2"
        );
        assert!(close(
            ce2.eval(&[1.0]).unwrap(),
            0.31326168751822286,
            1e-14
        ));
        assert!(close(
            ce2.eval(&[-3.0]).unwrap(),
            3.0485873515737421,
            1e-14
        ));
        assert!(close(
            ce2.eval(&[3.0]).unwrap(),
            0.048587351573741958,
            1e-14
        ));
        let ce3 = Template::cross_entropy(3).unwrap();
        assert!(
            close(ce3.eval(&[0.0, 0.0]).unwrap(), 1.0986122886681098, 1e-14),
            "ternary value at the origin should be ln 3"
        );
    }

    #[test]
    fn cross_entropy_is_finite_under_extreme_inputs() {
        let ce = Template::cross_entropy(3).unwrap();
        for z in [[-900.0, 200.0], [900.0, 900.0], [-745.0, -745.0]] {
            let v = ce.eval(&z).unwrap();
            assert!(v.is_finite(), "shifted form must stay finite at {z:?}");
        }
        // Dominant-term sanity: ψ(−900, 200) ≈ 900.
        assert!(close(ce.eval(&[-900.0, 200.0]).unwrap(), 900.0, 1e-12));
    }

    #[test]
    fn exponential_and_mixture_reference_values() {
        let ex = Template::exponential(3).unwrap();
        assert!(close(
            ex.eval(&[1.0, -1.0]).unwrap(),
            3.0861612696304874,
            1e-14
        ));
        let ex2 = Template::exponential(2).unwrap();
        assert!(close(ex2.eval(&[2.0]).unwrap(), 0.1353352832366127, 1e-14));

        // ½·(cross-entropy + exponential) at the origin: (ln 3 + 2)/2.
        let mix = Template::cross_entropy(3)
            .unwrap()
            .add(Template::exponential(3).unwrap())
            .unwrap()
            .scale(0.5)
            .unwrap();
        assert!(close(
            mix.eval(&[0.0, 0.0]).unwrap(),
            1.549306144334055,
            1e-14
        ));
    }

    #[test]
    fn exponential_rejects_overflowing_input_only_below() {
        let ex = Template::exponential(3).unwrap();
        assert!(matches!(
            ex.eval(&[-701.0, 0.0]),
            Err(Error::InputCap { .. })
        ));
        // Large positive inputs underflow to the exact limit instead.
        assert_eq!(ex.eval(&[1e9, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn hinge_values_and_smoothness_flags() {
        let ww = Template::ww_hinge(3).unwrap();
        let cs = Template::crammer_singer(3).unwrap();
        assert_eq!(ww.eval(&[2.0, 0.5]).unwrap(), 0.5);
        assert_eq!(cs.eval(&[2.0, 0.5]).unwrap(), 0.5);
        assert_eq!(ww.eval(&[-1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(cs.eval(&[-1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(ww.eval(&[2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cs.eval(&[2.0, 3.0]).unwrap(), 0.0);
        assert!(!ww.is_smooth() && !cs.is_smooth());
        assert!(matches!(ww.grad(&[0.0, 0.0]), Err(Error::NonSmooth(_))));
        assert!(matches!(cs.grad(&[0.0, 0.0]), Err(Error::NonSmooth(_))));
    }

    #[test]
    fn binary_hinges_coincide() {
        let ww = Template::ww_hinge(2).unwrap();
        let cs = Template::crammer_singer(2).unwrap();
        for w in [-2.0, -0.5, 0.0, 0.7, 1.0, 4.0] {
            assert_eq!(
                ww.eval(&[w]).unwrap(),
                cs.eval(&[w]).unwrap(),
                "at k=2 both reduce to max(0, 1−w)"
            );
        }
    }

    #[test]
    fn smoothed_hinge_tracks_hinge() {
        let smooth = Template::gamma_phi(3, GammaPhiSpec::smoothed_hinge(1e-3).unwrap()).unwrap();
        let hinge = Template::ww_hinge(3).unwrap();
        for z in [[0.0, 0.0], [2.0, -1.0], [0.9, 1.1]] {
            let a = smooth.eval(&z).unwrap();
            let b = hinge.eval(&z).unwrap();
            assert!(
                (a - b).abs() < 5e-3,
                "smoothed hinge should be within a few temperatures of the hinge: {a} vs {b}"
            );
        }
        assert!(smooth.is_smooth());
    }

    #[test]
    fn combinator_validation() {
        let ce = Template::cross_entropy(3).unwrap();
        assert!(ce.clone().scale(0.0).is_err(), "zero scale rejected");
        assert!(ce.clone().scale(-1.0).is_err(), "negative scale rejected");
        let ce4 = Template::cross_entropy(4).unwrap();
        assert!(ce.add(ce4).is_err(), "arity mismatch rejected");
    }

    #[test]
    fn gradients_match_reference_formulas() {
        // Cross-entropy: at z = 0 (k=3) the gradient is (−1/3, −1/3).
        let ce = Template::cross_entropy(3).unwrap();
        let g = ce.grad(&[0.0, 0.0]).unwrap();
        assert!(close(g[0], -1.0 / 3.0, 1e-14));
        assert!(close(g[1], -1.0 / 3.0, 1e-14));
        // Exponential: ∇ψ = −e^(−z).
        let ex = Template::exponential(3).unwrap();
        let g = ex.grad(&[1.0, -1.0]).unwrap();
        assert!(close(g[0], -(-1.0_f64).exp(), 1e-14));
        assert!(close(g[1], -(1.0_f64).exp(), 1e-14));
    }

    #[test]
    fn loss_reference_value_and_equivariance() {
        let loss = PermLoss::new(Template::cross_entropy(3).unwrap()).unwrap();
        // y = 1, v = (2, 0, 0): margins (−2, 0), class-1 view (2, 2):
        // value log(1 + 2 e^(−2)).
        assert!(close(
            loss.eval(1, &[2.0, 0.0, 0.0]).unwrap(),
            0.23954476622188453,
            1e-14
        ));
        let sigma = Permutation::from_one_based(&[3, 1, 2]).unwrap();
        let gap = loss.equivariance_gap(&[0.4, -1.2, 2.0], &sigma).unwrap();
        assert!(gap <= 1e-10, "relabelling law violated: gap={gap}");
    }

    #[test]
    fn higher_score_never_costs_more() {
        // A constant score vector cannot prefer any class.
        let loss = PermLoss::new(Template::cross_entropy(4).unwrap()).unwrap();
        let flat = loss.loss_vector(&[1.5; 4]).unwrap();
        for l in &flat {
            assert!(
                (l - flat[0]).abs() <= 1e-15,
                "constant scores gave unequal losses {flat:?}"
            );
        }

        // Score order and loss order stay opposed: whenever v_j ≤ v_y the
        // loss of class j is at least that of class y, strictly so for a
        // strict score gap.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let lv = loss.loss_vector(&v).unwrap();
            for j in 0..4 {
                for y in 0..4 {
                    if v[j] < v[y] {
                        assert!(
                            lv[j] > lv[y],
                            "v={v:?}: score {} < {} but loss {} <= {}",
                            v[j],
                            v[y],
                            lv[j],
                            lv[y]
                        );
                    } else if v[j] == v[y] {
                        assert!(
                            (lv[j] - lv[y]).abs() <= 1e-12,
                            "tied scores, unequal losses at {v:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn symmetry_of_all_builtins() {
        for k in 2..=6 {
            let templates = vec![
                Template::cross_entropy(k).unwrap(),
                Template::exponential(k).unwrap(),
                Template::ww_hinge(k).unwrap(),
                Template::crammer_singer(k).unwrap(),
            ];
            for t in templates {
                let gap = symmetry_gap(&t, 1000, 30.0, 11).unwrap();
                assert!(
                    gap <= 1e-10,
                    "{} not symmetric: gap={gap}",
                    t.name()
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// The full loss never changes under simultaneous relabelling.
        #[test]
        fn equivariance_for_random_mixtures(
            v in proptest::collection::vec(-8.0f64..8.0, 3..6),
            seed in 0u64..500,
        ) {
            let k = v.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = Permutation::random(k, &mut rng);
            let t = Template::cross_entropy(k).unwrap()
                .add(Template::exponential(k).unwrap()).unwrap()
                .scale(0.5).unwrap();
            let loss = PermLoss::new(t).unwrap();
            let gap = loss.equivariance_gap(&v, &sigma).unwrap();
            prop_assert!(gap <= 1e-10, "gap={gap}");
        }

        /// Gamma-phi gradient agrees with central differences.
        #[test]
        fn gamma_phi_grad_matches_fd(
            z in proptest::collection::vec(-3.0f64..3.0, 2..5),
        ) {
            let t = Template::exponential(z.len() + 1).unwrap();
            let g = t.grad(&z).unwrap();
            let h = 1e-6;
            for j in 0..z.len() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let fd = (t.eval(&zp).unwrap() - t.eval(&zm).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0),
                    "coordinate {j}: fd={fd} analytic={}", g[j]);
            }
        }
    }
}
