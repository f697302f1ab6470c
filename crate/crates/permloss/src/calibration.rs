//! Decision-side probes: does a loss actually point at the right label?
//!
//! Three layers of evidence, from exact to sampled:
//!
//! * [`argmax_sign_equiv`] — a label attains the maximal score iff its
//!   relative-margin vector is componentwise nonnegative. This is a finite,
//!   exact statement and is checked as such.
//! * [`positive_normal`] — at a margin point `z`, the probability vector
//!   `p = inverse_link(z)` should be a supporting normal of the loss-vector
//!   surface: `⟨L̄(w) − L̄(z), p⟩ ≥ 0` for every `w`. Sampled, not proven.
//! * [`cc_inequality_probe`] — the conditional risk, minimized over margin
//!   points that rank some *wrong* label first, should stay strictly above
//!   the unconstrained minimum. The constrained minima are found by
//!   penalized descent from multiple starts, so they are feasible *upper
//!   bounds*; a positive gap is evidence, never certification.

use crate::calculus::{conditional_risk, risk_grad, ProbVector};
use crate::label_code::{d_apply, relative_margin, rho_apply, rho_transpose_apply};
use crate::link::{inverse_link, kkt_residual, link, SolverConfig};
use crate::template::{GammaPhiSpec, Template};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

// ===================================================================
// argmax / margin-sign equivalence
// ===================================================================

/// Indices (1-based) of the entries tied for the maximum, by exact
/// comparison. Ties deliberately survive: the equivalence being tested
/// is about argmax *sets*, not a tie-broken representative.
pub fn argmax_set(v: &[f64]) -> Vec<usize> {
    let mut best = f64::NEG_INFINITY;
    for &x in v {
        if x > best {
            best = x;
        }
    }
    (1..=v.len()).filter(|&j| v[j - 1] == best).collect()
}

/// Outcome of [`argmax_sign_equiv`] at a single score vector.
#[derive(Clone, Debug, Serialize)]
pub struct ArgmaxEquivalenceReport {
    pub v: Vec<f64>,
    /// Labels attaining the maximal score (exact ties).
    pub argmax: Vec<usize>,
    /// `margin_nonneg[y−1]`: is `ρ_y(Dv)` componentwise `≥ −tolerance`?
    pub margin_nonneg: Vec<bool>,
    /// `0` when the vector contains exact ties, `1e−12` otherwise.
    pub tolerance: f64,
    /// Membership in `argmax` agrees with `margin_nonneg` for every label.
    pub consistent: bool,
    /// Argmax set of the scores rebuilt from the margins, `v′ = (−Dv, 0)`.
    pub reconstruction_argmax: Vec<usize>,
    pub reconstruction_consistent: bool,
    pub pass: bool,
}

/// Checks, for every label `y`, that `y` attains the maximum of `v`
/// exactly when `relative_margin(y, v) ⪰ 0`, and that the margin vector
/// determines the argmax set: rebuilding scores as `v′ = (−Dv, 0)`
/// (scores relative to the last class) leaves the set unchanged.
///
/// Exact ties are compared with zero tolerance — the margin entries are
/// then exact zeros — while generic vectors get a `1e−12` cushion.
pub fn argmax_sign_equiv(v: &[f64]) -> Result<ArgmaxEquivalenceReport> {
    if v.len() < 2 {
        return Err(Error::InvalidArity { min: 2, got: v.len() });
    }
    for &x in v {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("score {x}")));
        }
    }
    let k = v.len();
    let argmax = argmax_set(v);
    let has_exact_tie = {
        let mut sorted = v.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        sorted.windows(2).any(|w| w[0] == w[1])
    };
    let tolerance = if has_exact_tie { 0.0 } else { 1e-12 };

    let mut margin_nonneg = Vec::with_capacity(k);
    for y in 1..=k {
        let m = relative_margin(y, v);
        margin_nonneg.push(m.iter().all(|&e| e >= -tolerance));
    }
    let consistent =
        (1..=k).all(|y| margin_nonneg[y - 1] == argmax.contains(&y));

    let z = d_apply(v);
    let mut rebuilt: Vec<f64> = z.iter().map(|&e| -e).collect();
    rebuilt.push(0.0);
    let reconstruction_argmax = argmax_set(&rebuilt);
    let reconstruction_consistent = reconstruction_argmax == argmax;

    let pass = consistent && reconstruction_consistent;
    Ok(ArgmaxEquivalenceReport {
        v: v.to_vec(),
        argmax,
        margin_nonneg,
        tolerance,
        consistent,
        reconstruction_argmax,
        reconstruction_consistent,
        pass,
    })
}

// ===================================================================
// positive-normal evidence
// ===================================================================

/// Loss vector in margin coordinates: entry `y` is `ψ(ρ_y z)`.
fn loss_vector_at(t: &Template, z: &[f64]) -> Result<Vec<f64>> {
    (1..=t.arity()).map(|y| t.eval(&rho_apply(y, z))).collect()
}

/// Outcome of [`positive_normal`].
#[derive(Clone, Debug, Serialize)]
pub struct PositiveNormalReport {
    pub template: String,
    pub z: Vec<f64>,
    /// The recovered normal direction, `inverse_link(z)`.
    pub p: Vec<f64>,
    pub samples: usize,
    /// `min_w ⟨L̄(w) − L̄(z), p⟩` over the sampled `w`.
    pub min_inner_product: f64,
    pub inner_products_ok: bool,
    /// `‖link(p) − z‖_∞`; corroborates that `p` is the *only* normal.
    pub round_trip_deviation: f64,
    pub round_trip_ok: bool,
    pub pass: bool,
    pub note: String,
}

/// Recovers `p = inverse_link(z)` and tests it as a supporting normal of
/// the loss-vector surface: for `samples` points `w = z + U[−4,4]^(k−1)`,
/// the inner product `⟨L̄(w) − L̄(z), p⟩` must not drop below `−1e−10`.
/// The singleton claim (no other normal) is corroborated by the link
/// round trip `‖link(p) − z‖_∞ ≤ 1e−6`.
pub fn positive_normal(
    t: &Template,
    z: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PositiveNormalReport> {
    let n = t.dim();
    Error::check_len(z.len(), n)?;
    let p = inverse_link(t, z)?;
    let base = loss_vector_at(t, z)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_inner = f64::INFINITY;
    for _ in 0..samples {
        let w: Vec<f64> =
            z.iter().map(|&zi| zi + rng.gen_range(-4.0..4.0)).collect();
        let lw = loss_vector_at(t, &w)?;
        let inner: f64 = (0..t.arity())
            .map(|i| (lw[i] - base[i]) * p.get(i + 1))
            .sum();
        if inner < min_inner {
            min_inner = inner;
        }
    }
    let inner_products_ok = min_inner >= -1e-10;

    let z_back = link(t, &p, &SolverConfig::default())?;
    let round_trip_deviation = z_back
        .iter()
        .zip(z.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let round_trip_ok = round_trip_deviation <= 1e-6;

    Ok(PositiveNormalReport {
        template: t.name(),
        z: z.to_vec(),
        p: p.as_slice().to_vec(),
        samples,
        min_inner_product: min_inner,
        inner_products_ok,
        round_trip_deviation,
        round_trip_ok,
        pass: inner_products_ok && round_trip_ok,
        note: "sampled, not proven".into(),
    })
}

// ===================================================================
// conditional-risk inequality probe
// ===================================================================

/// Search plan for [`cc_inequality_probe`].
#[derive(Clone, Debug, Serialize)]
pub struct CcProbeConfig {
    /// Quadratic-penalty weights, traversed in order with warm starts.
    pub weights: Vec<f64>,
    /// Independent starting points per wrong label.
    pub restarts: usize,
    /// Descent-iteration budget per penalty weight.
    pub max_steps: usize,
    pub seed: u64,
    /// The gap must exceed this to count as a pass.
    pub margin: f64,
}

impl Default for CcProbeConfig {
    fn default() -> Self {
        CcProbeConfig {
            weights: (0..=6).map(|e| 10f64.powi(e)).collect(),
            restarts: 8,
            max_steps: 400,
            seed: 0,
            margin: 1e-6,
        }
    }
}

impl CcProbeConfig {
    pub fn with_seed(seed: u64) -> Self {
        CcProbeConfig { seed, ..CcProbeConfig::default() }
    }
}

/// Constrained search outcome for one wrong label.
#[derive(Clone, Debug, Serialize)]
pub struct LabelProbe {
    pub label: usize,
    /// Best feasible value found — an upper bound on the true constrained
    /// minimum. `None` when every restart failed.
    pub constrained_min: Option<f64>,
    pub restarts_succeeded: usize,
}

/// Outcome of [`cc_inequality_probe`].
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub template: String,
    /// True when a non-smooth pairwise hinge was replaced by its softplus
    /// smoothing for the search; the verdict is then suggestive only.
    pub smoothed_stand_in: bool,
    pub p: Vec<f64>,
    pub argmax: Vec<usize>,
    /// `C_p` at the link point — the unconstrained minimum.
    pub global_inf: f64,
    /// Stationarity residual at the link point.
    pub kkt_residual: f64,
    /// Minimum over wrong labels of the constrained values; `None` when
    /// the wrong-argmax region is empty (every label already maximal).
    pub inner_inf: Option<f64>,
    pub gap: Option<f64>,
    pub margin: f64,
    pub per_label: Vec<LabelProbe>,
    pub vacuous: bool,
    /// Some wrong label had no successful restart; the verdict is void.
    pub inconclusive: bool,
    pub pass: bool,
    pub note: String,
}

/// Non-smooth templates cannot be searched directly. The pairwise hinge
/// gets a softplus stand-in at temperature `1e−2`; anything else
/// non-smooth is rejected.
fn search_template(t: &Template) -> Result<(Template, bool)> {
    if t.is_smooth() {
        return Ok((t.clone(), false));
    }
    if let Template::GammaPhi { k, spec, .. } = t {
        if spec.name() == "hinge" {
            let sm = Template::gamma_phi(*k, GammaPhiSpec::smoothed_hinge(1e-2)?)?;
            return Ok((sm, true));
        }
    }
    Err(Error::NonSmooth(t.name()))
}

fn mix_seed(seed: u64, label: usize, restart: usize) -> u64 {
    seed.wrapping_mul(0x100000001b3)
        .wrapping_add((label as u64) << 32)
        .wrapping_add(restart as u64 + 1)
}

/// `C_p(ρ_y m) + w·Σ_j min(0, m_j)²`, or `None` where the risk cannot be
/// evaluated (overflow caps, non-finite intermediates).
fn penalized_value(
    t: &Template,
    p: &ProbVector,
    y: usize,
    m: &[f64],
    w: f64,
) -> Option<f64> {
    let risk = conditional_risk(t, p, &rho_apply(y, m)).ok()?;
    let pen: f64 = m.iter().map(|&mj| mj.min(0.0).powi(2)).sum();
    let f = risk + w * pen;
    f.is_finite().then_some(f)
}

fn penalized_grad(
    t: &Template,
    p: &ProbVector,
    y: usize,
    m: &[f64],
    w: f64,
) -> Option<Vec<f64>> {
    let rg = risk_grad(t, p, &rho_apply(y, m)).ok()?;
    let mut g = rho_transpose_apply(y, &rg);
    for (gj, &mj) in g.iter_mut().zip(m.iter()) {
        *gj += 2.0 * w * mj.min(0.0);
    }
    g.iter().all(|x| x.is_finite()).then_some(g)
}

/// Gradient descent with backtracking on the penalized objective,
/// continuing through the weight schedule with warm starts. Best-effort:
/// on any evaluation failure the current iterate is returned as-is — the
/// caller projects onto the feasible cone and re-evaluates, so a stalled
/// run degrades into a looser upper bound rather than an error.
fn minimize_penalized(
    t: &Template,
    p: &ProbVector,
    y: usize,
    m0: &[f64],
    weights: &[f64],
    max_steps: usize,
) -> Vec<f64> {
    let mut m = m0.to_vec();
    let mut step = 0.5_f64;
    for &w in weights {
        let mut f_cur = match penalized_value(t, p, y, &m, w) {
            Some(f) => f,
            None => return m,
        };
        for _ in 0..max_steps {
            let g = match penalized_grad(t, p, y, &m, w) {
                Some(g) => g,
                None => return m,
            };
            let gnorm = g.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            if gnorm <= 1e-9 * (1.0 + f_cur.abs()) {
                break;
            }
            let gg: f64 = g.iter().map(|x| x * x).sum();
            let mut accepted = false;
            let mut flat = false;
            for _ in 0..60 {
                let trial: Vec<f64> = m
                    .iter()
                    .zip(g.iter())
                    .map(|(mj, gj)| mj - step * gj)
                    .collect();
                match penalized_value(t, p, y, &trial, w) {
                    Some(ft) if ft <= f_cur - 1e-4 * step * gg => {
                        flat = f_cur - ft <= 1e-13 * (1.0 + ft.abs());
                        m = trial;
                        f_cur = ft;
                        step = (step * 1.25).min(16.0);
                        accepted = true;
                        break;
                    }
                    _ => {
                        step *= 0.5;
                        if step < 1e-18 {
                            break;
                        }
                    }
                }
            }
            if !accepted || flat {
                break;
            }
        }
    }
    m
}

/// Probes the strict-inequality side of calibration at one distribution.
///
/// The unconstrained infimum `C_p(link(p))` is compared against, for each
/// label `y*` outside `argmax(p)`, the minimum of `C_p` over margin points
/// whose reconstructed scores rank `y*` first. That region is exactly
/// `{ρ_{y*} m : m ⪰ 0}`, so the search runs in `m`-coordinates with a
/// quadratic penalty on negative entries, the weight escalating through
/// `cfg.weights` with warm starts, from `cfg.restarts` half-normal starting
/// points. The final iterate is projected onto `m ⪰ 0`, making every
/// reported constrained value a feasible upper bound.
///
/// Pass means `min_y* (constrained) − global > cfg.margin` — supporting
/// evidence for calibration, not a proof. A uniform `p` leaves no wrong
/// label and passes vacuously.
pub fn cc_inequality_probe(
    t: &Template,
    p: &ProbVector,
    cfg: &CcProbeConfig,
) -> Result<CalibrationReport> {
    Error::check_len(p.k(), t.arity())?;
    if p.min_entry() <= 0.0 {
        return Err(Error::InvalidProbability(
            "conditional-risk probe needs strictly positive class masses".into(),
        ));
    }
    let (work, smoothed_stand_in) = search_template(t)?;
    let k = work.arity();

    let z_star = link(&work, p, &SolverConfig::default())?;
    let global_inf = conditional_risk(&work, p, &z_star)?;
    let kkt = kkt_residual(&work, p, &z_star)?;

    let argmax = argmax_set(p.as_slice());
    let wrong: Vec<usize> = (1..=k).filter(|y| !argmax.contains(y)).collect();

    let base_note =
        "constrained values are feasible upper bounds; a positive gap is \
         evidence, not certification";
    let note = if smoothed_stand_in {
        format!(
            "pairwise hinge searched through its softplus smoothing \
             (temperature 1e-2); suggestive only — {base_note}"
        )
    } else {
        base_note.to_string()
    };

    if wrong.is_empty() {
        return Ok(CalibrationReport {
            template: t.name(),
            smoothed_stand_in,
            p: p.as_slice().to_vec(),
            argmax,
            global_inf,
            kkt_residual: kkt,
            inner_inf: None,
            gap: None,
            margin: cfg.margin,
            per_label: Vec::new(),
            vacuous: true,
            inconclusive: false,
            pass: true,
            note: format!(
                "every label attains the maximum of p; the wrong-argmax \
                 region is empty and the inequality holds vacuously — {note}"
            ),
        });
    }

    let mut per_label = Vec::with_capacity(wrong.len());
    let mut inner_inf = f64::INFINITY;
    let mut inconclusive = false;
    for &y_star in &wrong {
        let mut best: Option<f64> = None;
        let mut succeeded = 0;
        for r in 0..cfg.restarts {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, y_star, r));
            let m0: Vec<f64> = (0..k - 1)
                .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
                .collect();
            let m = minimize_penalized(
                &work,
                p,
                y_star,
                &m0,
                &cfg.weights,
                cfg.max_steps,
            );
            let m_plus: Vec<f64> = m.iter().map(|&x| x.max(0.0)).collect();
            let z_feas = rho_apply(y_star, &m_plus);
            if let Ok(val) = conditional_risk(&work, p, &z_feas) {
                if val.is_finite() {
                    best = Some(best.map_or(val, |b: f64| b.min(val)));
                    succeeded += 1;
                }
            }
        }
        if let Some(b) = best {
            if b < inner_inf {
                inner_inf = b;
            }
        } else {
            inconclusive = true;
        }
        per_label.push(LabelProbe {
            label: y_star,
            constrained_min: best,
            restarts_succeeded: succeeded,
        });
    }

    let (inner, gap) = if inconclusive {
        (None, None)
    } else {
        (Some(inner_inf), Some(inner_inf - global_inf))
    };
    let pass = !inconclusive && gap.map_or(false, |g| g > cfg.margin);

    Ok(CalibrationReport {
        template: t.name(),
        smoothed_stand_in,
        p: p.as_slice().to_vec(),
        argmax,
        global_inf,
        kkt_residual: kkt,
        inner_inf: inner,
        gap,
        margin: cfg.margin,
        per_label,
        vacuous: false,
        inconclusive,
        pass,
        note: if inconclusive {
            format!("constrained search failed on some label; inconclusive — {note}")
        } else {
            note
        },
    })
}

// ===================================================================
// tests
// ===================================================================
