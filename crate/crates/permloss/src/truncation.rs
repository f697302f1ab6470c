//! Class removal by truncation: the `(k−1)`-ary template
//! `w ↦ lim_{λ→∞} ψ(λ, w)` and its iterates.
//!
//! For templates with entrywise-negative gradients the map `λ ↦ ψ(λ, w)`
//! is decreasing and bounded below, so the limit exists and is approached
//! from above. Cross-entropy and composite `γ/φ` templates have closed
//! forms (drop to arity `k−1`; for `γ/φ`, fold `lim_{t→∞} φ(t)` into the
//! offset), and the max-hinge loses one coordinate exactly; everything
//! else — notably Fenchel-Young templates — goes through the numeric
//! λ-schedule so the two paths can cross-validate each other.

use crate::template::Template;
use crate::{Error, Result};
use serde::Serialize;

/// Doubling schedule `λ = 2^0, 2^1, …, 2^max` with a two-part stop rule:
/// successive values must agree within `tol` *and* `λ` must have reached
/// `2^min` (prevents premature stops on slowly decaying templates).
#[derive(Clone, Debug, Serialize)]
pub struct TruncationSchedule {
    pub tol: f64,
    pub min_exponent: u32,
    pub max_exponent: u32,
}

impl Default for TruncationSchedule {
    fn default() -> Self {
        TruncationSchedule {
            tol: 1e-10,
            min_exponent: 20,
            max_exponent: 40,
        }
    }
}

impl TruncationSchedule {
    /// Loosened tolerance for solver-backed templates, whose evaluations
    /// carry iterative noise near the duality-gap tolerance.
    pub fn loose() -> Self {
        TruncationSchedule {
            tol: 1e-7,
            ..Self::default()
        }
    }

    /// Pick the schedule appropriate to how `t` is evaluated.
    pub fn for_template(t: &Template) -> Self {
        if t.eval_is_exact() {
            Self::default()
        } else {
            Self::loose()
        }
    }

    /// Run `f` along the schedule until it stabilizes.
    pub fn limit<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        let mut prev: Option<f64> = None;
        for e in 0..=self.max_exponent {
            let lambda = (2.0_f64).powi(e as i32);
            let value = f(lambda)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "limit iterate at lambda=2^{e} is {value}"
                )));
            }
            if let Some(pv) = prev {
                if (value - pv).abs() <= self.tol && e >= self.min_exponent {
                    return Ok(value);
                }
            }
            prev = Some(value);
        }
        Err(Error::LimitDiverged(format!(
            "value still moving by more than {:.1e} at lambda=2^{}",
            self.tol, self.max_exponent
        )))
    }
}

/// The `(k−1)`-ary template `trunc[ψ](w) = lim_{λ→∞} ψ(λ, w)`.
///
/// Closed forms where the template kind admits one, numeric limit
/// otherwise. Requires `k ≥ 3` (removing a class from a binary loss
/// leaves nothing to discriminate).
pub fn truncate(t: &Template) -> Result<Template> {
    let k = t.arity();
    if k < 3 {
        return Err(Error::InvalidArity { min: 3, got: k });
    }
    Ok(match t {
        Template::CrossEntropy { .. } => Template::CrossEntropy { k: k - 1 },
        Template::GammaPhi { spec, offset, .. } => Template::GammaPhi {
            k: k - 1,
            spec: spec.clone(),
            offset: offset + spec.phi_limit(),
        },
        // max_j max(0, 1 − z_j) loses the λ coordinate exactly once
        // λ > 1, so the limit is the same form one arity down.
        Template::CrammerSinger { .. } => Template::CrammerSinger { k: k - 1 },
        Template::Scaled { factor, inner } => Template::Scaled {
            factor: *factor,
            inner: Box::new(truncate(inner)?),
        },
        Template::Sum { left, right } => Template::Sum {
            left: Box::new(truncate(left)?),
            right: Box::new(truncate(right)?),
        },
        other => Template::NumericTruncation {
            inner: Box::new(other.clone()),
            schedule: TruncationSchedule::for_template(other),
        },
    })
}

/// Apply [`truncate`] `m` times: the arity-`(k−m)` iterate `ψ^(n)`.
/// `m = 0` returns a clone of the input.
pub fn iterated_truncate(t: &Template, m: usize) -> Result<Template> {
    let k = t.arity();
    if m > k - 2 {
        return Err(Error::InvalidArity {
            min: 2,
            got: k.saturating_sub(m),
        });
    }
    let mut cur = t.clone();
    for _ in 0..m {
        cur = truncate(&cur)?;
    }
    Ok(cur)
}

/// Report from [`shifted_limit_check`].
#[derive(Clone, Debug, Serialize)]
pub struct ShiftedLimitReport {
    pub limit: f64,
    pub truncated_value: f64,
    pub deviation: f64,
    pub pass: bool,
}

/// Verify that sending the *first* margin coordinate to `+∞` inside the
/// full template reproduces the truncated template on the remaining
/// coordinates: `lim_{λ→∞} ψ(z + λ e_1) = trunc[ψ](z_2, …, z_{k−1})`
/// within `1e−5`.
pub fn shifted_limit_check(t: &Template, z: &[f64]) -> Result<ShiftedLimitReport> {
    Error::check_len(z.len(), t.dim())?;
    if t.arity() < 3 {
        return Err(Error::InvalidArity {
            min: 3,
            got: t.arity(),
        });
    }
    let schedule = TruncationSchedule::for_template(t);
    let mut shifted = z.to_vec();
    let limit = schedule.limit(|lambda| {
        shifted[0] = z[0] + lambda;
        t.eval(&shifted)
    })?;
    let truncated_value = truncate(t)?.eval(&z[1..])?;
    let deviation = (limit - truncated_value).abs();
    Ok(ShiftedLimitReport {
        limit,
        truncated_value,
        deviation,
        pass: deviation <= 1e-5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::symmetry_gap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn cross_entropy_drops_an_arity() {
        let t = truncate(&Template::cross_entropy(3).unwrap()).unwrap();
        assert_eq!(t.arity(), 2);
        // Binary cross-entropy: log(1 + e^(−w)).
        assert!(close(t.eval(&[1.0]).unwrap(), 0.31326168751822286, 1e-14));
    }

    #[test]
    fn numeric_limit_agrees_with_closed_form() {
        let ce3 = Template::cross_entropy(3).unwrap();
        let numeric = Template::NumericTruncation {
            inner: Box::new(ce3),
            schedule: TruncationSchedule::default(),
        };
        for w in [-3.0, 0.0, 3.0] {
            // log(1 + e^{−w}) written stably, independent of the crate's
            // own cross-entropy code path.
            let exact =
                0.0_f64.max(-w) + ((w.min(0.0)).exp() + (-w.max(0.0)).exp()).ln();
            let got = numeric.eval(&[w]).unwrap();
            assert!(
                (got - exact).abs() <= 1e-6,
                "w={w}: numeric {got} vs direct {exact}"
            );
        }
    }

    #[test]
    fn gamma_phi_truncates_with_preserved_pieces() {
        let t = truncate(&Template::exponential(4).unwrap()).unwrap();
        assert_eq!(t.arity(), 3);
        assert!(close(
            t.eval(&[1.0, -1.0]).unwrap(),
            3.0861612696304874,
            1e-14
        ));
        // The hinge's φ hits its limit exactly, so the plateau truncates
        // with no offset either.
        let h = truncate(&Template::ww_hinge(3).unwrap()).unwrap();
        assert_eq!(h.eval(&[0.25]).unwrap(), 0.75);
    }

    #[test]
    fn iterated_truncation_to_binary() {
        let t = iterated_truncate(&Template::cross_entropy(5).unwrap(), 3).unwrap();
        assert_eq!(t.arity(), 2);
        for w in [-3.0_f64, 0.0, 3.0] {
            let want = (-w).exp().ln_1p();
            assert!(
                (t.eval(&[w]).unwrap() - want).abs() <= 1e-6,
                "binary reduction at {w}"
            );
        }
        let e = iterated_truncate(&Template::exponential(4).unwrap(), 2).unwrap();
        assert!(close(e.eval(&[2.0]).unwrap(), 0.1353352832366127, 1e-14));
        // m = 0 is the identity.
        let same = iterated_truncate(&Template::cross_entropy(4).unwrap(), 0).unwrap();
        assert_eq!(same.arity(), 4);
    }

    #[test]
    fn arity_guards() {
        assert!(truncate(&Template::cross_entropy(2).unwrap()).is_err());
        assert!(iterated_truncate(&Template::cross_entropy(4).unwrap(), 3).is_err());
    }

    #[test]
    fn shifted_limit_matches_truncation() {
        let ce = Template::cross_entropy(3).unwrap();
        let rep = shifted_limit_check(&ce, &[5.0, 1.0]).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(close(rep.limit, 0.31326168751822286, 1e-6));
        // Shift-invariance in the first coordinate (absorbed into λ).
        let rep2 = shifted_limit_check(&ce, &[-7.0, 1.0]).unwrap();
        assert!((rep.limit - rep2.limit).abs() <= 1e-9);

        let ex = Template::exponential(3).unwrap();
        let rep3 = shifted_limit_check(&ex, &[0.0, 2.0]).unwrap();
        assert!(rep3.pass);
        assert!(close(rep3.limit, (-2.0_f64).exp(), 1e-6));
    }

    #[test]
    fn monotone_from_above_along_schedule() {
        // ψ(λ, w) must be non-increasing in λ and ≥ the limit.
        let ce = Template::cross_entropy(3).unwrap();
        let w = [0.4];
        let lim = truncate(&ce).unwrap().eval(&w).unwrap();
        let mut prev = f64::INFINITY;
        for e in 0..=20 {
            let lambda = (2.0_f64).powi(e);
            let v = ce.eval(&[lambda, w[0]]).unwrap();
            assert!(v <= prev + 1e-15, "not monotone at 2^{e}");
            assert!(v >= lim - 1e-15, "crossed below the limit at 2^{e}");
            prev = v;
        }
    }

    #[test]
    fn truncated_templates_stay_symmetric() {
        let t = truncate(&Template::cross_entropy(4).unwrap()).unwrap();
        assert!(symmetry_gap(&t, 1000, 10.0, 5).unwrap() <= 1e-10);
    }

    #[test]
    fn divergent_limit_is_reported() {
        let schedule = TruncationSchedule::default();
        let err = schedule.limit(|lambda| Ok(lambda.sqrt())).unwrap_err();
        assert!(matches!(err, Error::LimitDiverged(_)), "{err}");
    }
}
