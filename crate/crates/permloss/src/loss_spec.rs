//! JSON descriptions of losses, the small schema the command-line tool
//! reads:
//!
//! ```json
//! {"kind": "cross_entropy", "k": 3}
//! {"kind": "gamma_phi", "k": 4, "params": {"pair": "smoothed_hinge", "temperature": 1e-2}}
//! {"kind": "fenchel_young", "k": 3, "params": {"negentropy": "sq_shannon", "mu": 0.5}}
//! {"kind": "sum", "k": 3, "params": {"parts": [...], "weights": [0.5, 0.5]}}
//! ```
//!
//! `params` is omitted for the kinds that need none. A `sum` combines
//! its parts with positive weights (default `1`), all at the same class
//! count.

use crate::fenchel_young::{FySpec, FyTemplate, Negentropy};
use crate::template::{GammaPhiSpec, Template};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::Path;

/// One parsed loss description. `params` stays schemaless JSON so each
/// kind can pull out exactly the fields it understands and complain
/// about the rest by name.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
}

impl LossSpec {
    pub fn from_json(text: &str) -> Result<LossSpec> {
        let spec: LossSpec = serde_json::from_str(text)
            .map_err(|e| Error::InvalidLossSpec(format!("malformed JSON: {e}")))?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<LossSpec> {
        let text = fs::read_to_string(path.as_ref())?;
        LossSpec::from_json(&text)
    }

    /// Builds the described template.
    pub fn to_template(&self) -> Result<Template> {
        template_from_spec(self)
    }
}

fn param_str<'a>(params: &'a Value, field: &str, kind: &str) -> Result<&'a str> {
    params
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| {
            Error::InvalidLossSpec(format!(
                "kind '{kind}' needs a string field params.{field}"
            ))
        })
}

fn param_f64(params: &Value, field: &str) -> Option<f64> {
    params.get(field).and_then(Value::as_f64)
}

fn gamma_phi_template(k: usize, params: &Value) -> Result<Template> {
    let pair = param_str(params, "pair", "gamma_phi")?;
    let spec = match pair {
        "cross_entropy" => GammaPhiSpec::cross_entropy_pair(),
        "exponential" => GammaPhiSpec::exponential(),
        "hinge" => GammaPhiSpec::ww_hinge(),
        "smoothed_hinge" => {
            let tau = param_f64(params, "temperature").unwrap_or(1e-2);
            GammaPhiSpec::smoothed_hinge(tau)?
        }
        other => {
            return Err(Error::InvalidLossSpec(format!(
                "unknown gamma_phi pair '{other}' (expected cross_entropy, \
                 exponential, hinge, or smoothed_hinge)"
            )))
        }
    };
    Template::gamma_phi(k, spec)
}

fn fenchel_young_template(k: usize, params: &Value) -> Result<Template> {
    let name = param_str(params, "negentropy", "fenchel_young")?;
    let negentropy = match name {
        "shannon" => Negentropy::shannon(k)?,
        "sq_shannon" => Negentropy::squared_shannon(k)?,
        other => {
            return Err(Error::InvalidLossSpec(format!(
                "unknown negentropy '{other}' (expected shannon or sq_shannon)"
            )))
        }
    };
    let mu = param_f64(params, "mu").unwrap_or(0.0);
    Ok(FyTemplate::new(FySpec::new(negentropy, mu)?).into_template())
}

fn sum_template(k: usize, params: &Value) -> Result<Template> {
    let parts = params
        .get("parts")
        .and_then(Value::as_array)
        .ok_or_else(|| {
            Error::InvalidLossSpec("kind 'sum' needs an array field params.parts".into())
        })?;
    if parts.is_empty() {
        return Err(Error::InvalidLossSpec("sum needs at least one part".into()));
    }
    let weights: Vec<f64> = match params.get("weights") {
        None => vec![1.0; parts.len()],
        Some(v) => v
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| {
                Error::InvalidLossSpec("params.weights must be an array of numbers".into())
            })?,
    };
    if weights.len() != parts.len() {
        return Err(Error::InvalidLossSpec(format!(
            "sum has {} parts but {} weights",
            parts.len(),
            weights.len()
        )));
    }

    let mut acc: Option<Template> = None;
    for (part, &w) in parts.iter().zip(weights.iter()) {
        let part_spec: LossSpec = serde_json::from_value(part.clone())
            .map_err(|e| Error::InvalidLossSpec(format!("malformed sum part: {e}")))?;
        if part_spec.k != k {
            return Err(Error::InvalidLossSpec(format!(
                "sum part '{}' has k = {} but the sum declares k = {}",
                part_spec.kind, part_spec.k, k
            )));
        }
        let mut t = template_from_spec(&part_spec)?;
        if w != 1.0 {
            t = t.scale(w)?;
        }
        acc = Some(match acc {
            None => t,
            Some(prev) => prev.add(t)?,
        });
    }
    Ok(acc.expect("at least one part"))
}

/// Template construction from a parsed description.
pub fn template_from_spec(spec: &LossSpec) -> Result<Template> {
    let empty = Value::Object(Default::default());
    let params = spec.params.as_ref().unwrap_or(&empty);
    match spec.kind.as_str() {
        "cross_entropy" => Template::cross_entropy(spec.k),
        "exponential" => Template::exponential(spec.k),
        "ww_hinge" => Template::ww_hinge(spec.k),
        "crammer_singer" => Template::crammer_singer(spec.k),
        "gamma_phi" => gamma_phi_template(spec.k, params),
        "fenchel_young" => fenchel_young_template(spec.k, params),
        "sum" => sum_template(spec.k, params),
        other => Err(Error::InvalidLossSpec(format!(
            "unknown kind '{other}' (expected cross_entropy, exponential, \
             ww_hinge, crammer_singer, gamma_phi, fenchel_young, or sum)"
        ))),
    }
}

pub fn template_from_json(text: &str) -> Result<Template> {
    LossSpec::from_json(text)?.to_template()
}

pub fn template_from_file(path: impl AsRef<Path>) -> Result<Template> {
    LossSpec::from_file(path)?.to_template()
}

// ===================================================================
// tests
// ===================================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_kinds_build_the_expected_templates() {
        let t = template_from_json(r#"{"kind": "cross_entropy", "k": 3}"#).unwrap();
        assert_eq!(t.arity(), 3);
        assert!(t.name().contains("cross_entropy"), "name: {}", t.name());

        let t = template_from_json(r#"{"kind": "exponential", "k": 4}"#).unwrap();
        assert_eq!(t.arity(), 4);
        assert!(t.is_smooth());

        let t = template_from_json(r#"{"kind": "ww_hinge", "k": 3}"#).unwrap();
        assert!(!t.is_smooth(), "the pairwise hinge is not smooth");

        let t = template_from_json(r#"{"kind": "crammer_singer", "k": 5}"#).unwrap();
        assert_eq!(t.arity(), 5);
    }

    #[test]
    fn gamma_phi_pairs_round_trip_through_json() {
        let t = template_from_json(
            r#"{"kind": "gamma_phi", "k": 3, "params": {"pair": "cross_entropy"}}"#,
        )
        .unwrap();
        // Same function as the closed-form template, different code path.
        let ce = Template::cross_entropy(3).unwrap();
        let z = [0.3, -1.2];
        assert!(
            (t.eval(&z).unwrap() - ce.eval(&z).unwrap()).abs() <= 1e-12,
            "pair form should match the closed form"
        );

        let t = template_from_json(
            r#"{"kind": "gamma_phi", "k": 3,
                "params": {"pair": "smoothed_hinge", "temperature": 0.01}}"#,
        )
        .unwrap();
        assert!(t.is_smooth());
        assert!(t.name().contains("smoothed_hinge"), "name: {}", t.name());
    }

    #[test]
    fn fenchel_young_specs_build_and_default_mu_to_zero() {
        let t = template_from_json(
            r#"{"kind": "fenchel_young", "k": 3, "params": {"negentropy": "shannon"}}"#,
        )
        .unwrap();
        let ce = Template::cross_entropy(3).unwrap();
        let z = [0.5, -0.7];
        assert!(
            (t.eval(&z).unwrap() - ce.eval(&z).unwrap()).abs() <= 1e-9,
            "Shannon at mu = 0 is the cross-entropy template"
        );

        let t = template_from_json(
            r#"{"kind": "fenchel_young", "k": 3,
                "params": {"negentropy": "sq_shannon", "mu": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(t.arity(), 3);
        assert!(t.eval(&[0.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn sum_combines_parts_with_weights() {
        let text = r#"{
            "kind": "sum", "k": 3,
            "params": {
                "parts": [
                    {"kind": "cross_entropy", "k": 3},
                    {"kind": "exponential", "k": 3}
                ],
                "weights": [0.5, 0.5]
            }
        }"#;
        let t = template_from_json(text).unwrap();
        let ce = Template::cross_entropy(3).unwrap();
        let ex = Template::exponential(3).unwrap();
        let z = [0.4, -0.9];
        let expected = 0.5 * ce.eval(&z).unwrap() + 0.5 * ex.eval(&z).unwrap();
        assert!(
            (t.eval(&z).unwrap() - expected).abs() <= 1e-12,
            "weighted sum should evaluate part by part"
        );
    }

    #[test]
    fn sum_rejects_mismatched_arity_and_weight_counts() {
        let bad_k = r#"{
            "kind": "sum", "k": 3,
            "params": {"parts": [{"kind": "cross_entropy", "k": 4}]}
        }"#;
        assert!(matches!(
            template_from_json(bad_k),
            Err(Error::InvalidLossSpec(_))
        ));

        let bad_w = r#"{
            "kind": "sum", "k": 3,
            "params": {
                "parts": [{"kind": "cross_entropy", "k": 3}],
                "weights": [0.5, 0.5]
            }
        }"#;
        assert!(matches!(
            template_from_json(bad_w),
            Err(Error::InvalidLossSpec(_))
        ));
    }

    #[test]
    fn unknown_kinds_and_missing_fields_are_named_in_errors() {
        let err = template_from_json(r#"{"kind": "logish", "k": 3}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("logish"), "error should name the bad kind: {msg}");

        let err =
            template_from_json(r#"{"kind": "gamma_phi", "k": 3}"#).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("pair"),
            "error should name the missing field: {msg}"
        );

        assert!(template_from_json("not json at all").is_err());
    }

    #[test]
    fn specs_survive_a_serialize_parse_round_trip() {
        let spec = LossSpec {
            kind: "fenchel_young".into(),
            k: 4,
            params: Some(serde_json::json!({"negentropy": "shannon", "mu": 1.0})),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back = LossSpec::from_json(&text).unwrap();
        assert_eq!(back.kind, spec.kind);
        assert_eq!(back.k, spec.k);
        assert_eq!(back.params, spec.params);
        assert!(back.to_template().is_ok());
    }
}
