//! JSON report serialization with reproducible full-precision floats.
//!
//! Every CLI subcommand and probe emits JSON through [`to_json_string`],
//! which formats all `f64` values with 17 significant digits so a report is
//! byte-for-byte reproducible and round-trips through any conforming JSON
//! parser without losing bits.

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};
use std::io;

/// Version stamp embedded in every emitted report.
pub const SCHEMA_VERSION: u32 = 1;

/// Compact JSON formatter printing floats as `d.dddddddddddddddde±e`
/// (17 significant digits, always scientific notation — still a valid JSON
/// number and exact for every finite `f64`). All the structural hooks keep
/// the `Formatter` defaults, i.e. compact output.
struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        // Promote; f32 is not used in reports but keep the trait coherent.
        write!(writer, "{:.16e}", f64::from(value))
    }
}

/// Serialize `value` as compact JSON with full-precision floats.
pub fn to_json_string<T: Serialize>(value: &T) -> crate::Result<String> {
    let mut out = Vec::with_capacity(256);
    let mut ser = Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    // FullPrecision only ever writes ASCII.
    Ok(String::from_utf8(out).expect("JSON output is ASCII"))
}

/// Wrap a report body with the schema version and command name, then
/// serialize. This is the envelope every CLI subcommand prints.
pub fn envelope<T: Serialize>(command: &str, body: &T) -> crate::Result<String> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        schema_version: u32,
        command: &'a str,
        report: &'a T,
    }
    to_json_string(&Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        report: body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let xs = [
            0.1,
            1.0 / 3.0,
            std::f64::consts::LN_2,
            1.2069489608125821,
            -4.9e-324, // smallest subnormal
            1.7976931348623157e308,
        ];
        for &x in &xs {
            let s = to_json_string(&x).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} reprinted as {s}");
        }
    }

    #[test]
    fn envelope_contains_version_and_command() {
        let s = envelope("eval", &serde_json::json!({"value": 1.5})).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["command"], "eval");
        assert_eq!(v["report"]["value"], 1.5);
    }

    #[test]
    fn output_is_deterministic() {
        let body = serde_json::json!({"a": [1.0_f64/3.0, 2.0_f64.sqrt()], "b": "x"});
        assert_eq!(
            to_json_string(&body).unwrap(),
            to_json_string(&body).unwrap()
        );
    }
}
