//! Bit-exact persistence: raw float arrays (`.rawf`) and canonical JSON
//! reports (`.report.json`).
//!
//! A `.rawf` file is a single JSON header line followed by the raw
//! little-endian f32 payload in row-major order:
//!
//! ```text
//! {"byte_order":"little-endian","dtype":"f32","order":"row-major","shape":[64,64]}
//! <4 * product(shape) payload bytes>
//! ```
//!
//! Reports are canonical JSON (sorted keys, UTF-8, ryu float formatting, one
//! trailing newline) so identical content always produces identical bytes.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    byte_order: String,
    dtype: String,
    order: String,
    shape: Vec<usize>,
}

/// Write a float array. Refuses NaN/Inf.
pub fn write_array(path: impl AsRef<Path>, array: &ArrayD<f32>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = array.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} in array destined for {}",
            bad,
            path.display()
        )));
    }
    let header = serde_json::json!({
        "byte_order": "little-endian",
        "dtype": "f32",
        "order": "row-major",
        "shape": array.shape(),
    });
    let mut out = Vec::with_capacity(array.len() * 4 + 96);
    out.extend_from_slice(canonical_json(&header).as_bytes());
    out.push(b'\n');
    let std_layout = array.as_standard_layout();
    for v in std_layout.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a float array written by [`write_array`].
pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: no header line", path.display())))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("{}: malformed header: {e}", path.display())))?;
    if header.dtype != "f32" || header.order != "row-major" || header.byte_order != "little-endian"
    {
        return Err(Error::Format(format!(
            "{}: unsupported header {:?}/{:?}/{:?}",
            path.display(),
            header.dtype,
            header.order,
            header.byte_order
        )));
    }
    let expected: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: payload holds {} floats but shape {:?} needs {}",
            path.display(),
            payload.len() / 4,
            header.shape,
            expected
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(header.shape, data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Analysis report kinds with fixed body schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Selectivity,
    Ood,
    Perturb,
    Attribution,
    Dlt,
    Metrics,
}

impl ReportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportKind::Selectivity => "selectivity",
            ReportKind::Ood => "ood",
            ReportKind::Perturb => "perturb",
            ReportKind::Attribution => "attribution",
            ReportKind::Dlt => "dlt",
            ReportKind::Metrics => "metrics",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub kind: ReportKind,
    pub created_at: String,
    pub config_digest: String,
    pub body: Value,
}

impl Report {
    pub fn new(kind: ReportKind, config_digest: impl Into<String>, body: Value) -> Report {
        Report {
            kind,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config_digest: config_digest.into(),
            body,
        }
    }
}

fn require<'a>(body: &'a Value, kind: ReportKind, field: &str) -> Result<&'a Value> {
    body.get(field).ok_or_else(|| Error::Schema {
        path: format!("body.{field}"),
        message: format!(
            "missing required field for kind '{}' (required: {})",
            kind.as_str(),
            required_fields(kind).join(", ")
        ),
    })
}

fn required_fields(kind: ReportKind) -> &'static [&'static str] {
    match kind {
        ReportKind::Selectivity => &["classes", "cr", "cs", "hr", "hs"],
        ReportKind::Ood => &["items"],
        ReportKind::Perturb => &["experiment", "per_case"],
        ReportKind::Attribution => &["target", "steps", "completeness_gap"],
        ReportKind::Dlt => &["k", "group_sizes"],
        ReportKind::Metrics => &["task"],
    }
}

/// Check a report body against its kind's schema.
pub fn validate_report(report: &Report) -> Result<()> {
    if !report.body.is_object() {
        return Err(Error::Schema {
            path: "body".to_string(),
            message: "body must be a JSON object".to_string(),
        });
    }
    for field in required_fields(report.kind) {
        require(&report.body, report.kind, field)?;
    }
    if report.kind == ReportKind::Metrics {
        let task = require(&report.body, report.kind, "task")?;
        match task.as_str() {
            Some("evaluation") => {
                for field in ["mae", "rmse", "si_rmse", "msge"] {
                    if report.body.get(field).is_none() {
                        return Err(Error::Schema {
                            path: format!("body.{field}"),
                            message: "evaluation metrics require mae, rmse, si_rmse, msge"
                                .to_string(),
                        });
                    }
                }
            }
            Some("training") => {
                let epochs = report.body.get("epochs").ok_or_else(|| Error::Schema {
                    path: "body.epochs".to_string(),
                    message: "training metrics require an epochs array".to_string(),
                })?;
                if !epochs.is_array() {
                    return Err(Error::Schema {
                        path: "body.epochs".to_string(),
                        message: "epochs must be an array".to_string(),
                    });
                }
            }
            _ => {
                return Err(Error::Schema {
                    path: "body.task".to_string(),
                    message: "task must be 'evaluation' or 'training'".to_string(),
                })
            }
        }
    }
    Ok(())
}

/// Write a report as canonical JSON. Validates first.
pub fn write_report(path: impl AsRef<Path>, report: &Report) -> Result<()> {
    validate_report(report)?;
    let value = serde_json::to_value(report)?;
    let mut text = canonical_json(&value);
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    let text = fs::read_to_string(path.as_ref())?;
    let report: Report = serde_json::from_str(&text)?;
    validate_report(&report)?;
    Ok(report)
}

/// Serialize with recursively sorted object keys. Numbers keep serde_json's
/// shortest round-trip formatting.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string key"));
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).expect("scalar")),
    }
}

/// SHA-256 of the canonical JSON encoding, hex-encoded.
pub fn config_digest(config: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(config).as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn rawf_roundtrip_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.rawf");
        let a = ArrayD::<f32>::zeros(IxDyn(&[2, 2]));
        write_array(&p, &a).unwrap();
        let bytes = fs::read(&p).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 16);
        assert!(bytes[nl + 1..].iter().all(|&b| b == 0));
        assert_eq!(read_array(&p).unwrap(), a);
    }

    #[test]
    fn rawf_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rawf");
        let a = ArrayD::from_elem(IxDyn(&[2]), f32::NAN);
        assert!(matches!(write_array(&p, &a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rawf_detects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rawf");
        // header says 3*4*5=60 floats but payload holds 59
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            br#"{"byte_order":"little-endian","dtype":"f32","order":"row-major","shape":[3,4,5]}"#,
        );
        bytes.push(b'\n');
        bytes.extend_from_slice(&vec![0u8; 59 * 4]);
        fs::write(&p, bytes).unwrap();
        match read_array(&p) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("59"), "{msg}");
                assert!(msg.contains("60"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_metrics_body_names_required_fields() {
        let r = Report {
            kind: ReportKind::Metrics,
            created_at: "2026-01-01T00:00:00Z".into(),
            config_digest: "0".repeat(64),
            body: serde_json::json!({}),
        };
        match validate_report(&r) {
            Err(Error::Schema { path, message }) => {
                assert_eq!(path, "body.task");
                assert!(message.contains("task"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn report_writes_are_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let r = Report {
            kind: ReportKind::Metrics,
            created_at: "2026-01-01T00:00:00Z".into(),
            config_digest: "a".repeat(64),
            body: serde_json::json!({
                "task": "evaluation",
                "mae": 0.123456789012345678,
                "rmse": 1.0,
                "si_rmse": 2.5e-7,
                "msge": 3.0,
            }),
        };
        let p1 = dir.path().join("a.report.json");
        let p2 = dir.path().join("b.report.json");
        write_report(&p1, &r).unwrap();
        write_report(&p2, &r).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_report(&p1).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v = serde_json::json!({"zeta": 1, "alpha": {"c": 2, "b": [1, 2]}});
        assert_eq!(canonical_json(&v), r#"{"alpha":{"b":[1,2],"c":2},"zeta":1}"#);
    }

    #[test]
    fn digest_is_stable() {
        let v = serde_json::json!({"seed": 7, "size": 128});
        let d1 = config_digest(&v);
        let d2 = config_digest(&serde_json::json!({"size": 128, "seed": 7}));
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 64);
    }
}
