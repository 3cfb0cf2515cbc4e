//! Result files: 17-significant-digit numbers, UTF-8 with LF line endings,
//! written atomically through a temporary file and a rename.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::ser::{Serialize, Serializer};
use serde_json::value::RawValue;

use super::EnsembleSummary;
use crate::lilstat::VEstimate;

/// `x` with 17 significant digits, or `None` when not finite.
pub fn format_f64(x: f64) -> Option<String> {
    x.is_finite().then(|| format!("{x:.16e}"))
}

/// CSV field: 17 significant digits, empty when missing or not finite.
pub fn csv_num(x: Option<f64>) -> String {
    x.and_then(format_f64).unwrap_or_default()
}

/// A JSON number printed with 17 significant digits (`null` if not finite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match format_f64(self.0) {
            Some(text) => RawValue::from_string(text).map_err(serde::ser::Error::custom)?.serialize(s),
            None => s.serialize_none(),
        }
    }
}

/// Optional number; `None` serialises as `null`.
pub fn num_opt(x: Option<f64>) -> Option<Num> {
    x.map(Num)
}

/// Writes `contents` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Serialises `value` as pretty JSON with a trailing newline.
pub fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory JSON serialisation cannot fail");
    s.push('\n');
    s
}

/// The `path_id,t,S,lil_stat,run_max,run_min` table of every checkpoint.
pub fn lil_curve_csv(summary: &EnsembleSummary) -> String {
    let mut out = String::from("path_id,t,S,lil_stat,run_max,run_min\n");
    for rec in &summary.records {
        for c in &rec.lil {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                rec.path_id,
                csv_num(Some(c.t)),
                csv_num(Some(c.s)),
                csv_num(c.stat),
                csv_num(c.run_max),
                csv_num(c.run_min)
            );
        }
    }
    out
}

#[derive(serde::Serialize)]
struct EstimateJson {
    method: &'static str,
    v2: Num,
    v: Num,
    stderr: Num,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_paths: Option<usize>,
}

/// JSON object `{method, v2, v, stderr, n_blocks|n_paths}`.
pub fn estimate_json(e: &VEstimate) -> serde_json::Value {
    use crate::lilstat::VMethod;
    let (n_blocks, n_paths) = match e.method {
        VMethod::BatchMeans => (Some(e.count), None),
        VMethod::Ensemble => (None, Some(e.count)),
        VMethod::ExactLinear => (None, None),
    };
    let j = EstimateJson {
        method: e.method.name(),
        v2: Num(e.v2),
        v: Num(e.v()),
        stderr: Num(e.stderr),
        n_blocks,
        n_paths,
    };
    // Round-trip through text keeps the 17-digit formatting inside a Value.
    serde_json::from_str(&serde_json::to_string(&j).expect("serialisable")).expect("valid JSON")
}

#[derive(serde::Serialize)]
struct FinalJson {
    path_id: u64,
    #[serde(rename = "S_T")]
    s_t: Num,
    #[serde(rename = "T")]
    t: Num,
    state: Vec<Num>,
    run_max: Option<Num>,
    run_min: Option<Num>,
}

#[derive(serde::Serialize)]
struct FailureJson<'a> {
    path_id: u64,
    step: u64,
    message: &'a str,
}

/// Summary document: fingerprint, counts, estimates, per-path finals and failures.
pub fn summary_json(summary: &EnsembleSummary, extra: Option<serde_json::Value>) -> serde_json::Value {
    let finals: Vec<FinalJson> = summary
        .records
        .iter()
        .map(|r| FinalJson {
            path_id: r.path_id,
            s_t: Num(r.final_s),
            t: Num(r.final_t),
            state: r.final_state.iter().copied().map(Num).collect(),
            run_max: num_opt(r.run_max),
            run_min: num_opt(r.run_min),
        })
        .collect();
    let failures: Vec<FailureJson> = summary
        .failures
        .iter()
        .map(|f| FailureJson { path_id: f.path_id, step: f.step, message: &f.message })
        .collect();
    let mut doc = serde_json::json!({
        "fingerprint": summary.fingerprint,
        "paths_ok": summary.records.len(),
        "paths_failed": summary.failures.len(),
        "estimates": summary.estimates.iter().map(estimate_json).collect::<Vec<_>>(),
        "finals": serde_json::to_value(&finals).expect("serialisable"),
        "failures": serde_json::to_value(&failures).expect("serialisable"),
    });
    if let (Some(serde_json::Value::Object(extra)), serde_json::Value::Object(map)) = (extra, &mut doc) {
        map.extend(extra);
    }
    doc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_f64(0.1).unwrap(), "1.0000000000000001e-1");
        assert_eq!(format_f64(1.0).unwrap(), "1.0000000000000000e0");
        assert_eq!(format_f64(f64::NAN), None);
        let back: f64 = format_f64(std::f64::consts::PI).unwrap().parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
        assert_eq!(serde_json::to_string(&Num(0.5)).unwrap(), "5.0000000000000000e-1");
        assert_eq!(serde_json::to_string(&Num(f64::INFINITY)).unwrap(), "null");
        assert_eq!(csv_num(None), "");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one\n").unwrap();
        write_atomic(&p, b"two\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two\n");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
