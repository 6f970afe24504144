//! Trace CSV and run summary JSON.
//!
//! CSV: a header line with the columns of [`CSV_COLUMNS`], then one line per
//! trace record, `\n`-terminated, no quoting. Numbers use Rust's shortest
//! round-trip formatting (`inf`, `-inf`, `NaN` for non-finite values);
//! `region` and `d_hat` are empty when no depth was estimated.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use wave_plate_core::dynamics::TraceRecord;
use wave_plate_core::potentialwell::DepthCertificate;

pub const CSV_COLUMNS: [&str; 11] = [
    "t",
    "E",
    "J",
    "calE",
    "source_work",
    "identity_residual",
    "calE_drift",
    "norm_V",
    "nehari",
    "region",
    "d_hat",
];

pub const SCHEMA_ID: &str = "wave-plate/summary/v1";

pub fn write_trace_csv(records: &[TraceRecord], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in records {
        let e = &r.energy;
        let (region, d_hat) = match &r.well {
            Some(w) => (w.region.as_str().to_string(), w.d_hat.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.t,
            e.e,
            e.j,
            e.cal_e,
            e.source_work,
            e.identity_residual,
            e.cal_e_drift,
            r.norm_v,
            r.nehari,
            region,
            d_hat
        )?;
    }
    Ok(())
}

pub fn trace_csv_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Passed,
    Failed,
    /// Reported but not judged (e.g. well invariance from outside `W1`).
    Exploratory,
}

/// One enabled analysis. `margin` is positive when the check holds with room
/// to spare (tolerance minus measured value, or bound minus observed value).
#[derive(Clone, Debug, Serialize)]
pub struct AnalysisResult {
    pub status: Status,
    pub margin: f64,
    pub details: serde_json::Value,
}

impl AnalysisResult {
    pub fn judged(passed: bool, margin: f64, details: impl Serialize) -> Self {
        Self {
            status: if passed { Status::Passed } else { Status::Failed },
            margin,
            details: serde_json::to_value(details).expect("serializable details"),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct WorstResiduals {
    pub identity_residual: f64,
    #[serde(rename = "calE_drift")]
    pub cal_e_drift: f64,
    pub scheme_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WellSummary {
    /// `null` encodes `+∞` (no Nehari crossing found, e.g. `h ≡ 0`).
    pub d_hat: f64,
    pub lambda_star: Option<f64>,
    pub budget_exhausted: bool,
    pub evaluations: usize,
    pub certificate: Option<DepthCertificate>,
    pub initial_region: Option<String>,
    /// `θ d̂/(θ-2)` when the source has an AR exponent.
    pub energy_bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowUp {
    pub t: f64,
    pub energy: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub schema: &'static str,
    pub command: String,
    pub seed: u64,
    pub geometry: serde_json::Value,
    pub source: serde_json::Value,
    pub scheme: Option<String>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub exit_code: i32,
    pub analyses: BTreeMap<String, AnalysisResult>,
    pub worst_residuals: Option<WorstResiduals>,
    pub well: Option<WellSummary>,
    pub blow_up: Option<BlowUp>,
    pub error: Option<String>,
    pub steps: usize,
    pub nonlinear_iterations: usize,
    pub wall_clock_seconds: f64,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable summary");
        s.push('\n');
        s
    }
}
