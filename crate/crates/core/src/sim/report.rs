//! CSV schema shared by the simulator, the live client and the comparison
//! report.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimScenario;
use crate::transport::Policy;

pub const CSV_HEADER: [&str; 11] = [
    "run_id",
    "policy",
    "load_rows",
    "n_providers",
    "n_h",
    "t_standalone_s",
    "t_total_s",
    "t_compute_max_s",
    "t_overhead_s",
    "speedup_measured",
    "speedup_formula",
];

/// One row of the sweep schema, from a simulated or a live run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeasurement {
    pub run_id: u64,
    pub policy: String,
    pub load_rows: u64,
    pub n_providers: usize,
    pub n_h: f64,
    pub t_standalone_s: f64,
    pub t_total_s: f64,
    pub t_compute_max_s: f64,
    pub t_overhead_s: f64,
    pub speedup_measured: f64,
    pub speedup_formula: f64,
}

impl RunMeasurement {
    fn fields(&self) -> [String; 11] {
        [
            self.run_id.to_string(),
            self.policy.clone(),
            self.load_rows.to_string(),
            self.n_providers.to_string(),
            fmt_g9(self.n_h),
            fmt_g9(self.t_standalone_s),
            fmt_g9(self.t_total_s),
            fmt_g9(self.t_compute_max_s),
            fmt_g9(self.t_overhead_s),
            fmt_g9(self.speedup_measured),
            fmt_g9(self.speedup_formula),
        ]
    }
}

/// Measured speedup next to the prediction for the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub measurement: RunMeasurement,
    pub speedup_formula: f64,
    pub deviation_abs: f64,
    pub deviation_rel: f64,
}

/// Formats like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (PRECISION - 1 - exp) as usize, x)).to_owned()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub(crate) fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::io("flushing csv", e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_measurements(rows: &[RunMeasurement], header: bool) -> Result<String> {
    let mut w = csv_writer();
    if header {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    finish(w)
}

/// Reads sweep-schema rows. Header lines are skipped wherever they appear,
/// so concatenated outputs of several runs are accepted.
pub fn read_measurements(reader: impl Read) -> Result<Vec<RunMeasurement>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.get(0) == Some(CSV_HEADER[0]) {
            continue;
        }
        let m: RunMeasurement = record.deserialize(None)?;
        m.policy.parse::<Policy>()?;
        out.push(m);
    }
    Ok(out)
}

/// Deviation of each measured speedup from the prediction the scenario
/// gives for the same load and provider count.
pub fn compare_live(reports: &[RunMeasurement], scenario: &SimScenario) -> Result<Vec<Comparison>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    reports
        .iter()
        .map(|m| {
            let (_, formula) = scenario.formula(m.load_rows, m.n_providers)?;
            let deviation_abs = (m.speedup_measured - formula).abs();
            Ok(Comparison {
                measurement: m.clone(),
                speedup_formula: formula,
                deviation_abs,
                deviation_rel: deviation_abs / formula,
            })
        })
        .collect()
}

pub fn write_comparisons(rows: &[Comparison]) -> Result<String> {
    let mut w = csv_writer();
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    header.extend(["deviation_abs", "deviation_rel"]);
    w.write_record(&header)?;
    for c in rows {
        let mut fields = c.measurement.fields().to_vec();
        fields[10] = fmt_g9(c.speedup_formula);
        fields.push(fmt_g9(c.deviation_abs));
        fields.push(fmt_g9(c.deviation_rel));
        w.write_record(&fields)?;
    }
    finish(w)
}
