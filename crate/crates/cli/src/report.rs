//! Report rows, the versioned CSV format and the plain-text summary.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wafermesh_core::report::ViolationKind;
use wafermesh_core::{Matrix, SimReport};

/// First line of every report CSV.
pub const VERSION_LINE: &str = "# wafermesh-report v1";

pub const HEADER: [&str; 17] = [
    "scenario",
    "algorithm",
    "grid",
    "dims",
    "seed",
    "steps",
    "comm_cycles",
    "compute_cycles",
    "total_cycles",
    "hops_critical_max",
    "routing_stages_max",
    "peak_mem_bytes",
    "max_paths_per_core",
    "violations",
    "checksum",
    "verified",
    "note",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verified {
    Yes,
    No,
    /// No numeric result to check, e.g. an infeasible run.
    Na,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub algorithm: String,
    pub grid: String,
    pub dims: String,
    pub seed: u64,
    pub steps: usize,
    pub comm_cycles: u64,
    pub compute_cycles: u64,
    pub total_cycles: u64,
    pub hops_critical_max: u32,
    pub routing_stages_max: u32,
    pub peak_mem_bytes: u64,
    pub max_paths_per_core: u32,
    /// `R` (routing budget), `M` (memory budget), both, or `infeasible`.
    pub violations: String,
    /// SHA-256 of the numeric output.
    pub checksum: String,
    pub verified: Verified,
    pub note: String,
}

pub type RowKey = (String, String, String, String, u64);

impl ReportRow {
    pub fn from_report(scenario: &str, grid: String, dims: String, seed: u64, report: &SimReport) -> Self {
        let mut violations = String::new();
        if report.has_violation(ViolationKind::Routing) {
            violations.push('R');
        }
        if report.has_violation(ViolationKind::Memory) {
            violations.push('M');
        }
        Self {
            scenario: scenario.to_string(),
            algorithm: report.algorithm.clone(),
            grid,
            dims,
            seed,
            steps: report.steps.len(),
            comm_cycles: report.comm_cycles(),
            compute_cycles: report.compute_cycles(),
            total_cycles: report.total_cycles(),
            hops_critical_max: report.hops_critical_max(),
            routing_stages_max: report.routing_stages_max(),
            peak_mem_bytes: report.peak_mem_bytes,
            max_paths_per_core: report.max_paths_per_core,
            violations,
            checksum: String::new(),
            verified: Verified::Na,
            note: String::new(),
        }
    }

    pub fn infeasible(scenario: &str, algorithm: &str, grid: String, dims: String, seed: u64, why: &str) -> Self {
        let mut row = Self::from_report(scenario, grid, dims, seed, &SimReport::new(algorithm));
        row.violations = "infeasible".into();
        row.note = why.to_string();
        row
    }

    pub fn key(&self) -> RowKey {
        (self.scenario.clone(), self.algorithm.clone(), self.grid.clone(), self.dims.clone(), self.seed)
    }
}

pub fn checksum_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the little-endian f32 data with the shape prepended.
pub fn checksum_matrix(m: &Matrix) -> String {
    let mut bytes = Vec::with_capacity(16 + m.len() * 4);
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    checksum_bytes(&bytes)
}

pub fn checksum_usizes(values: &[usize]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as u64).to_le_bytes()).collect();
    checksum_bytes(&bytes)
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().context("flushing CSV")?)?;
    Ok(format!("{VERSION_LINE}\n{body}"))
}

/// Parses a report, rejecting other versions and any header that differs from
/// [`HEADER`] in names or order.
pub fn from_csv(input: impl Read, origin: &str) -> Result<Vec<ReportRow>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != VERSION_LINE {
        bail!("{origin}: expected {VERSION_LINE:?} on line 1, found {:?}", first.trim_end());
    }
    let mut csv = csv::Reader::from_reader(reader);
    let header: Vec<String> = csv.headers()?.iter().map(String::from).collect();
    if header != HEADER {
        bail!("{origin}: schema mismatch, header is [{}], expected [{}]", header.join(","), HEADER.join(","));
    }
    csv.deserialize()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("{origin}: record {}", i + 1)))
        .collect()
}

pub fn summary_table(rows: &[ReportRow]) -> String {
    let cols = ["scenario", "algorithm", "grid", "dims", "seed", "total", "comm", "compute", "hops", "stages", "mem", "paths", "flags", "ok"];
    let cells: Vec<[String; 14]> = rows
        .iter()
        .map(|r| {
            let ok = match r.verified {
                Verified::Yes => "yes",
                Verified::No => "NO",
                Verified::Na => "-",
            };
            [
                r.scenario.clone(),
                r.algorithm.clone(),
                r.grid.clone(),
                r.dims.clone(),
                r.seed.to_string(),
                r.total_cycles.to_string(),
                r.comm_cycles.to_string(),
                r.compute_cycles.to_string(),
                r.hops_critical_max.to_string(),
                r.routing_stages_max.to_string(),
                r.peak_mem_bytes.to_string(),
                r.max_paths_per_core.to_string(),
                r.violations.clone(),
                ok.to_string(),
            ]
        })
        .collect();
    let mut widths = cols.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, fields: &[&str]| {
        let joined: Vec<String> = fields.iter().zip(widths).map(|(f, w)| format!("{f:<w$}")).collect();
        writeln!(out, "{}", joined.join("  ").trim_end()).unwrap();
    };
    line(&mut out, &cols);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alg: &str, total: u64) -> ReportRow {
        let mut r = ReportRow::from_report("s", "4x4".into(), "8x8x8".into(), 0, &SimReport::new(alg));
        r.total_cycles = total;
        r
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("cannon", 10), ReportRow::infeasible("s", "summa", "4x4".into(), "8x8x8".into(), 1, "too big, sorry")];
        let text = to_csv(&rows).unwrap();
        assert!(text.starts_with(VERSION_LINE));
        assert_eq!(from_csv(text.as_bytes(), "t").unwrap(), rows);
    }

    #[test]
    fn rejects_other_versions() {
        let text = to_csv(&[row("a", 1)]).unwrap().replace("v1", "v9");
        assert!(from_csv(text.as_bytes(), "t").is_err());
    }

    #[test]
    fn checksum_depends_on_shape() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        assert_ne!(checksum_matrix(&a), checksum_matrix(&b));
        assert_eq!(checksum_matrix(&a).len(), 64);
    }
}
