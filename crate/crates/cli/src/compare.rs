//! Row-by-row diff of two reports with the same schema.

use std::collections::BTreeMap;
use std::fmt;

use crate::report::{ReportRow, RowKey, Verified};

#[derive(Debug, Clone, PartialEq)]
pub struct RowDiff {
    pub key: RowKey,
    pub before: u64,
    pub after: u64,
    pub violations: (String, String),
    pub verified: (Verified, Verified),
    pub checksum_changed: bool,
}

impl RowDiff {
    pub fn delta(&self) -> i128 {
        self.after as i128 - self.before as i128
    }

    /// `before / after`; above 1 means the second report is faster.
    pub fn speedup(&self) -> Option<f64> {
        (self.after > 0).then(|| self.before as f64 / self.after as f64)
    }

    pub fn flags_changed(&self) -> bool {
        self.violations.0 != self.violations.1 || self.verified.0 != self.verified.1
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub rows: Vec<RowDiff>,
    pub only_a: Vec<RowKey>,
    pub only_b: Vec<RowKey>,
}

impl Comparison {
    pub fn is_identical(&self) -> bool {
        self.only_a.is_empty()
            && self.only_b.is_empty()
            && self.rows.iter().all(|d| d.delta() == 0 && !d.flags_changed() && !d.checksum_changed)
    }
}

pub fn compare(a: &[ReportRow], b: &[ReportRow]) -> Comparison {
    let index = |rows: &[ReportRow]| -> BTreeMap<RowKey, ReportRow> { rows.iter().map(|r| (r.key(), r.clone())).collect() };
    let (a, b) = (index(a), index(b));
    let mut out = Comparison::default();
    for (key, ra) in &a {
        match b.get(key) {
            Some(rb) => out.rows.push(RowDiff {
                key: key.clone(),
                before: ra.total_cycles,
                after: rb.total_cycles,
                violations: (ra.violations.clone(), rb.violations.clone()),
                verified: (ra.verified, rb.verified),
                checksum_changed: ra.checksum != rb.checksum,
            }),
            None => out.only_a.push(key.clone()),
        }
    }
    out.only_b = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
    out
}

fn key_str(k: &RowKey) -> String {
    format!("{} {} {} {} seed={}", k.0, k.1, k.2, k.3, k.4)
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.rows {
            let speedup = d.speedup().map_or("-".to_string(), |s| format!("{s:.2}x"));
            write!(f, "{}: {} -> {} ({:+}, {speedup})", key_str(&d.key), d.before, d.after, d.delta())?;
            if d.violations.0 != d.violations.1 {
                write!(f, " flags {:?} -> {:?}", d.violations.0, d.violations.1)?;
            }
            if d.verified.0 != d.verified.1 {
                write!(f, " verified {:?} -> {:?}", d.verified.0, d.verified.1)?;
            }
            if d.checksum_changed {
                write!(f, " checksum changed")?;
            }
            writeln!(f)?;
        }
        for k in &self.only_a {
            writeln!(f, "{}: only in first report", key_str(k))?;
        }
        for k in &self.only_b {
            writeln!(f, "{}: only in second report", key_str(k))?;
        }
        if self.is_identical() {
            writeln!(f, "reports are identical")?;
        }
        Ok(())
    }
}
