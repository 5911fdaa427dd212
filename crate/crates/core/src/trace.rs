//! Validation of externally observed communication counts against the
//! simulator.
//!
//! Observations use a neutral JSON-lines schema, one record per line:
//!
//! ```text
//! {"phase":"Prefill","kind":"Allreduce","count":65,"shape":[128,4096],"bytes_per_element":2}
//! ```
//!
//! Records are grouped by (phase, kind) and compared against a predicted
//! [`KindTable`], usually a stage view of [`crate::ScheduleSummary`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::analytic::CollectiveKind;
use crate::error::{Error, Result};
use crate::schedule::{format_shape, KindRow, KindTable, Phase};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub phase: Phase,
    pub kind: CollectiveKind,
    pub count: u64,
    pub shape: Vec<u64>,
    pub bytes_per_element: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    phase: Phase,
    kind: String,
    count: u64,
    shape: Vec<u64>,
    bytes_per_element: u64,
    #[serde(default)]
    group_size: Option<u64>,
}

fn parse_line(line_no: usize, text: &str) -> Result<ObservationRecord> {
    let parse_err = |message: String| Error::Parse {
        line: line_no,
        message,
        text: text.to_string(),
    };
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let kind = raw
        .kind
        .parse::<CollectiveKind>()
        .map_err(|found| Error::UnknownKind {
            line: line_no,
            found,
        })?;
    if raw.shape.is_empty() || raw.shape.contains(&0) {
        return Err(parse_err(
            "shape must be a nonempty list of positive integers".into(),
        ));
    }
    if raw.bytes_per_element == 0 {
        return Err(parse_err("bytes_per_element must be >= 1".into()));
    }
    if raw.group_size == Some(0) {
        return Err(parse_err("group_size must be >= 1".into()));
    }
    Ok(ObservationRecord {
        phase: raw.phase,
        kind,
        count: raw.count,
        shape: raw.shape,
        bytes_per_element: raw.bytes_per_element,
        group_size: raw.group_size,
    })
}

/// Parses JSON-lines observations. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_observations<R: BufRead>(input: R) -> Result<Vec<ObservationRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
            text: String::new(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(idx + 1, line.trim())?);
    }
    Ok(records)
}

pub fn write_observations(records: &[ObservationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// One record per (phase, kind, shape) of `table`.
pub fn observations_from_table(
    table: &KindTable,
    bytes_per_element: u64,
) -> Vec<ObservationRecord> {
    table
        .rows
        .iter()
        .flat_map(|(&(phase, kind), row)| {
            row.shapes
                .iter()
                .map(move |(shape, &count)| ObservationRecord {
                    phase,
                    kind,
                    count,
                    shape: shape.clone(),
                    bytes_per_element,
                    group_size: Some(row.group_size),
                })
        })
        .collect()
}

/// Folds records into a table; wire bytes are left at zero.
pub fn table_from_observations(records: &[ObservationRecord]) -> KindTable {
    let mut table = KindTable::default();
    for r in records {
        let row: &mut KindRow = table.rows.entry((r.phase, r.kind)).or_default();
        row.count += r.count;
        *row.shapes.entry(r.shape.clone()).or_default() += r.count;
        row.message_bytes += r.count * r.shape.iter().product::<u64>() * r.bytes_per_element;
        if let Some(g) = r.group_size {
            row.group_size = g;
        }
    }
    table
}

// ---------------------------------------------------------------------------
// Diff
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffRow {
    pub phase: Phase,
    pub kind: CollectiveKind,
    pub predicted_count: u64,
    pub observed_count: u64,
    /// observed - predicted
    pub count_delta: i64,
    pub predicted_shapes: BTreeSet<Vec<u64>>,
    pub observed_shapes: BTreeSet<Vec<u64>>,
    /// Message bytes, observed - predicted.
    pub byte_delta: i64,
}

impl DiffRow {
    pub fn matches(&self) -> bool {
        self.count_delta == 0
            && self.byte_delta == 0
            && self.predicted_shapes == self.observed_shapes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub rows: Vec<DiffRow>,
    pub exact_match: bool,
}

impl DiffReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Phase | Operation | Predicted | Observed | Delta | Predicted shape | Observed shape | Byte delta | |\n",
        );
        s.push_str("|---|---|---:|---:|---:|---|---|---:|---|\n");
        let shapes = |set: &BTreeSet<Vec<u64>>| {
            if set.is_empty() {
                "-".to_string()
            } else {
                set.iter()
                    .map(|s| format_shape(s))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:+} | {} | {} | {:+} | {} |",
                r.phase,
                r.kind,
                r.predicted_count,
                r.observed_count,
                r.count_delta,
                shapes(&r.predicted_shapes),
                shapes(&r.observed_shapes),
                r.byte_delta,
                if r.matches() { "ok" } else { "MISMATCH" }
            );
        }
        let _ = writeln!(
            s,
            "\n{}",
            if self.exact_match {
                "exact match"
            } else {
                "mismatch"
            }
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares two tables row by row. Keys present on one side only appear with
/// the other side zeroed.
pub fn diff_tables(observed: &KindTable, predicted: &KindTable) -> DiffReport {
    let empty = KindRow::default();
    let keys: BTreeSet<_> = observed
        .rows
        .keys()
        .chain(predicted.rows.keys())
        .copied()
        .collect();
    let rows: Vec<DiffRow> = keys
        .into_iter()
        .map(|(phase, kind)| {
            let o = observed.rows.get(&(phase, kind)).unwrap_or(&empty);
            let p = predicted.rows.get(&(phase, kind)).unwrap_or(&empty);
            DiffRow {
                phase,
                kind,
                predicted_count: p.count,
                observed_count: o.count,
                count_delta: o.count as i64 - p.count as i64,
                predicted_shapes: p.shapes.keys().cloned().collect(),
                observed_shapes: o.shapes.keys().cloned().collect(),
                byte_delta: o.message_bytes as i64 - p.message_bytes as i64,
            }
        })
        .collect();
    let exact_match = rows.iter().all(DiffRow::matches);
    DiffReport { rows, exact_match }
}

pub fn diff(observed: &[ObservationRecord], predicted: &KindTable) -> DiffReport {
    diff_tables(&table_from_observations(observed), predicted)
}

/// Counts per (phase, kind) of `records`, mainly for reporting.
pub fn counts(records: &[ObservationRecord]) -> BTreeMap<(Phase, CollectiveKind), u64> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry((r.phase, r.kind)).or_default() += r.count;
    }
    out
}
