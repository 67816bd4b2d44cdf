//! Sweep result rows and comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no result rows")]
    EmptyResults,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One `results.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub axis_value: usize,
    pub frr_percent: Option<f64>,
    pub fa_per_hour: Option<f64>,
    pub n_real_pos: usize,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub status: RunStatus,
}

pub const RESULTS_HEADER: &str = "axis_value,frr_percent,fa_per_hour,n_real_pos,n_speakers,utts_per_speaker,seed,status";

pub fn rows_to_csv(rows: &[RunRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        return Ok(format!("{RESULTS_HEADER}\n"));
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn read_results(path: &Path) -> Result<Vec<RunRow>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_results(path: &Path, rows: &[RunRow]) -> Result<(), ReportError> {
    std::fs::write(path, rows_to_csv(rows)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Rows sorted by axis value, then seed.
    pub rows: Vec<RunRow>,
    pub csv: String,
    pub table: String,
}

/// Sorts rows and renders them as CSV and as an aligned text table.
/// Failed rows stay in the CSV but are left out of the table.
pub fn emit_report(rows: &[RunRow]) -> Result<Report, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.axis_value.cmp(&b.axis_value).then(a.seed.cmp(&b.seed)));
    let csv = rows_to_csv(&rows)?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>10} {:>10} {:>6} {:>8} {:>10} {:>8} {:>8}",
        "axis", "real_pos", "spk", "utt/spk", "seed", "FRR %", "FA/hr"
    );
    for r in rows.iter().filter(|r| r.status == RunStatus::Ok) {
        let _ = writeln!(
            table,
            "{:>10} {:>10} {:>6} {:>8} {:>10} {:>8.2} {:>8.3}",
            r.axis_value,
            r.n_real_pos,
            r.n_speakers,
            r.utts_per_speaker,
            r.seed,
            r.frr_percent.unwrap_or(f64::NAN),
            r.fa_per_hour.unwrap_or(f64::NAN)
        );
    }
    Ok(Report { rows, csv, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(axis: usize, seed: u64, status: RunStatus) -> RunRow {
        RunRow {
            axis_value: axis,
            frr_percent: (status == RunStatus::Ok).then_some(12.5),
            fa_per_hour: (status == RunStatus::Ok).then_some(0.1),
            n_real_pos: axis * 10,
            n_speakers: axis,
            utts_per_speaker: 10,
            seed,
            status,
        }
    }

    #[test]
    fn three_rows() {
        let r = emit_report(&[row(100, 2, RunStatus::Ok), row(1, 0, RunStatus::Ok), row(10, 1, RunStatus::Ok)]).unwrap();
        let lines: Vec<&str> = r.csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], RESULTS_HEADER);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[3].starts_with("100,"));
    }

    #[test]
    fn duplicates_and_failures() {
        let r = emit_report(&[row(5, 9, RunStatus::Ok), row(5, 3, RunStatus::Ok), row(7, 1, RunStatus::Failed)]).unwrap();
        assert_eq!(r.rows[0].seed, 3);
        assert_eq!(r.csv.lines().count(), 4);
        assert!(r.csv.lines().last().unwrap().ends_with(",failed"));
        assert_eq!(r.table.lines().count(), 3);
        assert!(matches!(emit_report(&[]), Err(ReportError::EmptyResults)));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let rows = vec![row(1, 0, RunStatus::Ok), row(2, 1, RunStatus::Failed)];
        write_results(&p, &rows).unwrap();
        assert_eq!(read_results(&p).unwrap(), rows);
    }
}
