//! Per-ratio curve tables built from a finished run directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::evaluate::{AGGREGATE_FILE, DIAGNOSTICITY_FILE, MANIFEST_FILE};

/// Ratio column value on soft-metric reference rows.
pub const ALL_RATIOS: &str = "all";

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Consistency(format!(
            "run directory {} has no {name}",
            dir.display()
        )));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

struct Table {
    name: &'static str,
    header: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn column(&self, col: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Consistency(format!("{} lacks column {col}", self.name)))
    }
}

fn table(dir: &Path, name: &'static str) -> Result<Table> {
    let text = read(dir, name)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Consistency(format!("{name}: {e}")))?
        .clone();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Consistency(format!("{name}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Consistency(format!("{name}: ragged row")));
        }
        out.push(rec);
    }
    Ok(Table {
        name,
        header,
        rows: out,
    })
}

/// Writes `<dataset>_faithfulness_curve.csv` and
/// `<dataset>_diagnosticity_curve.csv` into `dir` and returns their paths.
pub fn emit_curves(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest: serde_json::Value = serde_json::from_str(&read(dir, MANIFEST_FILE)?)
        .map_err(|e| Error::Consistency(format!("{MANIFEST_FILE}: {e}")))?;
    let dataset = manifest
        .get("dataset")
        .and_then(|d| d.as_str())
        .ok_or_else(|| Error::Consistency(format!("{MANIFEST_FILE} lacks a dataset name")))?
        .to_string();

    let agg = table(dir, AGGREGATE_FILE)?;
    let (role, fa, metric, scope, ratio, mean) = (
        agg.column("role")?,
        agg.column("fa")?,
        agg.column("metric")?,
        agg.column("scope")?,
        agg.column("ratio")?,
        agg.column("mean")?,
    );
    let mut faith = vec![["ratio", "fa_name", "metric", "mean"].map(String::from)];
    let mut soft_refs = Vec::new();
    for r in agg.rows.iter().filter(|r| &r[role] == "fa") {
        match &r[scope] {
            "ratio" => faith.push([&r[ratio], &r[fa], &r[metric], &r[mean]].map(String::from)),
            "soft" => soft_refs.push([ALL_RATIOS, &r[fa], &r[metric], &r[mean]].map(String::from)),
            _ => {}
        }
    }
    faith.extend(soft_refs);

    let diag = table(dir, DIAGNOSTICITY_FILE)?;
    let (d_metric, d_fa, d_scope, d_value) = (
        diag.column("metric")?,
        diag.column("fa")?,
        diag.column("scope")?,
        diag.column("diagnosticity")?,
    );
    let mut dcurve = vec![["ratio", "fa_name", "metric", "diagnosticity"].map(String::from)];
    let mut dsoft = Vec::new();
    for r in &diag.rows {
        match &r[d_scope] {
            "aopc" => {}
            "soft" => dsoft.push([ALL_RATIOS, &r[d_fa], &r[d_metric], &r[d_value]].map(String::from)),
            ratio => dcurve.push([ratio, &r[d_fa], &r[d_metric], &r[d_value]].map(String::from)),
        }
    }
    dcurve.extend(dsoft);

    let mut written = Vec::new();
    for (suffix, table) in [("faithfulness_curve", faith), ("diagnosticity_curve", dcurve)] {
        let path = dir.join(format!("{dataset}_{suffix}.csv"));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Consistency(format!("{}: {e}", path.display())))?;
        for row in &table {
            w.write_record(row)
                .map_err(|e| Error::Consistency(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_are_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_curves(dir.path()), Err(Error::Consistency(_))));
        fs::write(dir.path().join(MANIFEST_FILE), "{\"dataset\":\"d\"}").unwrap();
        assert!(matches!(emit_curves(dir.path()), Err(Error::Consistency(_))));
    }
}
