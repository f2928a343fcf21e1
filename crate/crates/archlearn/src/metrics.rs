//! Metrics timeline CSV.
//!
//! Leading `#` lines carry provenance (`# config_hash: …`, `# config: {…}`,
//! `# preprocessing: …`); then a header row
//! `iter,loss,r_binarize,r_complexity,phi_json,val_acc` and one row per
//! [`MetricsRecord`]. An absent validation accuracy is an empty field.

use std::io::{BufRead, Write};
use std::path::Path;

use archlearn_core::learn::MetricsRecord;

use crate::error::{AppError, AppResult};

pub const COLUMNS: [&str; 6] = ["iter", "loss", "r_binarize", "r_complexity", "phi_json", "val_acc"];
pub const PREPROCESSING: &str = "pixels scaled by 1/255 to [0,1], no mean subtraction";

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub records: Vec<MetricsRecord>,
}

pub fn write_metrics(
    out: &mut impl Write,
    config: &serde_json::Value,
    config_hash: &str,
    records: &[MetricsRecord],
) -> std::io::Result<()> {
    writeln!(out, "# config_hash: {config_hash}")?;
    writeln!(out, "# config: {config}")?;
    writeln!(out, "# preprocessing: {PREPROCESSING}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        let phi = serde_json::to_string(&r.phi).expect("phi serializes");
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            r.r_binarize.to_string(),
            r.r_complexity.to_string(),
            phi,
            val,
        ])?;
    }
    w.flush()
}

pub fn save_metrics(path: &Path, config: &serde_json::Value, hash: &str, records: &[MetricsRecord]) -> AppResult<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, config, hash, records).expect("in-memory write");
    std::fs::write(path, buf).map_err(|e| AppError::io(path, e))
}

/// Parses a metrics CSV; `path` is used only in error messages.
pub fn parse_metrics(text: &str, path: &Path) -> AppResult<MetricsFile> {
    let err = |m: String| AppError::format(path, m);
    let mut config_hash = None;
    let mut config = None;
    let mut body_start = 0;
    for line in text.as_bytes().lines() {
        let line = line.expect("in-memory read");
        let Some(comment) = line.strip_prefix('#') else {
            break;
        };
        body_start += line.len() + 1;
        let comment = comment.trim_start();
        if let Some(h) = comment.strip_prefix("config_hash:") {
            config_hash = Some(h.trim().to_string());
        } else if let Some(c) = comment.strip_prefix("config:") {
            config = Some(serde_json::from_str(c.trim()).map_err(|e| err(format!("bad config comment: {e}")))?);
        }
    }
    let body = text.get(body_start.min(text.len())..).unwrap_or("");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let col =
        |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| err(format!("missing column `{name}`")));
    let idx: Vec<usize> = COLUMNS.iter().map(|c| col(c)).collect::<AppResult<_>>()?;
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> AppResult<f64> {
            field(i).parse().map_err(|_| err(format!("row {}: bad `{}` value {:?}", row + 1, COLUMNS[i], field(i))))
        };
        let iteration =
            field(0).parse().map_err(|_| err(format!("row {}: bad `iter` value {:?}", row + 1, field(0))))?;
        let phi = serde_json::from_str(field(4)).map_err(|e| err(format!("row {}: bad `phi_json`: {e}", row + 1)))?;
        let val_acc = if field(5).is_empty() { None } else { Some(num(5)?) };
        records.push(MetricsRecord {
            iteration,
            loss: num(1)?,
            r_binarize: num(2)?,
            r_complexity: num(3)?,
            phi,
            val_acc,
        });
    }
    Ok(MetricsFile { config_hash, config, records })
}

pub fn load_metrics(path: &Path) -> AppResult<MetricsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_metrics(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                iteration: 10,
                loss: 0.5,
                r_binarize: 0.25,
                r_complexity: 1e-5,
                phi: vec![3, 2],
                val_acc: None,
            },
            MetricsRecord {
                iteration: 20,
                loss: 0.1,
                r_binarize: 0.0,
                r_complexity: -0.5,
                phi: vec![1, 2],
                val_acc: Some(0.875),
            },
        ]
    }

    #[test]
    fn round_trip() {
        let cfg = serde_json::json!({"arch": "fc:3 out:2"});
        let mut buf = Vec::new();
        write_metrics(&mut buf, &cfg, "abc", &records()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("iter,loss,r_binarize,r_complexity,phi_json,val_acc\n"));
        assert!(text.contains("\"[3,2]\""));
        let parsed = parse_metrics(&text, Path::new("m.csv")).unwrap();
        assert_eq!(parsed.records, records());
        assert_eq!(parsed.config_hash.as_deref(), Some("abc"));
        assert_eq!(parsed.config, Some(cfg));
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let e = parse_metrics("iter,loss\n1,0.5\n", Path::new("m.csv")).unwrap_err();
        assert!(e.to_string().contains("missing column `r_binarize`"), "{e}");
    }
}
