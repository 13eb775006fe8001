use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DataError, Dataset, PatientRecord, Split};

/// Writes one compact JSON object per line, LF-terminated.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for r in &ds.records {
        let line = serde_json::to_string(r).expect("records always serialize");
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn parse_record_line(line: &str, n_codes: usize) -> Result<PatientRecord, String> {
    let r: PatientRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    r.validate(n_codes, None)?;
    Ok(r)
}

/// Reads a dataset, checking every code against a vocabulary of `n_codes` entries and
/// requiring a consistent label length. Blank lines are skipped.
pub fn load_jsonl(path: &Path, n_codes: usize, split: Split) -> Result<Dataset, DataError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: p.clone(),
        source,
    })?;
    let mut records: Vec<PatientRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |detail: String| DataError::Malformed {
            path: p.clone(),
            line: i + 1,
            detail,
        };
        let r = parse_record_line(&line, n_codes).map_err(malformed)?;
        if let Some(first) = records.first() {
            if first.label.len() != r.label.len() {
                return Err(malformed(format!(
                    "label length {} differs from {} on earlier lines",
                    r.label.len(),
                    first.label.len()
                )));
            }
        }
        records.push(r);
    }
    Ok(Dataset { records, split })
}
