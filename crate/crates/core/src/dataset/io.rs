//! Record serialization: sectioned CSV and JSONL.
//!
//! CSV layout: one header row, then per record a 9-field metadata row followed
//! by `t,value[,observed]` sample rows. JSONL holds one record object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::{
    FlawLevel, Rotation, SensorOrientation, SensorSide, TestCondition, VibrationRecord,
};
use crate::error::{AxError, Result};

pub const CSV_HEADER: &str = "record_id,sample_rate_hz,flaw_level,crack_depth_mm,load_tonnes,speed_kmh,rotation,sensor_side,sensor_orientation";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Jsonl,
}

impl RecordFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(RecordFormat::Csv),
            "jsonl" | "json" => Ok(RecordFormat::Jsonl),
            other => Err(AxError::InvalidArgument(format!(
                "unknown record format '{other}' (expected csv or jsonl)"
            ))),
        }
    }

    /// Guess from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => RecordFormat::Jsonl,
            _ => RecordFormat::Csv,
        }
    }
}

/// Read records from `path`, validating invariants and z-scoring any fully
/// observed record that is not already normalized (so write/read round trips
/// are exact). Records with masked gaps pass through untouched: they are
/// partial views of an already-normalized signal, and rescaling them would
/// shift the hidden truth under the gaps.
pub fn read_records(path: &Path, format: RecordFormat) -> Result<Vec<VibrationRecord>> {
    let mut records = match format {
        RecordFormat::Csv => read_csv(path)?,
        RecordFormat::Jsonl => read_jsonl(path)?,
    };
    for rec in &mut records {
        rec.validate()?;
        if rec.mask.is_none() && !rec.is_normalized() {
            rec.zscore();
        }
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[VibrationRecord], format: RecordFormat) -> Result<()> {
    match format {
        RecordFormat::Csv => write_csv(path, records),
        RecordFormat::Jsonl => write_jsonl(path, records),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<VibrationRecord>> {
    let file = File::open(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AxError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VibrationRecord = serde_json::from_str(&line).map_err(|e| AxError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl(path: &Path, records: &[VibrationRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| AxError::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| AxError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn parse_field<T, F>(path: &Path, line: usize, name: &str, raw: &str, f: F) -> Result<T>
where
    F: FnOnce(&str) -> std::result::Result<T, String>,
{
    f(raw.trim()).map_err(|msg| AxError::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("field '{name}': {msg}"),
    })
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn read_csv(path: &Path) -> Result<Vec<VibrationRecord>> {
    let file = File::open(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));

    let mut out: Vec<VibrationRecord> = Vec::new();
    let mut current: Option<(VibrationRecord, Vec<bool>, bool)> = None; // record, mask, any_masked
    let mut first = true;

    let finalize = |out: &mut Vec<VibrationRecord>,
                    current: &mut Option<(VibrationRecord, Vec<bool>, bool)>| {
        if let Some((mut rec, mask, any_masked)) = current.take() {
            if any_masked {
                rec.mask = Some(mask);
            }
            out.push(rec);
        }
    };

    for (idx, row) in reader.records().enumerate() {
        let lineno = idx + 1;
        let row = row.map_err(|e| AxError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if first {
            first = false;
            let header: Vec<&str> = row.iter().map(|f| f.trim()).collect();
            if header.join(",") != CSV_HEADER {
                return Err(AxError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: format!("unexpected header '{}'", header.join(",")),
                });
            }
            continue;
        }
        match row.len() {
            9 => {
                finalize(&mut out, &mut current);
                let get = |i: usize| row.get(i).unwrap_or("");
                let condition = TestCondition {
                    flaw_level: FlawLevel::parse(get(2)).map_err(|e| AxError::Parse {
                        path: path.display().to_string(),
                        line: lineno,
                        msg: e.to_string(),
                    })?,
                    crack_depth_mm: parse_field(path, lineno, "crack_depth_mm", get(3), parse_f64)?,
                    load_tonnes: parse_field(path, lineno, "load_tonnes", get(4), parse_f64)?,
                    speed_kmh: parse_field(path, lineno, "speed_kmh", get(5), parse_f64)?,
                    rotation: Rotation::parse(get(6)).map_err(|e| AxError::Parse {
                        path: path.display().to_string(),
                        line: lineno,
                        msg: e.to_string(),
                    })?,
                    sensor_side: SensorSide::parse(get(7)).map_err(|e| AxError::Parse {
                        path: path.display().to_string(),
                        line: lineno,
                        msg: e.to_string(),
                    })?,
                    sensor_orientation: SensorOrientation::parse(get(8)).map_err(|e| {
                        AxError::Parse {
                            path: path.display().to_string(),
                            line: lineno,
                            msg: e.to_string(),
                        }
                    })?,
                };
                let rec = VibrationRecord {
                    record_id: get(0).trim().to_string(),
                    sample_rate_hz: parse_field(path, lineno, "sample_rate_hz", get(1), parse_f64)?,
                    condition,
                    samples: Vec::new(),
                    mask: None,
                };
                current = Some((rec, Vec::new(), false));
            }
            2 | 3 => {
                let Some((rec, mask, any_masked)) = current.as_mut() else {
                    return Err(AxError::Parse {
                        path: path.display().to_string(),
                        line: lineno,
                        msg: "sample row before any record metadata row".into(),
                    });
                };
                let t: usize =
                    parse_field(path, lineno, "t", row.get(0).unwrap_or(""), |s| {
                        s.parse::<usize>().map_err(|e| e.to_string())
                    })?;
                if t != rec.samples.len() {
                    return Err(AxError::Parse {
                        path: path.display().to_string(),
                        line: lineno,
                        msg: format!("sample index {t} out of order (expected {})", rec.samples.len()),
                    });
                }
                let value =
                    parse_field(path, lineno, "value", row.get(1).unwrap_or(""), parse_f64)?;
                let observed = match row.get(2) {
                    None | Some("") => true,
                    Some(raw) => parse_field(path, lineno, "observed", raw, |s| match s {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        other => Err(format!("expected 0/1/true/false, got '{other}'")),
                    })?,
                };
                rec.samples.push(value);
                mask.push(observed);
                if !observed {
                    *any_masked = true;
                }
            }
            n => {
                return Err(AxError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: format!("expected 9 metadata fields or 2-3 sample fields, got {n}"),
                });
            }
        }
    }
    finalize(&mut out, &mut current);
    Ok(out)
}

fn write_csv(path: &Path, records: &[VibrationRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}").map_err(|e| AxError::io(path.display().to_string(), e))?;
    for rec in records {
        let c = &rec.condition;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            rec.record_id,
            rec.sample_rate_hz,
            c.flaw_level,
            c.crack_depth_mm,
            c.load_tonnes,
            c.speed_kmh,
            c.rotation.as_str(),
            c.sensor_side.as_str(),
            c.sensor_orientation.as_str(),
        )
        .map_err(|e| AxError::io(path.display().to_string(), e))?;
        for (t, &v) in rec.samples.iter().enumerate() {
            match &rec.mask {
                None => writeln!(w, "{t},{v}"),
                Some(m) => writeln!(w, "{t},{v},{}", u8::from(m[t])),
            }
            .map_err(|e| AxError::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{mask_gaps, synth_record, TestCondition};
    use tempfile::tempdir;

    fn sample_record(seed: u64) -> VibrationRecord {
        let c = TestCondition::new(
            FlawLevel::D1,
            4.0,
            20.0,
            Rotation::Clockwise,
            SensorSide::Lhs,
            SensorOrientation::Vertical,
        );
        synth_record(&c, 1.0, 256.0, 0.05, seed).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let recs = vec![sample_record(1), mask_gaps(&sample_record(2), 0.1, 2, 3).unwrap()];
        write_records(&path, &recs, RecordFormat::Csv).unwrap();
        let back = read_records(&path, RecordFormat::Csv).unwrap();
        assert_eq!(recs, back);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let recs = vec![sample_record(1), sample_record(2)];
        write_records(&path, &recs, RecordFormat::Jsonl).unwrap();
        let back = read_records(&path, RecordFormat::Jsonl).unwrap();
        assert_eq!(recs, back);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path, RecordFormat::Csv).unwrap().is_empty());
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path, RecordFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn depth_flaw_mismatch_is_invariant_violation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut rec = sample_record(1);
        rec.condition.flaw_level = FlawLevel::D2; // depth stays 5.7
        write_records(&path, &[rec], RecordFormat::Csv).unwrap();
        let err = read_records(&path, RecordFormat::Csv).unwrap_err();
        match err {
            AxError::InvariantViolation { record_id, .. } => {
                assert!(record_id.contains("synth-D1"))
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{CSV_HEADER}\n0,1.5\n")).unwrap();
        let err = read_records(&path, RecordFormat::Csv).unwrap_err();
        match err {
            AxError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unnormalized_input_is_zscored() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        let mut rec = sample_record(1);
        for v in &mut rec.samples {
            *v = *v * 3.0 + 10.0;
        }
        write_records(&path, &[rec], RecordFormat::Csv).unwrap();
        let back = read_records(&path, RecordFormat::Csv).unwrap();
        let (mean, std) = back[0].observed_stats();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }
}
