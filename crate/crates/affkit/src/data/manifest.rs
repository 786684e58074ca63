//! Manifest CSV parsing and writing.
//!
//! One row per sample, UTF-8, header required. Schemas:
//!
//! ```text
//! mtl: path,valence,arousal,expression,au1,au2,au4,au6,au7,au10,au12,au15,au23,au24,au25,au26
//! lsd: path,expression
//! ```
//!
//! Sentinels: -5.0 for unlabeled valence/arousal, -1 for unlabeled
//! expression or action unit. Floats are serialized with Rust's shortest
//! round-trip formatting, so write-then-parse reproduces values exactly.

use super::{TaskKind, AU_NAMES, NUM_AUS, UNLABELED, VA_UNLABELED};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use std::fmt::Write as _;
use std::path::Path;

/// One sample: an image path plus multi-task labels (valence, arousal,
/// expression, 12 action units) or a synthetic-data label (expression only).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Path relative to the manifest's directory.
    pub image_path: String,
    pub valence: f32,
    pub arousal: f32,
    pub expression: i32,
    pub aus: [i8; NUM_AUS],
}

impl SampleRecord {
    /// A synthetic-data record: expression only, everything else unlabeled.
    pub fn lsd(image_path: impl Into<String>, expression: usize) -> Self {
        SampleRecord {
            image_path: image_path.into(),
            valence: VA_UNLABELED,
            arousal: VA_UNLABELED,
            expression: expression as i32,
            aus: [UNLABELED as i8; NUM_AUS],
        }
    }

    /// True when both continuous labels are valid.
    pub fn has_va(&self) -> bool {
        self.valence != VA_UNLABELED && self.arousal != VA_UNLABELED
    }

    pub fn expression_label(&self) -> Option<usize> {
        (self.expression >= 0).then_some(self.expression as usize)
    }

    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let va_ok = |v: f32| v == VA_UNLABELED || (-1.0..=1.0).contains(&v);
        if !va_ok(self.valence) || !va_ok(self.arousal) {
            return Err(Error::invalid(format!(
                "valence/arousal must be in [-1,1] or the -5.0 sentinel, got ({}, {})",
                self.valence, self.arousal
            )));
        }
        let classes = task.num_classes() as i32;
        let expr_min = match task {
            TaskKind::Mtl => UNLABELED,
            TaskKind::Lsd => 0, // synthetic data is always labeled
        };
        if self.expression < expr_min || self.expression >= classes {
            return Err(Error::invalid(format!(
                "expression {} out of range for task {task}",
                self.expression
            )));
        }
        if self.aus.iter().any(|&a| !(-1..=1).contains(&(a as i32))) {
            return Err(Error::invalid("action units must be -1, 0 or 1"));
        }
        Ok(())
    }
}

fn header(task: TaskKind) -> String {
    match task {
        TaskKind::Mtl => {
            let mut h = String::from("path,valence,arousal,expression");
            for au in AU_NAMES {
                h.push(',');
                h.push_str(au);
            }
            h
        }
        TaskKind::Lsd => String::from("path,expression"),
    }
}

/// Reads and validates a manifest. Errors carry the 1-based line number.
pub fn parse_manifest(path: &Path, task: TaskKind) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let expected_header = header(task);
    match lines.next() {
        Some((_, first)) if first.trim_end() == expected_header => {}
        Some((_, first)) => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("header {first:?} does not match {task} schema"),
            });
        }
        None => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file".to_string(),
            });
        }
    }

    let fail = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut records = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        let expected = match task {
            TaskKind::Mtl => 4 + NUM_AUS,
            TaskKind::Lsd => 2,
        };
        if fields.len() != expected {
            return Err(fail(
                line_no,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let parse_f32 = |s: &str, what: &str| -> Result<f32> {
            s.parse::<f32>()
                .map_err(|_| fail(line_no, format!("bad {what}: {s:?}")))
        };
        let parse_label = |s: &str, what: &str| -> Result<i32> {
            s.parse::<i32>()
                .map_err(|_| fail(line_no, format!("bad {what}: {s:?}")))
        };

        let record = match task {
            TaskKind::Mtl => {
                let mut aus = [0i8; NUM_AUS];
                for (i, f) in fields[4..].iter().enumerate() {
                    aus[i] = parse_label(f, AU_NAMES[i])? as i8;
                }
                SampleRecord {
                    image_path: fields[0].to_string(),
                    valence: parse_f32(fields[1], "valence")?,
                    arousal: parse_f32(fields[2], "arousal")?,
                    expression: parse_label(fields[3], "expression")?,
                    aus,
                }
            }
            TaskKind::Lsd => {
                let expr = parse_label(fields[1], "expression")?;
                SampleRecord {
                    image_path: fields[0].to_string(),
                    valence: VA_UNLABELED,
                    arousal: VA_UNLABELED,
                    expression: expr,
                    aus: [UNLABELED as i8; NUM_AUS],
                }
            }
        };
        record
            .validate(task)
            .map_err(|e| fail(line_no, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Serializes records in the task schema and writes atomically.
pub fn write_manifest(path: &Path, records: &[SampleRecord], task: TaskKind) -> Result<()> {
    let mut out = header(task);
    out.push('\n');
    for r in records {
        r.validate(task)?;
        match task {
            TaskKind::Mtl => {
                let _ = write!(
                    out,
                    "{},{},{},{}",
                    r.image_path, r.valence, r.arousal, r.expression
                );
                for &au in &r.aus {
                    let _ = write!(out, ",{au}");
                }
            }
            TaskKind::Lsd => {
                let _ = write!(out, "{},{}", r.image_path, r.expression);
            }
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sentinel_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut content = header(TaskKind::Mtl);
        content.push('\n');
        content.push_str("a.png,-5.0,-5.0,3,0,1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1\n");
        std::fs::write(&p, content).unwrap();
        let records = parse_manifest(&p, TaskKind::Mtl).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert!(!r.has_va());
        assert_eq!(r.expression_label(), Some(3));
        assert_eq!(r.aus[0], 0);
        assert_eq!(r.aus[1], 1);
        assert_eq!(r.aus[2], -1);
    }

    #[test]
    fn empty_data_section_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{}\n", header(TaskKind::Lsd))).unwrap();
        assert!(parse_manifest(&p, TaskKind::Lsd).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            format!("{}\na.png,2\nb.png,9\n", header(TaskKind::Lsd)),
        )
        .unwrap();
        let err = parse_manifest(&p, TaskKind::Lsd).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");

        std::fs::write(&p, "wrong,header\n").unwrap();
        let err = parse_manifest(&p, TaskKind::Lsd).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_valence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut content = header(TaskKind::Mtl);
        content.push('\n');
        content.push_str("a.png,-2.0,0.0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        std::fs::write(&p, content).unwrap();
        assert!(parse_manifest(&p, TaskKind::Mtl).is_err());
    }
}
