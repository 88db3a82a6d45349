//! CLDS: a portable text format for small labeled datasets.
//!
//! ```text
//! clds v1 dim=<d> classes=<C>
//! <label>,<v1>,...,<vd>
//! ```
//!
//! Labels must be contiguous `0..C-1`. Floats are decimal; the writer emits
//! the shortest round-tripping representation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CilError, Result};

use super::LabeledExample;

/// Examples parsed from one CLDS file (no train/test structure).
#[derive(Debug, Clone)]
pub struct TableDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

pub fn load_table_dataset(path: impl AsRef<Path>) -> Result<TableDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CilError::io(path.display().to_string(), e))?;
    parse_clds(&text)
}

fn parse_clds(text: &str) -> Result<TableDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CilError::Format {
            line: 1,
            msg: "empty file".into(),
        })?;
    let (dim, num_classes) = parse_header(header)?;

    let mut examples = Vec::new();
    let mut seen = vec![false; num_classes];
    let mut last_line = 1;
    for (idx, line) in lines {
        let line_no = idx + 1;
        last_line = line_no;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| CilError::Format {
                line: line_no,
                msg: format!("unparsable label in {line:?}"),
            })?;
        if label >= num_classes {
            return Err(CilError::Format {
                line: line_no,
                msg: format!("label {label} exceeds declared classes {num_classes}"),
            });
        }
        let input: Vec<f64> = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| CilError::Format {
                    line: line_no,
                    msg: format!("unparsable value {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if input.len() != dim {
            return Err(CilError::Format {
                line: line_no,
                msg: format!("expected {dim} values, got {}", input.len()),
            });
        }
        seen[label] = true;
        examples.push(LabeledExample { input, label });
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CilError::Format {
            line: last_line,
            msg: format!("labels are not contiguous: class {missing} has no examples"),
        });
    }
    Ok(TableDataset {
        dim,
        num_classes,
        examples,
    })
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let err = |msg: String| CilError::Format { line: 1, msg };
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "clds" || parts[1] != "v1" {
        return Err(err(format!(
            "expected header 'clds v1 dim=<d> classes=<C>', got {header:?}"
        )));
    }
    let field = |s: &str, key: &str| -> Result<usize> {
        s.strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(format!("bad header field {s:?}")))
    };
    let dim = field(parts[2], "dim=")?;
    let classes = field(parts[3], "classes=")?;
    if dim == 0 || classes == 0 {
        return Err(err("dim and classes must be positive".into()));
    }
    Ok((dim, classes))
}

pub fn write_table_dataset(
    path: impl AsRef<Path>,
    dim: usize,
    num_classes: usize,
    examples: &[LabeledExample],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("clds v1 dim={dim} classes={num_classes}\n");
    for e in examples {
        write!(out, "{}", e.label).unwrap();
        for v in &e.input {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CilError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_two_classes() {
        let ds = parse_clds("clds v1 dim=2 classes=2\n0,1.0,2.0\n1,3.0,4.0\n0,-1.5,0.25\n")
            .unwrap();
        assert_eq!(ds.examples.len(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.examples[2].input, vec![-1.5, 0.25]);
    }

    #[test]
    fn label_gap_rejected() {
        let err = parse_clds("clds v1 dim=1 classes=3\n0,1.0\n2,2.0\n").unwrap_err();
        match err {
            CilError::Format { msg, .. } => assert!(msg.contains("class 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_clds("clds v1 dim=2 classes=1\n0,1.0,2.0\n0,oops,3.0\n").unwrap_err();
        match err {
            CilError::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_arity_reports_line() {
        let err = parse_clds("clds v1 dim=3 classes=1\n0,1.0,2.0\n").unwrap_err();
        match err {
            CilError::Format { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("expected 3"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.clds");
        let examples = vec![
            LabeledExample {
                input: vec![0.1, -2.5e-3],
                label: 0,
            },
            LabeledExample {
                input: vec![std::f64::consts::PI, 1.0 / 3.0],
                label: 1,
            },
        ];
        write_table_dataset(&path, 2, 2, &examples).unwrap();
        let ds = load_table_dataset(&path).unwrap();
        assert_eq!(ds.examples.len(), 2);
        for (a, b) in ds.examples.iter().zip(&examples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.input, b.input);
        }
    }
}
