//! Plain-text dataset container.
//!
//! ```text
//! dephsic-dataset 1
//! classes 3
//! split train
//! parents - 0 0 1 1 2 2 3
//! sequences 2
//! sequence 16 8 3 0 3
//! <frame 0: N*C reals, joint-major>
//! ...
//! ```
//!
//! Each `sequence` header carries `T N C label num_classes` (`-` for an
//! unlabeled sequence) and is followed by exactly `T` frame lines. Reals are
//! written in shortest round-trip form, so write-then-read is lossless.

use std::fmt::Write as _;

use ndarray::Array3;

use crate::error::LocatedError;
use crate::skeleton::{Dataset, MotionSequence, SkeletonGraph, Split};

const MAGIC: &str = "dephsic-dataset 1";

pub fn write_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "classes {}", data.num_classes).unwrap();
    writeln!(out, "split {}", data.split.as_str()).unwrap();
    let parents: Vec<String> = data
        .graph
        .parents()
        .iter()
        .map(|p| p.map_or_else(|| "-".to_string(), |p| p.to_string()))
        .collect();
    writeln!(out, "parents {}", parents.join(" ")).unwrap();
    writeln!(out, "sequences {}", data.sequences.len()).unwrap();
    for seq in &data.sequences {
        let (t, n, c) = seq.data().dim();
        let label = seq.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(out, "sequence {t} {n} {c} {label} {}", data.num_classes).unwrap();
        for frame in seq.data().outer_iter() {
            let row: Vec<String> = frame.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self, expected: &str) -> Result<&'a str, LocatedError> {
        match self.lines.next() {
            Some((i, line)) => {
                self.line_no = i + 1;
                Ok(line)
            }
            None => Err(LocatedError::new(
                self.line_no + 1,
                format!("unexpected end of input, expected {expected}"),
            )),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>, LocatedError> {
        let line = self.next(key)?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(key) {
            return Err(self.err(format!("expected '{key}' line")));
        }
        Ok(tokens.collect())
    }

    fn err(&self, message: impl Into<String>) -> LocatedError {
        LocatedError::new(self.line_no, message)
    }

    fn parse<T: std::str::FromStr>(&self, token: &str, what: &str) -> Result<T, LocatedError> {
        token
            .parse()
            .map_err(|_| self.err(format!("invalid {what} '{token}'")))
    }
}

pub fn read_dataset(text: &str) -> Result<Dataset, LocatedError> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        line_no: 0,
    };
    if r.next("header")?.trim() != MAGIC {
        return Err(r.err(format!("expected '{MAGIC}' header")));
    }
    let num_classes: usize = match r.keyed("classes")?.as_slice() {
        [k] => r.parse(k, "class count")?,
        _ => return Err(r.err("expected 'classes K'")),
    };
    let split: Split = match r.keyed("split")?.as_slice() {
        [s] => s.parse().map_err(|e: crate::Error| r.err(e.to_string()))?,
        _ => return Err(r.err("expected 'split train|test'")),
    };
    let parents = r
        .keyed("parents")?
        .into_iter()
        .map(|tok| match tok {
            "-" => Ok(None),
            p => r.parse(p, "parent index").map(Some),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let graph = SkeletonGraph::from_parents(parents).map_err(|e| r.err(e.to_string()))?;
    let count: usize = match r.keyed("sequences")?.as_slice() {
        [c] => r.parse(c, "sequence count")?,
        _ => return Err(r.err("expected 'sequences COUNT'")),
    };

    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let header = r.keyed("sequence")?;
        let [t, n, c, label, k] = header.as_slice() else {
            return Err(r.err("expected 'sequence T N C LABEL CLASSES'"));
        };
        let t: usize = r.parse(t, "frame count")?;
        let n: usize = r.parse(n, "joint count")?;
        let c: usize = r.parse(c, "channel count")?;
        let label: Option<usize> = match *label {
            "-" => None,
            l => Some(r.parse(l, "label")?),
        };
        let k: usize = r.parse(k, "class count")?;
        if k != num_classes {
            return Err(r.err(format!(
                "sequence declares {k} classes, dataset has {num_classes}"
            )));
        }
        if n != graph.num_joints() {
            return Err(r.err(format!(
                "sequence has {n} joints, skeleton has {}",
                graph.num_joints()
            )));
        }
        let mut values = Vec::with_capacity(t * n * c);
        for frame in 0..t {
            let line = r.next("frame line")?;
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(r.parse::<f64>(tok, "real")?);
            }
            if values.len() - before != n * c {
                return Err(r.err(format!(
                    "frame {frame} has {} values, expected {}",
                    values.len() - before,
                    n * c
                )));
            }
        }
        let data = Array3::from_shape_vec((t, n, c), values).map_err(|e| r.err(e.to_string()))?;
        sequences.push(MotionSequence::new(data, label).map_err(|e| r.err(e.to_string()))?);
    }
    for (i, line) in r.lines.by_ref() {
        if !line.trim().is_empty() {
            return Err(LocatedError::new(i + 1, "trailing content"));
        }
    }
    Dataset::new(sequences, num_classes, split, graph)
        .map_err(|e| LocatedError::new(r.line_no, e.to_string()))
}
