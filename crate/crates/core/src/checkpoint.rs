//! Plain-text model checkpoints.
//!
//! ```text
//! dephsic-checkpoint 1
//! seed 0
//! epoch 120
//! classes 3
//! in_channels 3
//! center true
//! joints 8
//! parents - 0 0 1 1 2 2 3
//! edges 0-1 0-2 1-3 1-4 2-5 2-6 3-7
//! base channels=16,32 pool=max refinement=true delta=1
//! aux channels=16 pool=max refinement=true delta=1
//! array base.block0.weight 3 16
//! <one line of whitespace-separated values per row>
//! ...
//! ```
//!
//! `aux none` marks a model without an auxiliary encoder. Arrays appear in
//! declaration order ([`Model::arrays`]); values use the shortest
//! representation that round-trips exactly.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::LocatedError;
use crate::model::{EncoderSpec, Model, TemporalPool};
use crate::refinement::GaussianWidth;
use crate::skeleton::SkeletonGraph;

pub const MAGIC: &str = "dephsic-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

fn spec_line(spec: &EncoderSpec) -> String {
    let channels: Vec<String> = spec.hidden_channels.iter().map(usize::to_string).collect();
    let pool = match spec.temporal_pool {
        TemporalPool::Mean => "mean",
        TemporalPool::Max => "max",
    };
    format!(
        "channels={} pool={pool} refinement={} delta={}",
        channels.join(","),
        spec.use_refinement,
        spec.delta.get()
    )
}

pub fn write_checkpoint(model: &Model, meta: CheckpointMeta) -> String {
    let mut out = String::new();
    let g = &model.graph;
    let parents: Vec<String> = g
        .parents()
        .iter()
        .map(|p| p.map_or_else(|| "-".to_string(), |p| p.to_string()))
        .collect();
    let edges: Vec<String> = g.edges().iter().map(|(i, j)| format!("{i}-{j}")).collect();
    // writeln! into a String cannot fail
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "epoch {}", meta.epoch);
    let _ = writeln!(out, "classes {}", model.num_classes);
    let _ = writeln!(out, "in_channels {}", model.in_channels);
    let _ = writeln!(out, "center {}", model.center_inputs);
    let _ = writeln!(out, "joints {}", g.num_joints());
    let _ = writeln!(out, "parents {}", parents.join(" "));
    let _ = writeln!(out, "edges {}", edges.join(" "));
    let _ = writeln!(out, "base {}", spec_line(&model.base.spec));
    match &model.aux {
        Some(aux) => {
            let _ = writeln!(out, "aux {}", spec_line(&aux.spec));
        }
        None => out.push_str("aux none\n"),
    }
    for (name, a) in model.arrays() {
        let _ = writeln!(out, "array {name} {} {}", a.nrows(), a.ncols());
        for row in a.rows() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str), LocatedError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(LocatedError::new(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str), LocatedError> {
        let (n, l) = self.next_line(key)?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok((n, rest.trim())),
            _ if l.trim() == key => Ok((n, "")),
            _ => Err(LocatedError::new(
                n,
                format!("expected '{key} ...', found '{l}'"),
            )),
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T, LocatedError> {
    s.trim()
        .parse()
        .map_err(|_| LocatedError::new(line, format!("invalid {what} '{s}'")))
}

fn parse_spec(line: usize, s: &str) -> Result<EncoderSpec, LocatedError> {
    let mut channels = None;
    let mut pool = None;
    let mut refinement = None;
    let mut delta = None;
    for field in s.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| LocatedError::new(line, format!("malformed field '{field}'")))?;
        match k {
            "channels" => {
                channels = Some(
                    v.split(',')
                        .map(|c| parse::<usize>(line, c, "channel count"))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            "pool" => {
                pool = Some(match v {
                    "mean" => TemporalPool::Mean,
                    "max" => TemporalPool::Max,
                    _ => return Err(LocatedError::new(line, format!("unknown pool '{v}'"))),
                })
            }
            "refinement" => refinement = Some(parse::<bool>(line, v, "refinement flag")?),
            "delta" => delta = Some(parse::<f64>(line, v, "delta")?),
            _ => return Err(LocatedError::new(line, format!("unknown field '{k}'"))),
        }
    }
    let missing = |f: &str| LocatedError::new(line, format!("missing field '{f}'"));
    let spec = EncoderSpec {
        hidden_channels: channels.ok_or_else(|| missing("channels"))?,
        temporal_pool: pool.ok_or_else(|| missing("pool"))?,
        delta: GaussianWidth::new(delta.ok_or_else(|| missing("delta"))?)
            .map_err(|e| LocatedError::new(line, e.to_string()))?,
        use_refinement: refinement.ok_or_else(|| missing("refinement"))?,
    };
    spec.validate()
        .map_err(|e| LocatedError::new(line, e.to_string()))?;
    Ok(spec)
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint, LocatedError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (n, header) = lines.next_line("header")?;
    if header.trim() != format!("{MAGIC} {VERSION}") {
        return Err(LocatedError::new(
            n,
            format!("expected '{MAGIC} {VERSION}' header"),
        ));
    }
    let (n, s) = lines.keyed("seed")?;
    let seed = parse::<u64>(n, s, "seed")?;
    let (n, s) = lines.keyed("epoch")?;
    let epoch = parse::<usize>(n, s, "epoch")?;
    let (n, s) = lines.keyed("classes")?;
    let classes = parse::<usize>(n, s, "class count")?;
    let (n, s) = lines.keyed("in_channels")?;
    let in_channels = parse::<usize>(n, s, "channel count")?;
    let (n, s) = lines.keyed("center")?;
    let center = parse::<bool>(n, s, "center flag")?;
    let (n, s) = lines.keyed("joints")?;
    let joints = parse::<usize>(n, s, "joint count")?;

    let (n, s) = lines.keyed("parents")?;
    let parents = s
        .split_whitespace()
        .map(|p| {
            if p == "-" {
                Ok(None)
            } else {
                parse::<usize>(n, p, "parent").map(Some)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (n_edges, s) = lines.keyed("edges")?;
    let edges = s
        .split_whitespace()
        .map(|e| {
            let (i, j) = e
                .split_once('-')
                .ok_or_else(|| LocatedError::new(n_edges, format!("malformed edge '{e}'")))?;
            Ok((
                parse::<usize>(n_edges, i, "edge")?,
                parse::<usize>(n_edges, j, "edge")?,
            ))
        })
        .collect::<Result<Vec<_>, LocatedError>>()?;
    let graph = SkeletonGraph::new(joints, &edges, parents)
        .map_err(|e| LocatedError::new(n_edges, e.to_string()))?;

    let (n, s) = lines.keyed("base")?;
    let base_spec = parse_spec(n, s)?;
    let (n_aux, s) = lines.keyed("aux")?;
    let aux_spec = if s == "none" {
        None
    } else {
        Some(parse_spec(n_aux, s)?)
    };

    // Shapes come from `init`; every value is then overwritten from the file.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(graph, classes, in_channels, base_spec, aux_spec, &mut rng)
        .map_err(|e| LocatedError::new(n_aux, e.to_string()))?;
    model.center_inputs = center;

    let expected: Vec<(String, (usize, usize))> = model
        .arrays()
        .into_iter()
        .map(|(k, a)| (k, a.dim()))
        .collect();
    for ((name, (rows, cols)), target) in expected.into_iter().zip(model.arrays_mut()) {
        let (n, s) = lines.keyed("array")?;
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(LocatedError::new(n, "expected 'array NAME ROWS COLS'"));
        }
        if fields[0] != name {
            return Err(LocatedError::new(
                n,
                format!("expected array '{name}', found '{}'", fields[0]),
            ));
        }
        let dim = (
            parse::<usize>(n, fields[1], "row count")?,
            parse::<usize>(n, fields[2], "column count")?,
        );
        if dim != (rows, cols) {
            return Err(LocatedError::new(
                n,
                format!(
                    "array '{name}' is {}x{}, model expects {rows}x{cols}",
                    dim.0, dim.1
                ),
            ));
        }
        for r in 0..rows {
            let (n, line) = lines.next_line("array row")?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(LocatedError::new(
                    n,
                    format!("expected {cols} values, found {}", vals.len()),
                ));
            }
            for (c, v) in vals.into_iter().enumerate() {
                let x = parse::<f64>(n, v, "value")?;
                if !x.is_finite() {
                    return Err(LocatedError::new(n, format!("non-finite value '{v}'")));
                }
                target[[r, c]] = x;
            }
        }
    }
    if let Some((i, l)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(LocatedError::new(
            i + 1,
            format!("unexpected trailing content '{l}'"),
        ));
    }
    Ok(Checkpoint {
        meta: CheckpointMeta { seed, epoch },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model(aux: bool, refine: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = EncoderSpec::new(vec![4, 5], 2.5).unwrap();
        spec.use_refinement = refine;
        let aux_spec = aux.then(|| {
            let mut s = EncoderSpec::new(vec![3], 9.0).unwrap();
            s.temporal_pool = TemporalPool::Mean;
            s
        });
        let mut m = Model::init(
            SkeletonGraph::binary_tree(5).unwrap(),
            3,
            2,
            spec,
            aux_spec,
            &mut rng,
        )
        .unwrap();
        m.center_inputs = true;
        // biases and scales start at zero; fill everything so they are exercised
        for a in m.arrays_mut() {
            a.mapv_inplace(|_| rng.random_range(-1.0..1.0) / 3.0);
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for (aux, refine) in [(true, true), (false, true), (true, false), (false, false)] {
            let m = model(aux, refine);
            let meta = CheckpointMeta { seed: 11, epoch: 7 };
            let text = write_checkpoint(&m, meta);
            let back = read_checkpoint(&text).unwrap();
            assert_eq!(back.meta, meta);
            assert_eq!(back.model, m);
            assert_eq!(write_checkpoint(&back.model, meta), text);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = write_checkpoint(&model(true, true), CheckpointMeta { seed: 0, epoch: 0 });
        assert_eq!(read_checkpoint("nope\n").unwrap_err().line, 1);

        let bad: String = text.replacen("classes 3", "classes x", 1);
        assert_eq!(read_checkpoint(&bad).unwrap_err().line, 4);

        let mut lines: Vec<&str> = text.lines().collect();
        lines[12] = "1 2 oops 4";
        let err = read_checkpoint(&lines.join("\n")).unwrap_err();
        assert_eq!(err.line, 13);
        assert!(err.message.contains("expected 4 values") || err.message.contains("invalid value"));

        let truncated: String = text.lines().take(14).collect::<Vec<_>>().join("\n");
        assert_eq!(read_checkpoint(&truncated).unwrap_err().line, 15);

        let renamed = text.replacen("array base.block0.weight", "array base.block0.bogus", 1);
        assert_eq!(read_checkpoint(&renamed).unwrap_err().line, 12);

        let trailing = format!("{text}junk\n");
        assert!(read_checkpoint(&trailing).is_err());
    }
}
