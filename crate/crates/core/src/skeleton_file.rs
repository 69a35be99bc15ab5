//! Reader for NTU RGB+D style `.skeleton` text files.
//!
//! Layout: a frame-count line, then per frame a body-count line and, per
//! body, an info line (only its first token, the body id, is used), a
//! joint-count line and one line per joint whose first three fields are
//! `x y z`. Blank lines are ignored. Each distinct body id becomes one
//! [`MotionSequence`].

use ndarray::Array3;

use crate::error::LocatedError;
use crate::skeleton::MotionSequence;

/// What to do with frames in which a tracked body does not appear.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MissingBody {
    #[default]
    Drop,
    ZeroFill,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub missing: MissingBody,
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    fn skip_blank(&mut self) {
        while let Some((i, line)) = self.inner.peek() {
            if !line.trim().is_empty() {
                break;
            }
            self.last_line = i + 1;
            self.inner.next();
        }
    }

    fn next(&mut self, expected: &str) -> Result<(usize, &'a str), LocatedError> {
        self.skip_blank();
        match self.inner.next() {
            Some((i, line)) => {
                self.last_line = i + 1;
                Ok((i + 1, line))
            }
            None => Err(LocatedError::new(
                self.last_line + 1,
                format!("unexpected end of input, expected {expected}"),
            )),
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_blank();
        self.inner.peek().is_none()
    }

    fn count(&mut self, what: &str) -> Result<(usize, usize), LocatedError> {
        let (line_no, line) = self.next(what)?;
        let mut tokens = line.split_whitespace();
        let token = tokens.next().unwrap_or_default();
        match (token.parse::<usize>(), tokens.next()) {
            (Ok(v), None) => Ok((line_no, v)),
            _ => Err(LocatedError::new(
                line_no,
                format!("malformed {what}: '{}'", line.trim()),
            )),
        }
    }
}

struct Track {
    id: String,
    num_joints: usize,
    frames: Vec<Option<Vec<[f64; 3]>>>,
}

/// Parses raw bytes; invalid UTF-8 is reported at the offending line.
pub fn parse_skeleton_bytes(
    bytes: &[u8],
    options: ParseOptions,
) -> Result<Vec<MotionSequence>, LocatedError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_skeleton_file(text, options),
        Err(e) => {
            let line = bytes[..e.valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count()
                + 1;
            Err(LocatedError::new(line, "invalid UTF-8"))
        }
    }
}

pub fn parse_skeleton_file(
    text: &str,
    options: ParseOptions,
) -> Result<Vec<MotionSequence>, LocatedError> {
    let mut lines = Lines::new(text);
    if lines.at_end() {
        return Ok(Vec::new());
    }
    let (_, frame_count) = lines.count("frame count")?;
    let mut tracks: Vec<Track> = Vec::new();

    for frame in 0..frame_count {
        let (_, body_count) = lines.count("body count")?;
        let mut seen = Vec::with_capacity(body_count);
        for _ in 0..body_count {
            let (info_no, info) = lines.next("body info line")?;
            let id = info
                .split_whitespace()
                .next()
                .ok_or_else(|| LocatedError::new(info_no, "empty body info line"))?
                .to_string();
            if seen.contains(&id) {
                return Err(LocatedError::new(
                    info_no,
                    format!("body {id} appears twice in frame {frame}"),
                ));
            }
            let (count_no, joint_count) = lines.count("joint count")?;
            if joint_count == 0 {
                return Err(LocatedError::new(count_no, "joint count must be positive"));
            }
            let track_index = match tracks.iter().position(|t| t.id == id) {
                Some(k) => {
                    if tracks[k].num_joints != joint_count {
                        return Err(LocatedError::new(
                            count_no,
                            format!(
                                "joint count mismatch for body {id}: {joint_count} vs {}",
                                tracks[k].num_joints
                            ),
                        ));
                    }
                    k
                }
                None => {
                    tracks.push(Track {
                        id: id.clone(),
                        num_joints: joint_count,
                        frames: vec![None; frame_count],
                    });
                    tracks.len() - 1
                }
            };
            let mut joints = Vec::with_capacity(joint_count);
            for _ in 0..joint_count {
                let (joint_no, line) = lines.next("joint line")?;
                joints.push(parse_joint(joint_no, line)?);
            }
            tracks[track_index].frames[frame] = Some(joints);
            seen.push(id);
        }
    }
    if !lines.at_end() {
        let (line_no, _) = lines.next("trailing content")?;
        return Err(LocatedError::new(
            line_no,
            format!("trailing content after {frame_count} frames"),
        ));
    }

    Ok(tracks
        .into_iter()
        .filter_map(|track| assemble(track, options.missing))
        .collect())
}

fn parse_joint(line_no: usize, line: &str) -> Result<[f64; 3], LocatedError> {
    let mut xyz = [0.0; 3];
    let mut tokens = line.split_whitespace();
    for (axis, slot) in xyz.iter_mut().enumerate() {
        let token = tokens.next().ok_or_else(|| {
            LocatedError::new(
                line_no,
                format!("joint line has {axis} fields, expected at least 3"),
            )
        })?;
        let value: f64 = token
            .parse()
            .map_err(|_| LocatedError::new(line_no, format!("non-numeric token '{token}'")))?;
        if !value.is_finite() {
            return Err(LocatedError::new(
                line_no,
                format!("non-finite coordinate '{token}'"),
            ));
        }
        *slot = value;
    }
    Ok(xyz)
}

fn assemble(track: Track, missing: MissingBody) -> Option<MotionSequence> {
    let n = track.num_joints;
    let frames: Vec<Vec<[f64; 3]>> = track
        .frames
        .into_iter()
        .filter_map(|f| match (f, missing) {
            (Some(joints), _) => Some(joints),
            (None, MissingBody::Drop) => None,
            (None, MissingBody::ZeroFill) => Some(vec![[0.0; 3]; n]),
        })
        .collect();
    if frames.is_empty() {
        return None;
    }
    let data = Array3::from_shape_fn((frames.len(), n, 3), |(t, j, c)| frames[t][j][c]);
    MotionSequence::new(data, None).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_FRAME: &str = "1\n1\n72057594037931101 0 1 1 1 1 0 0.1 0.2 2\n2\n\
        0.5 -0.25 3.0 0 0 0 0 0 0 0 0 2\n\
        1.0 2.0 3.5 0 0 0 0 0 0 0 0 2\n";

    #[test]
    fn parses_single_frame() {
        let seqs = parse_skeleton_file(ONE_FRAME, ParseOptions::default()).unwrap();
        assert_eq!(seqs.len(), 1);
        let s = &seqs[0];
        assert_eq!((s.frames(), s.num_joints(), s.channels()), (1, 2, 3));
        assert_eq!(
            s.data().iter().copied().collect::<Vec<_>>(),
            vec![0.5, -0.25, 3.0, 1.0, 2.0, 3.5]
        );
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(parse_skeleton_file("", ParseOptions::default())
            .unwrap()
            .is_empty());
        assert!(parse_skeleton_file("\n\n", ParseOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn errors_are_located() {
        let err = parse_skeleton_file("x\n", ParseOptions::default()).unwrap_err();
        assert_eq!(err.line, 1);
        let bad = ONE_FRAME.replace("1.0 2.0 3.5", "1.0 abc 3.5");
        let err = parse_skeleton_file(&bad, ParseOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "line 6: non-numeric token 'abc'");
        let err = parse_skeleton_file("2\n0\n", ParseOptions::default()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "line 3: unexpected end of input, expected body count"
        );
        let err = parse_skeleton_bytes(b"1\n\xff\n", ParseOptions::default()).unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn missing_bodies_drop_or_fill() {
        let text = "2\n1\nA\n1\n1 2 3\n0\n";
        let dropped = parse_skeleton_file(text, ParseOptions::default()).unwrap();
        assert_eq!(dropped[0].frames(), 1);
        let filled = parse_skeleton_file(
            text,
            ParseOptions {
                missing: MissingBody::ZeroFill,
            },
        )
        .unwrap();
        assert_eq!(filled[0].frames(), 2);
        assert_eq!(filled[0].data()[[1, 0, 2]], 0.0);
    }

    #[test]
    fn joint_count_must_match_per_body() {
        let text = "2\n1\nA\n1\n1 2 3\n1\nA\n2\n1 2 3\n4 5 6\n";
        let err = parse_skeleton_file(text, ParseOptions::default()).unwrap_err();
        assert_eq!(err.line, 8);
    }

    #[test]
    fn two_bodies_give_two_tracks() {
        let text = "1\n2\nA\n1\n1 2 3\nB\n1\n4 5 6\n";
        let seqs = parse_skeleton_file(text, ParseOptions::default()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].data()[[0, 0, 0]], 4.0);
    }

    #[test]
    fn trailing_content_rejected() {
        let err = parse_skeleton_file("0\nextra\n", ParseOptions::default()).unwrap_err();
        assert_eq!(err.line, 2);
    }
}
