//! `.skeleton` fixtures checked against hand-written golden renderings.

use std::path::PathBuf;

use dephsic::skeleton_file::{parse_skeleton_bytes, ParseOptions};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn render(name: &str) -> String {
    let bytes = std::fs::read(fixture(name)).unwrap();
    match parse_skeleton_bytes(&bytes, ParseOptions::default()) {
        Err(e) => format!("error {e}\n"),
        Ok(seqs) => {
            let s = &seqs[0];
            let mut out = format!(
                "ok sequences={} frames={} joints={} channels={}\n",
                seqs.len(),
                s.frames(),
                s.num_joints(),
                s.channels()
            );
            for t in 0..s.frames() {
                for j in 0..s.num_joints() {
                    let d = s.data();
                    out.push_str(&format!(
                        "{t} {j} {} {} {}\n",
                        d[[t, j, 0]],
                        d[[t, j, 1]],
                        d[[t, j, 2]]
                    ));
                }
            }
            out
        }
    }
}

#[test]
fn fixtures_match_goldens() {
    for stem in ["valid_3frame", "truncated", "non_numeric"] {
        let golden = std::fs::read_to_string(fixture(&format!("{stem}.golden"))).unwrap();
        assert_eq!(render(&format!("{stem}.skeleton")), golden, "{stem}");
    }
}

#[test]
fn crlf_and_trailing_blank_lines_are_tolerated() {
    let text = std::fs::read_to_string(fixture("valid_3frame.skeleton")).unwrap();
    let crlf = text.replace('\n', "\r\n") + "\r\n\r\n";
    let a = parse_skeleton_bytes(text.as_bytes(), ParseOptions::default()).unwrap();
    let b = parse_skeleton_bytes(crlf.as_bytes(), ParseOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_utf8_is_located() {
    let mut bytes = std::fs::read(fixture("valid_3frame.skeleton")).unwrap();
    let pos = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    bytes.insert(pos, 0xff);
    let err = parse_skeleton_bytes(&bytes, ParseOptions::default()).unwrap_err();
    assert_eq!(err.line, 2);
}
