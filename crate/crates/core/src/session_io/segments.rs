use std::fmt::Write as _;
use std::path::Path;

use super::{Segment, SegmentLabeling};
use crate::error::{Error, Result};

/// One `start<TAB>end<TAB>label` line per segment, times with 3 decimals.
pub fn segments_to_string(labeling: &SegmentLabeling) -> String {
    let mut out = String::new();
    for s in labeling.segments() {
        let _ = writeln!(out, "{:.3}\t{:.3}\t{}", s.start_s, s.end_s, s.label);
    }
    out
}

pub fn save_segments(labeling: &SegmentLabeling, path: &Path) -> Result<()> {
    std::fs::write(path, segments_to_string(labeling)).map_err(|e| Error::io(path, e))
}

pub fn parse_segments(text: &str) -> Result<SegmentLabeling> {
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let time = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what} time `{s}`"),
            })
        };
        let start = time(fields[0], "start")?;
        let end = time(fields[1], "end")?;
        let label = fields[2].trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty label".into(),
            });
        }
        segments.push(Segment::new(start, end, label));
    }
    SegmentLabeling::new(segments)
}

pub fn load_segments(path: &Path) -> Result<SegmentLabeling> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_segments(&text)
}
