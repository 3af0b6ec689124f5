use std::fmt::Write as _;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{FeatureMatrix, DEFAULT_FRAME_LENGTH_S, DEFAULT_FRAME_SHIFT_S};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 4] = b"TTFM";
const VERSION: u32 = 1;
const MAX_DIM: usize = 1 << 28;

/// CSV with a `# frame_shift_s=..,frame_length_s=..` line, a header of
/// column labels, then one row per frame.
pub fn matrix_to_csv(m: &FeatureMatrix) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# frame_shift_s={},frame_length_s={}",
        m.frame_shift_s, m.frame_length_s
    );
    s.push_str(&m.column_labels().join(","));
    s.push('\n');
    for t in 0..m.num_frames() {
        let row: Vec<String> = m.row(t).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn save_matrix_csv(m: &FeatureMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_matrix_csv(text: &str) -> Result<FeatureMatrix> {
    let mut shift = DEFAULT_FRAME_SHIFT_S;
    let mut length = DEFAULT_FRAME_LENGTH_S;
    let mut labels: Option<Vec<String>> = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split(',') {
                let Some((k, v)) = kv.trim().split_once('=') else { continue };
                let parsed: f64 = v.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad value for {k}"),
                })?;
                match k {
                    "frame_shift_s" => shift = parsed,
                    "frame_length_s" => length = parsed,
                    _ => {}
                }
            }
            continue;
        }
        match &labels {
            None => labels = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
            Some(l) => {
                let vals: Vec<f64> = line
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                if vals.len() != l.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("{} values for {} columns", vals.len(), l.len()),
                    });
                }
                data.extend(vals);
                rows += 1;
            }
        }
    }
    let labels = labels.ok_or_else(|| Error::format("csv", "missing header"))?;
    FeatureMatrix::new(Matrix::from_vec(rows, labels.len(), data)?, shift, length, labels)
}

pub fn load_matrix_csv(path: &Path) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}

/// Binary container: magic, version, rows, cols, frame shift, frame length,
/// start time, labels, then row-major f32.
pub fn save_matrix(m: &FeatureMatrix, start_s: f64, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer::new(BufWriter::new(file));
    let io = |e| Error::io(path, e);
    w.bytes(MAGIC).map_err(io)?;
    w.u32(VERSION).map_err(io)?;
    w.u64(m.num_frames() as u64).map_err(io)?;
    w.u64(m.dim() as u64).map_err(io)?;
    w.f64(m.frame_shift_s).map_err(io)?;
    w.f64(m.frame_length_s).map_err(io)?;
    w.f64(start_s).map_err(io)?;
    for l in m.column_labels() {
        w.str(l).map_err(io)?;
    }
    for v in m.data().as_slice() {
        w.f32(*v as f32).map_err(io)?;
    }
    use std::io::Write;
    w.into_inner().flush().map_err(io)
}

/// Returns the matrix and its start time.
pub fn load_matrix(path: &Path) -> Result<(FeatureMatrix, f64)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), "feature_matrix");
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("feature_matrix.version", format!("unsupported version {version}")));
    }
    let rows = r.count("rows", MAX_DIM)?;
    let cols = r.count("cols", 1 << 16)?;
    if rows.saturating_mul(cols) > MAX_DIM {
        return Err(Error::format("feature_matrix.rows", "matrix too large"));
    }
    let shift = r.f64("frame_shift_s")?;
    let length = r.f64("frame_length_s")?;
    let start = r.f64("start_s")?;
    let labels = (0..cols).map(|_| r.str("label")).collect::<Result<Vec<_>>>()?;
    let data = (0..rows * cols)
        .map(|_| r.f32("data").map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    Ok((FeatureMatrix::new(Matrix::from_vec(rows, cols, data)?, shift, length, labels)?, start))
}
