//! Frame-synchronous acoustic features and multimodal feature matrices.

mod io;
mod mfcc;
mod pitch;

pub use io::{load_matrix, load_matrix_csv, matrix_to_csv, parse_matrix_csv, save_matrix, save_matrix_csv};
pub use mfcc::{compute_mfcc, frame_log_energy, MelFilterbank, MfccConfig};
pub use pitch::{compute_pitch, PitchConfig, DLOGF0, LOGF0, POV};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_FRAME_SHIFT_S: f64 = 0.010;
pub const DEFAULT_FRAME_LENGTH_S: f64 = 0.025;

/// Column holding per-frame log energy in assembled matrices.
pub const LOG_ENERGY: &str = "log_energy";

/// Floor added inside the log of frame energies.
pub const ENERGY_FLOOR: f64 = 1e-10;

const CLOCK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Matrix,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
    column_labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(data: Matrix, frame_shift_s: f64, frame_length_s: f64, column_labels: Vec<String>) -> Result<Self> {
        if data.cols() != column_labels.len() {
            return Err(Error::dim("feature column labels", data.cols(), column_labels.len()));
        }
        if data.rows() == 0 {
            return Err(Error::InsufficientData("feature matrix has no rows".into()));
        }
        if !data.is_finite() {
            return Err(Error::Validation("feature matrix contains non-finite values".into()));
        }
        if !(frame_shift_s > 0.0) {
            return Err(Error::Range(format!("frame shift {frame_shift_s} must be positive")));
        }
        Ok(Self {
            data,
            frame_shift_s,
            frame_length_s,
            column_labels,
        })
    }

    /// One-column matrix on the default 10 ms / 25 ms clock.
    pub fn from_column(label: &str, values: &[f64], frame_shift_s: f64) -> Result<Self> {
        Self::new(
            Matrix::from_vec(values.len(), 1, values.to_vec())?,
            frame_shift_s,
            DEFAULT_FRAME_LENGTH_S,
            vec![label.to_string()],
        )
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn num_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.column_labels.iter().position(|l| l == label)
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        self.column_index(label).map(|c| self.data.column(c))
    }

    /// Columns whose labels are listed, in the given order.
    pub fn select_columns(&self, labels: &[&str]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.column_index(l)
                    .ok_or_else(|| Error::Validation(format!("feature column `{l}` not present")))
            })
            .collect::<Result<_>>()?;
        let mut m = Matrix::zeros(self.num_frames(), idx.len());
        for t in 0..self.num_frames() {
            let src = self.row(t);
            for (j, &c) in idx.iter().enumerate() {
                m.set(t, j, src[c]);
            }
        }
        FeatureMatrix::new(
            m,
            self.frame_shift_s,
            self.frame_length_s,
            labels.iter().map(|s| s.to_string()).collect(),
        )
    }

    /// Rows at `indices`, same clock and labels. Fails on an empty selection.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        FeatureMatrix::new(
            self.data.select_rows(indices),
            self.frame_shift_s,
            self.frame_length_s,
            self.column_labels.clone(),
        )
    }

    /// Center time of frame `j`.
    pub fn frame_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.frame_shift_s
    }
}

/// Column-wise concatenation after truncating every part to the shortest.
pub fn assemble_features(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyRequest("assemble_features needs at least one part".into()))?;
    let name = |i: usize| {
        format!(
            "part {i} ({})",
            parts[i].column_labels.first().map_or("", String::as_str)
        )
    };
    for (i, p) in parts.iter().enumerate().skip(1) {
        if (p.frame_shift_s - first.frame_shift_s).abs() > CLOCK_EPS {
            return Err(Error::Alignment(format!(
                "{} has frame shift {} but {} has {}",
                name(0),
                first.frame_shift_s,
                name(i),
                p.frame_shift_s
            )));
        }
    }
    let min = parts.iter().map(|p| p.num_frames()).min().unwrap_or(0);
    let max = parts.iter().map(|p| p.num_frames()).max().unwrap_or(0);
    if max - min > 2 {
        return Err(Error::Synchronization(format!(
            "part lengths range from {min} to {max} frames (more than 2 apart)"
        )));
    }
    let mut labels: Vec<String> = Vec::new();
    for p in parts {
        for l in &p.column_labels {
            if labels.contains(l) {
                return Err(Error::Validation(format!("duplicate feature column `{l}`")));
            }
            labels.push(l.clone());
        }
    }
    let dim = labels.len();
    let mut m = Matrix::zeros(min, dim);
    for t in 0..min {
        let row = m.row_mut(t);
        let mut c = 0;
        for p in parts {
            let src = p.row(t);
            row[c..c + src.len()].copy_from_slice(src);
            c += src.len();
        }
    }
    FeatureMatrix::new(m, first.frame_shift_s, first.frame_length_s, labels)
}

/// `prefix_0 .. prefix_{n-1}`.
pub fn numbered_labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}
