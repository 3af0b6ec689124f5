use std::path::Path;

use rayon::prelude::*;

use super::{CnnParams, EMBEDDING_DIM, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::features::{load_matrix, numbered_labels, save_matrix, FeatureMatrix};
use crate::matrix::Matrix;
use crate::session_io::{nearest_frame, UltrasoundSequence};

/// Neighbors on each side of the center frame in an input stack.
pub const CONTEXT_FRAMES: usize = 3;

/// Per-frame embeddings on the ultrasound clock.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    data: Matrix,
    pub fps: f64,
    pub sync_offset_s: f64,
}

impl EmbeddingSequence {
    pub fn new(data: Matrix, fps: f64, sync_offset_s: f64) -> Result<Self> {
        if data.cols() != EMBEDDING_DIM {
            return Err(Error::dim("embedding width", EMBEDDING_DIM, data.cols()));
        }
        if !data.is_finite() {
            return Err(Error::Validation("embedding contains non-finite values".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::Range(format!("fps {fps} must be positive")));
        }
        Ok(Self {
            data,
            fps,
            sync_offset_s,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Index of the frame nearest to time `t_s`, clamped to the sequence.
    pub fn frame_at(&self, t_s: f64) -> usize {
        nearest_frame(t_s, self.sync_offset_s, self.fps, self.num_frames())
    }

    /// Binary matrix export: frame shift `1/fps`, start time the sync offset.
    pub fn save(&self, path: &Path) -> Result<()> {
        let m = FeatureMatrix::new(self.data.clone(), 1.0 / self.fps, 1.0 / self.fps, numbered_labels("emb", EMBEDDING_DIM))?;
        save_matrix(&m, self.sync_offset_s, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, start) = load_matrix(path)?;
        Self::new(m.data().clone(), 1.0 / m.frame_shift_s, start)
    }
}

/// Element-wise mean over all frames of all sequences.
pub fn speaker_mean(sequences: &[&UltrasoundSequence]) -> Result<Vec<f64>> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::EmptyRequest("speaker mean needs at least one sequence".into()))?;
    let g = first.geometry();
    let mut sum = vec![0.0f64; g.pixels()];
    let mut n = 0usize;
    for s in sequences {
        if s.geometry() != g {
            return Err(Error::dim("speaker mean frame pixels", g.pixels(), s.geometry().pixels()));
        }
        for t in 0..s.num_frames() {
            for (a, &v) in sum.iter_mut().zip(s.frame(t)) {
                *a += f64::from(v);
            }
            n += 1;
        }
    }
    Ok(sum.into_iter().map(|v| v / n as f64).collect())
}

/// Channels `[t-3, ..., t+3, mean]`, neighbors clamped to the sequence.
pub fn build_input_stack(seq: &UltrasoundSequence, t: usize, mean_frame: &[f64]) -> Result<Vec<f64>> {
    let n = seq.num_frames();
    if t >= n {
        return Err(Error::Range(format!("frame {t} outside 0..{n}")));
    }
    let px = seq.geometry().pixels();
    if mean_frame.len() != px {
        return Err(Error::dim("mean frame pixels", px, mean_frame.len()));
    }
    let mut out = Vec::with_capacity(INPUT_CHANNELS * px);
    for d in 0..=2 * CONTEXT_FRAMES {
        let idx = (t + d).saturating_sub(CONTEXT_FRAMES).min(n - 1);
        out.extend(seq.frame(idx).iter().map(|&v| f64::from(v)));
    }
    out.extend_from_slice(mean_frame);
    Ok(out)
}

pub fn extract_embeddings(params: &CnnParams, seq: &UltrasoundSequence, mean_frame: &[f64]) -> Result<EmbeddingSequence> {
    let c = params.config();
    let g = seq.geometry();
    if (g.scanlines, g.echoes) != (c.height, c.width) {
        return Err(Error::dim("embedder input frame pixels", c.height * c.width, g.pixels()));
    }
    let rows: Vec<Vec<f64>> = (0..seq.num_frames())
        .into_par_iter()
        .map(|t| Ok(params.forward(&build_input_stack(seq, t, mean_frame)?)?.1))
        .collect::<Result<_>>()?;
    EmbeddingSequence::new(Matrix::from_rows(&rows)?, seq.fps(), seq.sync_offset_s())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::CnnConfig;
    use crate::session_io::FrameGeometry;

    fn seq(frames: Vec<Vec<f32>>, g: FrameGeometry) -> UltrasoundSequence {
        UltrasoundSequence::from_frames(g, &frames, 100.0, 0.0).unwrap()
    }

    #[test]
    fn mean_of_two_frames() {
        let g = FrameGeometry::new(1, 3);
        let s = seq(vec![vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]], g);
        assert_eq!(speaker_mean(&[&s]).unwrap(), vec![0.5, 0.5, 0.5]);
        let other = seq(vec![vec![0.0; 4]], FrameGeometry::new(2, 2));
        assert!(speaker_mean(&[&s, &other]).is_err());
    }

    #[test]
    fn mean_matches_direct_accumulation() {
        let g = FrameGeometry::new(2, 3);
        let a: Vec<Vec<f32>> = (0..5).map(|t| (0..6).map(|p| ((t * 7 + p * 3) % 10) as f32 / 10.0).collect()).collect();
        let b: Vec<Vec<f32>> = (0..2).map(|t| (0..6).map(|p| ((t + p) % 4) as f32 / 4.0).collect()).collect();
        let (sa, sb) = (seq(a.clone(), g), seq(b.clone(), g));
        let m = speaker_mean(&[&sa, &sb]).unwrap();
        for p in 0..6 {
            let direct: f64 = a.iter().chain(&b).map(|f| f[p] as f64).sum::<f64>() / 7.0;
            assert!((m[p] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_order_and_edges() {
        let g = FrameGeometry::new(1, 1);
        let s = seq((0..10).map(|t| vec![t as f32 / 10.0]).collect(), g);
        let mean = [0.99];
        let interior = build_input_stack(&s, 5, &mean).unwrap();
        let expect: Vec<f64> = (2..=8).map(|t| f64::from(t as f32 / 10.0)).chain([0.99]).collect();
        assert_eq!(interior, expect);
        let edge = build_input_stack(&s, 0, &mean).unwrap();
        assert_eq!(&edge[..4], &[0.0; 4]);
        assert!(build_input_stack(&s, 10, &mean).is_err());
    }

    #[test]
    fn constant_sequence_embeddings() {
        let c = CnnConfig::small();
        let g = FrameGeometry::new(c.height, c.width);
        let frame: Vec<f32> = (0..g.pixels()).map(|p| (p % 13) as f32 / 13.0).collect();
        let s = seq(vec![frame.clone(); 6], g);
        let mean = speaker_mean(&[&s]).unwrap();
        let stack = build_input_stack(&s, 2, &mean).unwrap();
        for ch in 0..7 {
            assert_eq!(stack[ch * g.pixels()..(ch + 1) * g.pixels()], stack[..g.pixels()]);
        }
        let p = CnnParams::init(&c).unwrap();
        let e = extract_embeddings(&p, &s, &mean).unwrap();
        assert_eq!(e.num_frames(), 6);
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(2), e.row(5));
    }

    #[test]
    fn embedding_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let data = Matrix::from_vec(3, 8, (0..24).map(|i| i as f64 * 0.5).collect()).unwrap();
        let e = EmbeddingSequence::new(data, 121.2, 0.1).unwrap();
        e.save(&path).unwrap();
        let back = EmbeddingSequence::load(&path).unwrap();
        assert_eq!(back.data(), e.data());
        assert!((back.fps - 121.2).abs() < 1e-9);
        assert_eq!(back.sync_offset_s, 0.1);
    }
}
