//! Estimated tongue activity: mean over echo-return positions of the temporal
//! variance within a sliding window of ultrasound frames.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::session_io::{Segment, SegmentLabeling, UltrasoundSequence};

pub const DEFAULT_WINDOW_S: f64 = 0.16;
pub const DEFAULT_HOP_FRAMES: usize = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub const ACTIVE: &str = "active";
pub const INACTIVE: &str = "inactive";

#[derive(Debug, Clone, PartialEq)]
pub struct EtaSignal {
    pub values: Vec<f64>,
    pub window_s: f64,
    /// Window length in ultrasound frames.
    pub window_frames: usize,
    pub hop_frames: usize,
    pub fps: f64,
    /// Time of the first window's center.
    pub start_offset_s: f64,
    pub normalized: bool,
}

impl EtaSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Seconds between consecutive window centers.
    pub fn hop_s(&self) -> f64 {
        self.hop_frames as f64 / self.fps
    }

    pub fn center_time(&self, k: usize) -> f64 {
        self.start_offset_s + k as f64 * self.hop_frames as f64 / self.fps
    }

    /// `t_center_s,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_center_s,value\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{:.6},{v:.9}", self.center_time(k));
        }
        out
    }
}

/// Window length in frames for a window of `window_s` seconds.
pub fn window_frames(window_s: f64, fps: f64) -> usize {
    (window_s * fps).round().max(0.0) as usize
}

pub fn compute_eta(seq: &UltrasoundSequence, window_s: f64, hop_frames: usize) -> Result<EtaSignal> {
    let fps = seq.fps();
    let w = window_frames(window_s, fps);
    if w < 2 {
        return Err(Error::Range(format!(
            "window of {window_s}s at {fps} fps spans {w} frame(s); need at least 2"
        )));
    }
    if hop_frames == 0 {
        return Err(Error::Range("hop_frames must be at least 1".into()));
    }
    let t = seq.num_frames();
    if t < w {
        return Err(Error::InsufficientData(format!(
            "{t} ultrasound frames, window needs {w}"
        )));
    }
    let values = windowed_mean_variance(|f| seq.frame(f), t, seq.geometry().pixels(), w, hop_frames);
    Ok(EtaSignal {
        values,
        window_s,
        window_frames: w,
        hop_frames,
        fps,
        start_offset_s: seq.sync_offset_s() + (w - 1) as f64 / (2.0 * fps),
        normalized: false,
    })
}

/// Raw ETA values for `num_frames` frames of `pixels` values each, with a
/// window of `w` frames stepped by `hop`. Values are not range-checked.
pub fn windowed_mean_variance<'a, T, F>(frame: F, num_frames: usize, pixels: usize, w: usize, hop: usize) -> Vec<f64>
where
    T: Copy + Into<f64> + Sync + 'a,
    F: Fn(usize) -> &'a [T] + Sync,
{
    if w == 0 || hop == 0 || num_frames < w {
        return Vec::new();
    }
    let n = (num_frames - w) / hop + 1;
    (0..n)
        .into_par_iter()
        .map(|k| window_mean_variance(&frame, pixels, k * hop, w))
        .collect()
}

/// Two-pass population variance per pixel over frames `[first, first + w)`,
/// averaged over pixels.
fn window_mean_variance<'a, T, F>(frame: &F, px: usize, first: usize, w: usize) -> f64
where
    T: Copy + Into<f64> + 'a,
    F: Fn(usize) -> &'a [T],
{
    let mut mean = vec![0.0f64; px];
    for f in first..first + w {
        for (m, &v) in mean.iter_mut().zip(frame(f)) {
            *m += v.into();
        }
    }
    let inv_w = 1.0 / w as f64;
    mean.iter_mut().for_each(|m| *m *= inv_w);
    let mut ss = vec![0.0f64; px];
    for f in first..first + w {
        for ((s, &m), &v) in ss.iter_mut().zip(&mean).zip(frame(f)) {
            let d = v.into() - m;
            *s += d * d;
        }
    }
    ss.iter().sum::<f64>() * inv_w / px as f64
}

/// Per-utterance min-max scaling to `[0, 1]`; constant signals map to zeros.
pub fn normalize_unity(sig: &EtaSignal) -> Result<EtaSignal> {
    if sig.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let min = sig.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = sig.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 {
        sig.values.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; sig.values.len()]
    };
    Ok(EtaSignal {
        values,
        normalized: true,
        ..sig.clone()
    })
}

/// Thresholds a normalized signal into `active`/`inactive` runs. Each window
/// covers half a hop either side of its center.
pub fn eta_activity(sig: &EtaSignal, threshold: f64) -> Result<SegmentLabeling> {
    if !sig.normalized {
        return Err(Error::Validation("eta_activity needs a normalized signal".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Range(format!("threshold {threshold} outside [0, 1]")));
    }
    let half = sig.hop_s() / 2.0;
    let mut segments: Vec<Segment> = Vec::new();
    for (k, &v) in sig.values.iter().enumerate() {
        let label = if v >= threshold { ACTIVE } else { INACTIVE };
        let c = sig.center_time(k);
        match segments.last_mut() {
            Some(last) if last.label == label => last.end_s = c + half,
            _ => segments.push(Segment::new((c - half).max(0.0), c + half, label)),
        }
    }
    SegmentLabeling::new(segments)
}

/// Resamples to an acoustic clock whose frame `j` is centered at
/// `(j + 0.5) * frame_shift_s`, by nearest window center (ties go to the
/// earlier window); times outside the signal clamp to its edges.
pub fn eta_frame_feature(sig: &EtaSignal, frame_shift_s: f64, num_frames: usize) -> Result<Vec<f64>> {
    if num_frames == 0 {
        return Err(Error::EmptyRequest("eta_frame_feature asked for 0 frames".into()));
    }
    if sig.values.is_empty() {
        return Err(Error::InsufficientData("empty ETA signal".into()));
    }
    if !(frame_shift_s > 0.0) {
        return Err(Error::Range(format!("frame shift {frame_shift_s} must be positive")));
    }
    let n = sig.values.len();
    let step = sig.hop_s();
    Ok((0..num_frames)
        .map(|j| {
            let t = (j as f64 + 0.5) * frame_shift_s;
            let guess = ((t - sig.start_offset_s) / step).round();
            let guess = if guess <= 0.0 { 0 } else { (guess as usize).min(n - 1) };
            let lo = guess.saturating_sub(1);
            let hi = (guess + 1).min(n - 1);
            let mut best = lo;
            let mut best_d = (t - sig.center_time(lo)).abs();
            for k in lo + 1..=hi {
                let d = (t - sig.center_time(k)).abs();
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            sig.values[best]
        })
        .collect())
}
