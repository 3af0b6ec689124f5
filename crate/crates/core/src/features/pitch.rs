use rayon::prelude::*;

use super::mfcc::framing;
use super::{FeatureMatrix, DEFAULT_FRAME_LENGTH_S, DEFAULT_FRAME_SHIFT_S};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::session_io::AudioTrack;

pub const POV: &str = "pov";
pub const LOGF0: &str = "logf0";
pub const DLOGF0: &str = "dlogf0";

#[derive(Debug, Clone, PartialEq)]
pub struct PitchConfig {
    pub min_f0_hz: f64,
    pub max_f0_hz: f64,
    pub frame_length_s: f64,
    pub frame_shift_s: f64,
    /// Frames whose correlation peak reaches this are voiced.
    pub voicing_threshold: f64,
    /// Local cost per unit of lag relative to the maximum lag; favors the
    /// shortest period among near-equal peaks.
    pub lag_penalty: f64,
    /// Transition cost per unit of |log lag ratio| between frames.
    pub transition_weight: f64,
    pub max_candidates: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            min_f0_hz: 60.0,
            max_f0_hz: 400.0,
            frame_length_s: DEFAULT_FRAME_LENGTH_S,
            frame_shift_s: DEFAULT_FRAME_SHIFT_S,
            voicing_threshold: 0.5,
            lag_penalty: 0.1,
            transition_weight: 0.5,
            max_candidates: 6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    lag: f64,
    nccf: f64,
}

/// Normalized cross-correlation between the frame and its lagged copy.
fn nccf(x: &[f64], sq_prefix: &[f64], start: usize, len: usize, lag: usize) -> f64 {
    let a = &x[start..start + len];
    let b = &x[start + lag..start + lag + len];
    let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let e0 = sq_prefix[start + len] - sq_prefix[start];
    let e1 = sq_prefix[start + lag + len] - sq_prefix[start + lag];
    let den = (e0 * e1).sqrt();
    if den <= 1e-20 {
        0.0
    } else {
        num / den
    }
}

fn frame_candidates(corr: &[f64], min_lag: usize, max_candidates: usize) -> Vec<Candidate> {
    // corr[i] holds lag min_lag - 1 + i
    let mut peaks: Vec<Candidate> = Vec::new();
    for i in 1..corr.len() - 1 {
        let (a, b, c) = (corr[i - 1], corr[i], corr[i + 1]);
        if b >= a && b > c {
            let denom = a - 2.0 * b + c;
            let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            peaks.push(Candidate {
                lag: (min_lag - 1 + i) as f64 + delta,
                nccf: b - 0.25 * (a - c) * delta,
            });
        }
    }
    if peaks.is_empty() {
        let i = (1..corr.len() - 1)
            .max_by(|&p, &q| corr[p].total_cmp(&corr[q]))
            .unwrap_or(1);
        peaks.push(Candidate {
            lag: (min_lag - 1 + i) as f64,
            nccf: corr[i],
        });
    }
    peaks.sort_by(|p, q| q.nccf.total_cmp(&p.nccf));
    peaks.truncate(max_candidates.max(1));
    peaks
}

/// Columns `pov`, `logf0`, `dlogf0` on the MFCC clock. Unvoiced frames carry
/// log-f0 interpolated between the nearest voiced neighbors.
pub fn compute_pitch(audio: &AudioTrack, config: &PitchConfig) -> Result<FeatureMatrix> {
    if !(0.0 < config.min_f0_hz && config.min_f0_hz < config.max_f0_hz) {
        return Err(Error::Range(format!(
            "pitch range {}..{} Hz invalid",
            config.min_f0_hz, config.max_f0_hz
        )));
    }
    let sr = audio.sample_rate as f64;
    let fr = framing(
        audio.samples.len(),
        audio.sample_rate,
        config.frame_length_s,
        config.frame_shift_s,
    )?;
    let min_lag = ((sr / config.max_f0_hz).floor() as usize).max(2);
    let max_lag = (sr / config.min_f0_hz).ceil() as usize;
    let mut x = audio.samples.clone();
    x.resize(audio.samples.len() + max_lag + 2, 0.0);
    let mut sq_prefix = Vec::with_capacity(x.len() + 1);
    sq_prefix.push(0.0);
    for v in &x {
        sq_prefix.push(sq_prefix.last().unwrap() + v * v);
    }

    let candidates: Vec<Vec<Candidate>> = (0..fr.count)
        .into_par_iter()
        .map(|t| {
            let start = t * fr.shift;
            let corr: Vec<f64> = (min_lag - 1..=max_lag + 1)
                .map(|lag| nccf(&x, &sq_prefix, start, fr.length, lag))
                .collect();
            frame_candidates(&corr, min_lag, config.max_candidates)
        })
        .collect();

    let local = |c: &Candidate| 1.0 - c.nccf + config.lag_penalty * c.lag / max_lag as f64;
    let mut cost: Vec<f64> = candidates[0].iter().map(local).collect();
    let mut back: Vec<Vec<usize>> = vec![vec![0; candidates[0].len()]];
    for t in 1..fr.count {
        let prev = &candidates[t - 1];
        let mut next_cost = Vec::with_capacity(candidates[t].len());
        let mut ptr = Vec::with_capacity(candidates[t].len());
        for c in &candidates[t] {
            let (best, arg) = prev
                .iter()
                .enumerate()
                .map(|(i, p)| (cost[i] + config.transition_weight * (c.lag / p.lag).ln().abs(), i))
                .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc });
            next_cost.push(best + local(c));
            ptr.push(arg);
        }
        cost = next_cost;
        back.push(ptr);
    }
    let mut path = vec![0usize; fr.count];
    path[fr.count - 1] = (0..cost.len())
        .min_by(|&a, &b| cost[a].total_cmp(&cost[b]))
        .unwrap_or(0);
    for t in (1..fr.count).rev() {
        path[t - 1] = back[t][path[t]];
    }

    let chosen: Vec<Candidate> = path.iter().enumerate().map(|(t, &k)| candidates[t][k]).collect();
    let pov: Vec<f64> = chosen.iter().map(|c| c.nccf.clamp(0.0, 1.0)).collect();
    let voiced: Vec<Option<f64>> = chosen
        .iter()
        .zip(&pov)
        .map(|(c, &p)| (p >= config.voicing_threshold).then(|| (sr / c.lag).ln()))
        .collect();
    let logf0 = interpolate_gaps(&voiced, (config.min_f0_hz * config.max_f0_hz).sqrt().ln());
    let n = logf0.len();
    let dlogf0: Vec<f64> = (0..n)
        .map(|t| (logf0[(t + 1).min(n - 1)] - logf0[t.saturating_sub(1)]) / 2.0)
        .collect();

    let mut m = Matrix::zeros(n, 3);
    for t in 0..n {
        m.row_mut(t).copy_from_slice(&[pov[t], logf0[t], dlogf0[t]]);
    }
    FeatureMatrix::new(
        m,
        config.frame_shift_s,
        config.frame_length_s,
        vec![POV.into(), LOGF0.into(), DLOGF0.into()],
    )
}

/// Linear interpolation across `None` runs; edges copy the nearest value and
/// an all-`None` input becomes `fallback`.
fn interpolate_gaps(values: &[Option<f64>], fallback: f64) -> Vec<f64> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    if known.is_empty() {
        return vec![fallback; values.len()];
    }
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < known.len() && known[k + 1].0 <= i {
            k += 1;
        }
        let (i0, v0) = known[k];
        *o = if i <= i0 || k + 1 == known.len() {
            v0
        } else {
            let (i1, v1) = known[k + 1];
            v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
        };
    }
    out
}
