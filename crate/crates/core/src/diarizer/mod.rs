//! Speaker diarization: energy VAD, VAD fused with tongue activity, an
//! ergodic HMM-GMM over turn tokens, and label post-processing.

mod hmm;

pub use hmm::{
    decode, semi_supervised_retrain, train_ergodic, train_ergodic_from, transcript_from_labeling, viterbi_path,
    ErgodicHmm, HmmConfig, TrainHistory,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::session_io::{Segment, SegmentLabeling, CHILD, NOISE, SILENCE, SPEECH, THERAPIST};

pub const DEFAULT_VAD_THRESHOLD: f64 = 7.0;
/// Shifts a log-energy of samples in [-1, 1) onto the 16-bit integer scale.
pub const DEFAULT_ENERGY_OFFSET: f64 = 20.794_415_416_798_36;
pub const DEFAULT_MERGE_GAP_S: f64 = 0.1;
pub const DEFAULT_MIN_DURATION_S: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    pub threshold: f64,
    pub offset: f64,
    /// Weight of the utterance mean subtracted from every score.
    pub mean_scale: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_VAD_THRESHOLD,
            offset: DEFAULT_ENERGY_OFFSET,
            mean_scale: 0.0,
        }
    }
}

/// Maps raw frame log-energies to the scale the VAD threshold applies to:
/// `e + offset - mean_scale * mean(e + offset)`.
pub fn vad_scores(log_energy: &[f64], config: &VadConfig) -> Vec<f64> {
    let shifted: Vec<f64> = log_energy.iter().map(|e| e + config.offset).collect();
    if config.mean_scale == 0.0 || shifted.is_empty() {
        return shifted;
    }
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    shifted.iter().map(|s| s - config.mean_scale * mean).collect()
}

/// Frames scoring at least `threshold` are speech; runs become segments.
pub fn vad_segments(scores: &[f64], threshold: f64, frame_shift_s: f64) -> Result<SegmentLabeling> {
    if scores.is_empty() {
        return Err(Error::EmptyRequest("VAD needs at least one frame".into()));
    }
    let labels: Vec<&str> = scores
        .iter()
        .map(|&s| if s >= threshold { SPEECH } else { SILENCE })
        .collect();
    Ok(SegmentLabeling::from_frame_labels(&labels, frame_shift_s))
}

/// VAD-only system: all detected speech is attributed to the child.
pub fn vad_diarize(scores: &[f64], threshold: f64, frame_shift_s: f64) -> Result<SegmentLabeling> {
    Ok(vad_segments(scores, threshold, frame_shift_s)?.relabel(|l| {
        if l == SPEECH { CHILD } else { SILENCE }.to_string()
    }))
}

/// Speech frames at or above the tongue-activity threshold are child speech,
/// the remaining speech frames therapist speech.
pub fn vad_eta_diarize(
    scores: &[f64],
    eta_feature: &[f64],
    vad_threshold: f64,
    eta_threshold: f64,
    frame_shift_s: f64,
) -> Result<SegmentLabeling> {
    if scores.len() != eta_feature.len() {
        return Err(Error::Alignment(format!(
            "{} energy frames but {} activity frames",
            scores.len(),
            eta_feature.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyRequest("VAD needs at least one frame".into()));
    }
    let labels: Vec<&str> = scores
        .iter()
        .zip(eta_feature)
        .map(|(&s, &e)| {
            if s < vad_threshold {
                SILENCE
            } else if e >= eta_threshold {
                CHILD
            } else {
                THERAPIST
            }
        })
        .collect();
    Ok(SegmentLabeling::from_frame_labels(&labels, frame_shift_s))
}

fn is_speech(label: &str) -> bool {
    label != SILENCE && label != NOISE
}

/// Merges same-label speech segments separated only by silence shorter than
/// `merge_gap_s`, then relabels speech shorter than `min_dur_s` as silence.
/// Both rules repeat until neither changes the labeling, so the result is a
/// fixed point.
pub fn postprocess(labeling: &SegmentLabeling, merge_gap_s: f64, min_dur_s: f64) -> SegmentLabeling {
    let mut current = labeling.segments().to_vec();
    loop {
        let next = drop_short(merge_close(&current, merge_gap_s), min_dur_s);
        if next == current {
            break;
        }
        current = next;
    }
    SegmentLabeling::new(current).expect("post-processing preserves ordering")
}

fn merge_close(segments: &[Segment], gap: f64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    let mut i = 0;
    while i < segments.len() {
        let seg = &segments[i];
        if is_speech(&seg.label) {
            if let Some(last_speech) = out.iter().rposition(|s| is_speech(&s.label)) {
                let prev = &out[last_speech];
                let only_silence = out[last_speech + 1..].iter().all(|s| s.label == SILENCE);
                if prev.label == seg.label && only_silence && seg.start_s - prev.end_s < gap - 1e-9 {
                    out.truncate(last_speech + 1);
                    out[last_speech].end_s = seg.end_s;
                    i += 1;
                    continue;
                }
            }
        }
        out.push(seg.clone());
        i += 1;
    }
    out
}

fn drop_short(segments: Vec<Segment>, min_dur: f64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for mut s in segments {
        if is_speech(&s.label) && s.duration() < min_dur - 1e-9 {
            s.label = SILENCE.to_string();
        }
        match out.last_mut() {
            Some(last) if last.label == s.label && (s.start_s - last.end_s).abs() < 1e-9 => last.end_s = s.end_s,
            _ => out.push(s),
        }
    }
    out
}

/// Ordered turn tokens of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnTranscript {
    pub utterance_id: String,
    tokens: Vec<String>,
}

impl TurnTranscript {
    pub fn new(utterance_id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("turn transcript has no tokens".into()));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Validation(format!("invalid turn token `{t}`")));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            tokens,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_line(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn load(path: &Path, utterance_id: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(utterance_id, text.split_whitespace().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_line() + "\n").map_err(|e| Error::io(path, e))
    }
}
