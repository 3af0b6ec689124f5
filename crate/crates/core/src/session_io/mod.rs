//! Data model for a recorded session (ultrasound, audio, prompt, labels) and
//! the on-disk formats used to exchange it.

mod formats;
mod manifest;
mod segments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use formats::{
    load_audio, load_prompt, load_sidecar, load_ultrasound, save_audio, save_prompt,
    save_ultrasound,
};
pub use manifest::{load_manifest, manifest_to_string, parse_manifest, save_manifest, ManifestEntry, MANIFEST_HEADER};
pub use segments::{load_segments, parse_segments, save_segments, segments_to_string};

use crate::error::{Error, Result};

pub const RAW_SCANLINES: usize = 63;
pub const RAW_ECHOES: usize = 412;
pub const DEFAULT_FPS: f64 = 121.2;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Speaker-level labels used by the diarization systems.
pub const CHILD: &str = "child";
pub const THERAPIST: &str = "therapist";
pub const SILENCE: &str = "silence";
pub const NOISE: &str = "noise";
pub const SPEECH: &str = "speech";

/// Scan-line × echo-return layout of one ultrasound frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub scanlines: usize,
    pub echoes: usize,
}

impl FrameGeometry {
    /// The 63 × 412 raw B-mode layout.
    pub const RAW: FrameGeometry = FrameGeometry {
        scanlines: RAW_SCANLINES,
        echoes: RAW_ECHOES,
    };

    pub fn new(scanlines: usize, echoes: usize) -> Self {
        Self { scanlines, echoes }
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.scanlines * self.echoes
    }
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self::RAW
    }
}

/// Time-ordered stack of echo-intensity frames in `[0, 1]`, stored
/// scan-line-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundSequence {
    geometry: FrameGeometry,
    num_frames: usize,
    frames: Vec<f32>,
    fps: f64,
    sync_offset_s: f64,
}

impl UltrasoundSequence {
    pub fn new(
        geometry: FrameGeometry,
        frames: Vec<f32>,
        fps: f64,
        sync_offset_s: f64,
    ) -> Result<Self> {
        let px = geometry.pixels();
        if px == 0 {
            return Err(Error::Validation("frame geometry must be non-empty".into()));
        }
        if frames.len() % px != 0 {
            return Err(Error::dim(
                "ultrasound frames (values)",
                (frames.len() / px + 1) * px,
                frames.len(),
            ));
        }
        let num_frames = frames.len() / px;
        if num_frames == 0 {
            return Err(Error::InsufficientData("ultrasound has no frames".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Range(format!("fps must be positive, got {fps}")));
        }
        if !(sync_offset_s >= 0.0 && sync_offset_s.is_finite()) {
            return Err(Error::Range(format!(
                "sync_offset_s must be non-negative, got {sync_offset_s}"
            )));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("echo intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            geometry,
            num_frames,
            frames,
            fps,
            sync_offset_s,
        })
    }

    /// Builds a sequence from per-frame pixel vectors.
    pub fn from_frames(
        geometry: FrameGeometry,
        frames: &[Vec<f32>],
        fps: f64,
        sync_offset_s: f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * geometry.pixels());
        for (i, f) in frames.iter().enumerate() {
            if f.len() != geometry.pixels() {
                return Err(Error::dim(format!("ultrasound frame {i}"), geometry.pixels(), f.len()));
            }
            data.extend_from_slice(f);
        }
        Self::new(geometry, data, fps, sync_offset_s)
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn sync_offset_s(&self) -> f64 {
        self.sync_offset_s
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let px = self.geometry.pixels();
        &self.frames[t * px..(t + 1) * px]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    /// Seconds covered by the frames.
    pub fn span_s(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }

    /// Audio time of frame `t`.
    pub fn frame_time(&self, t: usize) -> f64 {
        self.sync_offset_s + t as f64 / self.fps
    }

    /// Index of the ultrasound frame nearest to audio time `t_s`
    /// (round-half-to-even, clamped to the sequence).
    pub fn frame_at(&self, t_s: f64) -> Result<usize> {
        if !(t_s >= 0.0) {
            return Err(Error::Range(format!("time {t_s} is negative")));
        }
        Ok(nearest_frame(t_s, self.sync_offset_s, self.fps, self.num_frames))
    }
}

pub(crate) fn nearest_frame(t_s: f64, sync_offset_s: f64, fps: f64, num_frames: usize) -> usize {
    let pos = ((t_s - sync_offset_s) * fps).round_ties_even();
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(num_frames.saturating_sub(1))
    }
}

/// Free-function form of [`UltrasoundSequence::frame_at`].
pub fn ultrasound_frame_at(seq: &UltrasoundSequence, t_s: f64) -> Result<usize> {
    seq.frame_at(t_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Range("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InsufficientData("audio has no samples".into()));
        }
        if let Some(v) = samples.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("sample {v} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub target_words: Vec<String>,
    pub session_id: String,
    pub speaker_id: String,
    pub session_stage: Option<String>,
}

impl Prompt {
    pub fn new(
        target_words: Vec<String>,
        session_id: impl Into<String>,
        speaker_id: impl Into<String>,
        session_stage: Option<String>,
    ) -> Result<Self> {
        if target_words.is_empty() {
            return Err(Error::Validation("prompt has no target words".into()));
        }
        Ok(Self {
            target_words,
            session_id: session_id.into(),
            speaker_id: speaker_id.into(),
            session_stage,
        })
    }

    /// Target words for which `known` returns false.
    pub fn out_of_vocabulary<'a>(&'a self, known: impl Fn(&str) -> bool) -> Vec<&'a str> {
        self.target_words
            .iter()
            .map(String::as_str)
            .filter(|w| !known(w))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64, label: impl Into<String>) -> Self {
        Self {
            start_s,
            end_s,
            label: label.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Sorted, non-overlapping timed segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentLabeling {
    segments: Vec<Segment>,
}

const OVERLAP_EPS: f64 = 1e-9;

impl SegmentLabeling {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        validate_segments(&segments)?;
        Ok(Self { segments })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<Segment> {
        self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total duration carrying `label`.
    pub fn duration_of(&self, label: &str) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.label == label)
            .map(Segment::duration)
            .sum()
    }

    /// Label active at time `t`, if any.
    pub fn label_at(&self, t: f64) -> Option<&str> {
        let idx = self.segments.partition_point(|s| s.end_s <= t);
        self.segments
            .get(idx)
            .filter(|s| s.start_s <= t)
            .map(|s| s.label.as_str())
    }

    /// Builds a labeling from per-frame labels, merging runs; frame `j`
    /// spans `[j·shift, (j+1)·shift)`.
    pub fn from_frame_labels<S: AsRef<str>>(labels: &[S], frame_shift_s: f64) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (j, l) in labels.iter().enumerate() {
            let l = l.as_ref();
            let end = (j + 1) as f64 * frame_shift_s;
            match segments.last_mut() {
                Some(last) if last.label == l => last.end_s = end,
                _ => segments.push(Segment::new(j as f64 * frame_shift_s, end, l)),
            }
        }
        Self { segments }
    }

    /// Maps each segment's label, then merges adjacent runs with equal labels.
    pub fn relabel(&self, f: impl Fn(&str) -> String) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for s in &self.segments {
            let label = f(&s.label);
            match segments.last_mut() {
                Some(last) if last.label == label && (s.start_s - last.end_s).abs() < OVERLAP_EPS => {
                    last.end_s = s.end_s
                }
                _ => segments.push(Segment::new(s.start_s, s.end_s, label)),
            }
        }
        Self { segments }
    }
}

fn validate_segments(segments: &[Segment]) -> Result<()> {
    for s in segments {
        if !(s.start_s < s.end_s) || !s.start_s.is_finite() || !s.end_s.is_finite() {
            return Err(Error::Validation(format!(
                "segment [{}, {}] `{}` must have start < end",
                s.start_s, s.end_s, s.label
            )));
        }
        if s.label.is_empty() || s.label.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid segment label `{}`", s.label)));
        }
    }
    for w in segments.windows(2) {
        if w[1].start_s < w[0].start_s {
            return Err(Error::Validation(format!(
                "segments not sorted: {:.3} after {:.3}",
                w[1].start_s, w[0].start_s
            )));
        }
        if w[0].end_s > w[1].start_s + OVERLAP_EPS {
            return Err(Error::Validation(format!(
                "overlapping segments ({:.3}, {:.3}, {}) and ({:.3}, {:.3}, {})",
                w[0].start_s, w[0].end_s, w[0].label, w[1].start_s, w[1].end_s, w[1].label
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub ultrasound: UltrasoundSequence,
    pub audio: AudioTrack,
    pub prompt: Prompt,
    pub reference: Option<SegmentLabeling>,
}

const SPAN_SLACK_S: f64 = 0.5;

impl Session {
    pub fn new(
        ultrasound: UltrasoundSequence,
        audio: AudioTrack,
        prompt: Prompt,
        reference: Option<SegmentLabeling>,
    ) -> Result<Self> {
        let dur = audio.duration_s();
        if dur < ultrasound.sync_offset_s() {
            return Err(Error::Validation(format!(
                "audio duration {dur:.3}s shorter than sync offset {:.3}s",
                ultrasound.sync_offset_s()
            )));
        }
        if ultrasound.span_s() > dur + SPAN_SLACK_S {
            return Err(Error::Validation(format!(
                "ultrasound span {:.3}s exceeds audio duration {dur:.3}s",
                ultrasound.span_s()
            )));
        }
        Ok(Self {
            ultrasound,
            audio,
            prompt,
            reference,
        })
    }
}

/// File set making up one session on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPaths {
    pub ultrasound: PathBuf,
    /// Sidecar parameter file; defaults to the ultrasound path with a
    /// `.param` extension when that file exists.
    pub params: Option<PathBuf>,
    pub audio: PathBuf,
    pub prompt: PathBuf,
    pub reference: Option<PathBuf>,
}

impl SessionPaths {
    /// Conventional layout used by the synthetic corpus writer.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ultrasound: dir.join("ultrasound.raw"),
            params: Some(dir.join("ultrasound.param")),
            audio: dir.join("audio.wav"),
            prompt: dir.join("prompt.txt"),
            reference: Some(dir.join("reference.seg")),
        }
    }

    fn sidecar(&self) -> Option<PathBuf> {
        self.params.clone().or_else(|| {
            let p = self.ultrasound.with_extension("param");
            p.exists().then_some(p)
        })
    }
}

pub type ParamMap = BTreeMap<String, String>;

/// Loads and validates a session. Sidecar values take precedence over `meta`;
/// `meta` may also carry `session_id`, `speaker_id` and `stage`.
pub fn load_session(paths: &SessionPaths, meta: &ParamMap) -> Result<Session> {
    let mut params = meta.clone();
    if let Some(sidecar) = paths.sidecar() {
        params.extend(load_sidecar(&sidecar)?);
    }
    let ultrasound = load_ultrasound(&paths.ultrasound, &params)?;
    let audio = load_audio(&paths.audio)?;
    let words = load_prompt(&paths.prompt)?;
    let prompt = Prompt::new(
        words,
        params.get("session_id").cloned().unwrap_or_default(),
        params.get("speaker_id").cloned().unwrap_or_default(),
        params.get("stage").cloned().filter(|s| !s.is_empty()),
    )?;
    let reference = paths.reference.as_deref().map(load_segments).transpose()?;
    Session::new(ultrasound, audio, prompt, reference)
}

/// Writes every part of `session` to `paths`.
pub fn save_session(session: &Session, paths: &SessionPaths) -> Result<()> {
    let sidecar = paths
        .params
        .clone()
        .unwrap_or_else(|| paths.ultrasound.with_extension("param"));
    save_ultrasound(&session.ultrasound, &paths.ultrasound, &sidecar)?;
    save_audio(&session.audio, &paths.audio)?;
    save_prompt(&session.prompt.target_words, &paths.prompt)?;
    if let (Some(reference), Some(path)) = (&session.reference, &paths.reference) {
        save_segments(reference, path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(fps: f64, sync: f64, t: usize) -> UltrasoundSequence {
        UltrasoundSequence::new(FrameGeometry::new(1, 1), vec![0.0; t], fps, sync).unwrap()
    }

    #[test]
    fn frame_at_origin_and_clamp() {
        let s = seq(100.0, 0.3, 50);
        assert_eq!(s.frame_at(0.3).unwrap(), 0);
        assert_eq!(s.frame_at(0.1).unwrap(), 0);
        assert_eq!(s.frame_at(100.0).unwrap(), 49);
        assert!(matches!(s.frame_at(-0.01), Err(Error::Range(_))));
    }

    #[test]
    fn frame_at_rounding() {
        // 0.105 * 100 evaluates to exactly 10.5 in binary floating point
        let s = seq(100.0, 0.0, 50);
        assert_eq!(s.frame_at(0.105).unwrap(), 10);
        assert_eq!(s.frame_at(0.1051).unwrap(), 11);
        // exactly representable half: 2.625 * 4 = 10.5 -> even neighbour
        let s = seq(4.0, 0.0, 50);
        assert_eq!(s.frame_at(2.625).unwrap(), 10);
        assert_eq!(s.frame_at(2.875).unwrap(), 12);
    }

    #[test]
    fn sequence_invariants() {
        let g = FrameGeometry::new(2, 3);
        assert!(UltrasoundSequence::new(g, vec![0.0; 7], 100.0, 0.0).is_err());
        assert!(UltrasoundSequence::new(g, vec![], 100.0, 0.0).is_err());
        assert!(UltrasoundSequence::new(g, vec![0.0; 6], 0.0, 0.0).is_err());
        assert!(UltrasoundSequence::new(g, vec![0.0; 6], 10.0, -1.0).is_err());
        assert!(UltrasoundSequence::new(g, vec![1.5; 6], 10.0, 0.0).is_err());
        let s = UltrasoundSequence::new(g, vec![0.5; 12], 10.0, 0.0).unwrap();
        assert_eq!(s.num_frames(), 2);
        assert_eq!(s.frame(1).len(), 6);
    }

    #[test]
    fn labeling_rejects_overlap_and_unsorted() {
        let ok = SegmentLabeling::new(vec![Segment::new(0.0, 1.0, "a"), Segment::new(1.0, 2.0, "b")]);
        assert!(ok.is_ok());
        let overlap =
            SegmentLabeling::new(vec![Segment::new(0.0, 2.0, "child"), Segment::new(1.0, 3.0, "therapist")]);
        assert!(matches!(overlap, Err(Error::Validation(m)) if m.contains("overlapping")));
        let unsorted = SegmentLabeling::new(vec![Segment::new(2.0, 3.0, "a"), Segment::new(0.0, 1.0, "b")]);
        assert!(unsorted.is_err());
        assert!(SegmentLabeling::new(vec![Segment::new(1.0, 1.0, "a")]).is_err());
    }

    #[test]
    fn label_lookup_and_frame_runs() {
        let l = SegmentLabeling::from_frame_labels(&["a", "a", "b", "a"], 0.01);
        assert_eq!(l.len(), 3);
        assert_eq!(l.label_at(0.015), Some("a"));
        assert_eq!(l.label_at(0.025), Some("b"));
        assert_eq!(l.label_at(0.5), None);
        assert!((l.duration_of("a") - 0.03).abs() < 1e-12);
    }

    #[test]
    fn session_span_checks() {
        let us = UltrasoundSequence::new(FrameGeometry::new(1, 1), vec![0.0; 100], 10.0, 0.0).unwrap();
        let audio = AudioTrack::new(vec![0.0; 16000], 16000).unwrap();
        let prompt = Prompt::new(vec!["a".into()], "s", "p", None).unwrap();
        // 10 s of ultrasound against 1 s of audio
        assert!(Session::new(us, audio, prompt, None).is_err());
    }
}
