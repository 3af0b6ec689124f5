//! Ground-truthed synthetic sessions: ultrasound-like frames, acoustic
//! features sampled per phone and speaker, prompts, turn transcripts and
//! reference labelings.
//!
//! Ultrasound frames are a fixed background plus an arched bright contour.
//! The contour rests in one place outside child speech and, during child
//! speech, takes a height set by the articulation class of the current phone
//! and sways sinusoidally. White noise of deviation `sigma_child` is added to
//! child-speech frames and `sigma_other` to every other frame.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aligner::{Lexicon, DEFAULT_SILENCE_PHONE};
use crate::diarizer::TurnTranscript;
use crate::error::{Error, Result};
use crate::features::{numbered_labels, save_matrix, FeatureMatrix, DLOGF0, LOGF0, LOG_ENERGY, POV};
use crate::matrix::Matrix;
use crate::session_io::{
    save_manifest, save_segments, save_session, AudioTrack, FrameGeometry, ManifestEntry, Prompt, Segment,
    SegmentLabeling, Session, SessionPaths, UltrasoundSequence, CHILD, SILENCE, THERAPIST,
};

pub const DEFAULT_STAGES: [&str; 4] = ["BL", "Mid", "Post", "Maint"];
pub const FEATURES_FILE: &str = "features.bin";
pub const WORDS_FILE: &str = "words.seg";
pub const TURNS_FILE: &str = "turns.txt";
pub const ARTICULATION_FILE: &str = "artic.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Seeds the phone inventory, vocabulary and emission distributions,
    /// which every session of a corpus shares.
    pub inventory_seed: u64,
    pub duration_s: f64,
    pub frame_shift_s: f64,
    /// Mean therapist turn length; turns are uniform on half to one and a
    /// half times this.
    pub therapist_turn_mean_s: f64,
    /// Child turns say between one and this many prompt words.
    pub max_child_words: usize,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
    /// Phone durations in feature frames, inclusive.
    pub phone_frames: (usize, usize),
    /// When false, child turns are silent but their words stay in the prompt.
    pub child_speech: bool,
    pub sigma_child: f64,
    pub sigma_other: f64,
    pub geometry: FrameGeometry,
    pub fps: f64,
    pub sync_offset_s: f64,
    /// Peak brightness of the tongue contour.
    pub contour_amplitude: f64,
    /// Sway amplitude of the contour in echo samples.
    pub sway_samples: f64,
    pub sway_hz: f64,
    pub num_phones: usize,
    pub vocabulary_size: usize,
    /// Word lengths in phones, inclusive.
    pub word_phones: (usize, usize),
    pub num_ceps: usize,
    pub mixture_components: usize,
    /// Deviation of phone means around zero in every cepstral dimension.
    pub phone_spread: f64,
    /// Deviation of the per-speaker cepstral offsets.
    pub speaker_spread: f64,
    pub num_classes: usize,
    pub render_audio: bool,
    pub sample_rate: u32,
    pub num_speakers: usize,
    pub stages: Vec<String>,
    /// Words per synthetic alignment utterance, inclusive.
    pub utterance_words: (usize, usize),
    /// Chance of a pause between consecutive words of an utterance.
    pub pause_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            inventory_seed: 0,
            duration_s: 20.0,
            frame_shift_s: 0.01,
            therapist_turn_mean_s: 1.0,
            max_child_words: 2,
            gap_min_s: 0.25,
            gap_max_s: 0.6,
            phone_frames: (6, 12),
            child_speech: true,
            sigma_child: 0.1,
            sigma_other: 0.01,
            geometry: FrameGeometry::new(24, 32),
            fps: crate::session_io::DEFAULT_FPS,
            sync_offset_s: 0.0,
            contour_amplitude: 0.3,
            sway_samples: 1.5,
            sway_hz: 3.0,
            num_phones: 12,
            vocabulary_size: 24,
            word_phones: (2, 4),
            num_ceps: 20,
            mixture_components: 2,
            phone_spread: 3.0,
            speaker_spread: 1.5,
            num_classes: 11,
            render_audio: false,
            sample_rate: crate::session_io::DEFAULT_SAMPLE_RATE,
            num_speakers: 4,
            stages: DEFAULT_STAGES.iter().map(|s| s.to_string()).collect(),
            utterance_words: (2, 4),
            pause_prob: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sigma_other >= 0.0 && self.sigma_child > self.sigma_other && self.sigma_child.is_finite()) {
            return bad(format!(
                "need sigma_child > sigma_other >= 0, got {} and {}",
                self.sigma_child, self.sigma_other
            ));
        }
        let positive = [
            ("duration_s", self.duration_s),
            ("frame_shift_s", self.frame_shift_s),
            ("therapist_turn_mean_s", self.therapist_turn_mean_s),
            ("gap_min_s", self.gap_min_s),
            ("fps", self.fps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("{k} must be positive, got {v}"));
        }
        if !(self.gap_max_s >= self.gap_min_s && self.gap_max_s.is_finite()) {
            return bad(format!("gap range {}..{} is empty", self.gap_min_s, self.gap_max_s));
        }
        if !(self.sync_offset_s >= 0.0 && self.sync_offset_s < self.duration_s) {
            return bad(format!("sync_offset_s {} outside the session", self.sync_offset_s));
        }
        for (k, (lo, hi)) in [
            ("phone_frames", self.phone_frames),
            ("word_phones", self.word_phones),
            ("utterance_words", self.utterance_words),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{k} range {lo}..={hi} is invalid"));
            }
        }
        if !(0.0..=1.0).contains(&self.pause_prob) {
            return bad(format!("pause_prob {} outside [0, 1]", self.pause_prob));
        }
        let counts = [
            ("max_child_words", self.max_child_words),
            ("num_phones", self.num_phones),
            ("vocabulary_size", self.vocabulary_size),
            ("num_ceps", self.num_ceps),
            ("mixture_components", self.mixture_components),
            ("num_speakers", self.num_speakers),
            ("sample_rate", self.sample_rate as usize),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be at least 1"));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.geometry.pixels() == 0 {
            return bad("ultrasound geometry must be non-empty".into());
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains([',', '\n'])) {
            return bad("stages must be non-empty names without commas".into());
        }
        let [a, b, c] = [self.contour_amplitude, self.sway_samples, self.sway_hz];
        if ![a, b, c].iter().all(|v| *v >= 0.0 && v.is_finite()) || a > 1.0 {
            return bad("contour parameters must be finite and non-negative".into());
        }
        let distinct = (self.word_phones.0..=self.word_phones.1)
            .map(|l| (self.num_phones as f64).powi(l as i32))
            .sum::<f64>();
        if distinct < self.vocabulary_size as f64 {
            return bad(format!(
                "{} phones cannot spell {} distinct words",
                self.num_phones, self.vocabulary_size
            ));
        }
        Ok(())
    }

    fn frames(&self, s: f64) -> usize {
        (s / self.frame_shift_s).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speaker {
    Child,
    Therapist,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Child => CHILD,
            Speaker::Therapist => THERAPIST,
        }
    }
}

/// Phones, vocabulary and per-phone emission mixtures shared by a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    phones: Vec<String>,
    words: Vec<String>,
    pronunciations: Vec<Vec<usize>>,
    /// Per phone, equally weighted component means over the cepstra.
    phone_means: Vec<Vec<Vec<f64>>>,
    silence_mean: Vec<f64>,
    child_offset: Vec<f64>,
    therapist_offset: Vec<f64>,
    num_classes: usize,
}

impl Inventory {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.inventory_seed);
        let d = config.num_ceps;
        let vector = |rng: &mut ChaCha8Rng, sd: f64| -> Vec<f64> {
            (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let phone_means: Vec<Vec<Vec<f64>>> = (0..config.num_phones)
            .map(|_| {
                let centre = vector(&mut rng, config.phone_spread);
                (0..config.mixture_components)
                    .map(|_| {
                        let jitter = vector(&mut rng, 0.5);
                        centre.iter().zip(jitter).map(|(c, j)| c + j).collect()
                    })
                    .collect()
            })
            .collect();
        let silence_mean = vector(&mut rng, config.phone_spread);
        let child_offset = vector(&mut rng, config.speaker_spread);
        let therapist_offset = vector(&mut rng, config.speaker_spread);
        let mut seen = BTreeSet::new();
        let mut pronunciations = Vec::with_capacity(config.vocabulary_size);
        while pronunciations.len() < config.vocabulary_size {
            let len = rng.random_range(config.word_phones.0..=config.word_phones.1);
            let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.num_phones)).collect();
            if seen.insert(p.clone()) {
                pronunciations.push(p);
            }
        }
        Ok(Self {
            phones: (0..config.num_phones).map(|i| format!("p{i}")).collect(),
            words: (0..config.vocabulary_size).map(|i| format!("w{i:02}")).collect(),
            pronunciations,
            phone_means,
            silence_mean,
            child_offset,
            therapist_offset,
            num_classes: config.num_classes,
        })
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pronunciation(&self, word: usize) -> &[usize] {
        &self.pronunciations[word]
    }

    pub fn articulation_class(&self, phone: usize) -> usize {
        phone % self.num_classes
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let entries: BTreeMap<String, Vec<String>> = self
            .words
            .iter()
            .zip(&self.pronunciations)
            .map(|(w, p)| (w.clone(), p.iter().map(|&i| self.phones[i].clone()).collect()))
            .collect();
        Lexicon::new(entries, DEFAULT_SILENCE_PHONE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FrameTruth {
    speaker: Option<Speaker>,
    phone: Option<usize>,
    /// Index into the spoken word tokens.
    word: Option<usize>,
}

const QUIET: FrameTruth = FrameTruth {
    speaker: None,
    phone: None,
    word: None,
};

#[derive(Default)]
struct Timeline {
    frames: Vec<FrameTruth>,
    /// Vocabulary index of every word token said by the child.
    spoken: Vec<usize>,
    turns: Vec<Speaker>,
}

impl Timeline {
    fn silence(&mut self, n: usize) {
        self.frames.extend(std::iter::repeat_n(QUIET, n));
    }

    fn phones(&mut self, speaker: Speaker, phones: &[(usize, usize)], word: Option<usize>) {
        for &(p, n) in phones {
            let f = FrameTruth {
                speaker: Some(speaker),
                phone: Some(p),
                word,
            };
            self.frames.extend(std::iter::repeat_n(f, n));
        }
    }
}

fn phone_durations(config: &SynthConfig, inv: &Inventory, word: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    inv.pronunciation(word)
        .iter()
        .map(|&p| (p, rng.random_range(config.phone_frames.0..=config.phone_frames.1)))
        .collect()
}

fn gap(config: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    let s = if config.gap_max_s > config.gap_min_s {
        rng.random_range(config.gap_min_s..=config.gap_max_s)
    } else {
        config.gap_min_s
    };
    config.frames(s).max(1)
}

/// Alternating therapist and child turns separated by silences, starting and
/// ending with silence, as long as another pair of turns fits.
fn session_timeline(config: &SynthConfig, inv: &Inventory, rng: &mut ChaCha8Rng) -> Result<Timeline> {
    let total = config.frames(config.duration_s);
    let mut tl = Timeline::default();
    tl.silence(gap(config, rng));
    loop {
        let t_len = config
            .frames(rng.random_range(0.5..=1.5) * config.therapist_turn_mean_s)
            .max(1);
        let mut therapist = Vec::new();
        let mut filled = 0;
        while filled < t_len {
            let w = rng.random_range(0..inv.words.len());
            for (p, n) in phone_durations(config, inv, w, rng) {
                let n = n.min(t_len - filled);
                if n > 0 {
                    therapist.push((p, n));
                    filled += n;
                }
            }
        }
        let k = rng.random_range(1..=config.max_child_words);
        let child: Vec<(usize, Vec<(usize, usize)>)> = (0..k)
            .map(|_| {
                let w = rng.random_range(0..inv.words.len());
                (w, phone_durations(config, inv, w, rng))
            })
            .collect();
        let c_len: usize = child.iter().flat_map(|(_, p)| p.iter().map(|x| x.1)).sum();
        let (g1, g2) = (gap(config, rng), gap(config, rng));
        if tl.frames.len() + t_len + g1 + c_len + g2 > total {
            break;
        }
        tl.phones(Speaker::Therapist, &therapist, None);
        tl.turns.push(Speaker::Therapist);
        tl.silence(g1);
        for (w, phones) in child {
            if config.child_speech {
                let token = tl.spoken.len();
                tl.phones(Speaker::Child, &phones, Some(token));
            } else {
                tl.silence(phones.iter().map(|x| x.1).sum());
            }
            tl.spoken.push(w);
        }
        if config.child_speech {
            tl.turns.push(Speaker::Child);
        }
        tl.silence(g2);
    }
    if tl.spoken.is_empty() {
        return Err(Error::Config(format!(
            "a {} s session cannot hold one therapist and one child turn",
            config.duration_s
        )));
    }
    tl.silence(total - tl.frames.len());
    Ok(tl)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Boundary time of feature frame `j`, rounded to whole milliseconds so it
/// survives the 3-decimal segment format.
fn frame_time(j: usize, shift: f64) -> f64 {
    (j as f64 * shift * 1000.0).round() / 1000.0
}

/// Runs of equal keys become segments.
fn runs<K: PartialEq + Copy>(keys: &[K], shift: f64, label: impl Fn(K) -> String) -> SegmentLabeling {
    let mut segments: Vec<Segment> = Vec::new();
    let mut start = 0;
    for j in 1..=keys.len() {
        if j == keys.len() || keys[j] != keys[start] {
            segments.push(Segment::new(frame_time(start, shift), frame_time(j, shift), label(keys[start])));
            start = j;
        }
    }
    SegmentLabeling::new(segments).expect("runs tile the frames in order")
}

const POV_SPEECH: f64 = 0.9;
const POV_QUIET: f64 = 0.1;
const F0_CHILD_HZ: f64 = 300.0;
const F0_THERAPIST_HZ: f64 = 180.0;
const F0_QUIET_HZ: f64 = 150.0;
const LOG_ENERGY_SPEECH: f64 = -1.0;
const LOG_ENERGY_QUIET: f64 = -20.0;

/// Cepstra from the phone's mixture shifted by the speaker offset, pitch
/// by speaker, and a raw log energy far above silence for speech. Values are
/// rounded to `f32` precision, the precision of the matrix file.
fn sample_features(
    config: &SynthConfig,
    inv: &Inventory,
    frames: &[FrameTruth],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    let d = config.num_ceps;
    let mut m = Matrix::zeros(frames.len(), d + 4);
    for (j, f) in frames.iter().enumerate() {
        let row = m.row_mut(j);
        let mean: Vec<f64> = match (f.speaker, f.phone) {
            (Some(s), Some(p)) => {
                let c = rng.random_range(0..config.mixture_components);
                let off = match s {
                    Speaker::Child => &inv.child_offset,
                    Speaker::Therapist => &inv.therapist_offset,
                };
                inv.phone_means[p][c].iter().zip(off).map(|(a, b)| a + b).collect()
            }
            _ => inv.silence_mean.clone(),
        };
        for (v, mu) in row[..d].iter_mut().zip(&mean) {
            *v = mu + gaussian(rng);
        }
        let (pov, f0, energy) = match f.speaker {
            Some(Speaker::Child) => (POV_SPEECH, F0_CHILD_HZ, LOG_ENERGY_SPEECH),
            Some(Speaker::Therapist) => (POV_SPEECH, F0_THERAPIST_HZ, LOG_ENERGY_SPEECH),
            None => (POV_QUIET, F0_QUIET_HZ, LOG_ENERGY_QUIET),
        };
        row[d] = pov + 0.05 * gaussian(rng);
        row[d + 1] = f0.ln() + 0.05 * gaussian(rng);
        row[d + 2] = 0.02 * gaussian(rng);
        row[d + 3] = energy + gaussian(rng);
        row.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let mut labels = numbered_labels("mfcc", d);
    labels.extend([POV, LOGF0, DLOGF0, LOG_ENERGY].map(str::to_string));
    FeatureMatrix::new(m, config.frame_shift_s, crate::features::DEFAULT_FRAME_LENGTH_S, labels)
}

fn quantize(v: f64) -> f32 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8 as f32 / 255.0
}

/// Ultrasound frames and the articulation class of each (child speech only).
/// Intensities are quantized to the 256 levels of the raw format.
fn render_ultrasound(
    config: &SynthConfig,
    inv: &Inventory,
    frames: &[FrameTruth],
    rng: &mut ChaCha8Rng,
) -> Result<(UltrasoundSequence, Vec<Option<usize>>)> {
    let FrameGeometry { scanlines, echoes } = config.geometry;
    let span = frames.len() as f64 * config.frame_shift_s - config.sync_offset_s;
    let n = ((span * config.fps).floor() as usize).max(1);
    let background: Vec<f64> = (0..scanlines * echoes).map(|_| rng.random_range(0.2..0.35)).collect();
    let base_row = 0.3 * echoes as f64;
    let width = (echoes as f64 / 16.0).max(0.5);
    let rest_height = 0.15 * echoes as f64;
    let mut data = Vec::with_capacity(n * background.len());
    let mut classes = Vec::with_capacity(n);
    for k in 0..n {
        let t = config.sync_offset_s + k as f64 / config.fps;
        let j = ((t / config.frame_shift_s).floor() as usize).min(frames.len() - 1);
        let f = frames[j];
        let class = match (f.speaker, f.phone) {
            (Some(Speaker::Child), Some(p)) => Some(inv.articulation_class(p)),
            _ => None,
        };
        let (height, sigma) = match class {
            Some(c) => {
                let h = (0.05 + 0.3 * c as f64 / (config.num_classes - 1) as f64) * echoes as f64;
                (h + config.sway_samples * (2.0 * PI * config.sway_hz * t).sin(), config.sigma_child)
            }
            None => (rest_height, config.sigma_other),
        };
        for s in 0..scanlines {
            let row = base_row + height * (PI * (s as f64 + 0.5) / scanlines as f64).sin();
            for e in 0..echoes {
                let z = (e as f64 - row) / width;
                let v = background[s * echoes + e] + config.contour_amplitude * (-0.5 * z * z).exp();
                let noise = if sigma > 0.0 { sigma * gaussian(rng) } else { 0.0 };
                data.push(quantize(v + noise));
            }
        }
        classes.push(class);
    }
    let seq = UltrasoundSequence::new(config.geometry, data, config.fps, config.sync_offset_s)?;
    Ok((seq, classes))
}

/// Silence, or per speech frame a voicing tone at the speaker's pitch plus a
/// phone-dependent tone, quantized to 16 bits.
fn render_audio(config: &SynthConfig, frames: &[FrameTruth], rng: &mut ChaCha8Rng) -> Result<AudioTrack> {
    let sr = config.sample_rate as f64;
    let per_frame = ((config.frame_shift_s * sr).round() as usize).max(1);
    let n = frames.len() * per_frame;
    let samples = if config.render_audio {
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let j = i / per_frame;
                let f = frames[j];
                let v = match (f.speaker, f.phone) {
                    (Some(s), Some(p)) => {
                        let f0 = if s == Speaker::Child { F0_CHILD_HZ } else { F0_THERAPIST_HZ };
                        let f1 = 400.0 + 150.0 * p as f64;
                        0.2 * (2.0 * PI * f0 * t).sin() + 0.1 * (2.0 * PI * f1 * t).sin() + 0.01 * gaussian(rng)
                    }
                    _ => 0.0,
                };
                (v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
            })
            .collect()
    } else {
        vec![0.0; n]
    };
    AudioTrack::new(samples, config.sample_rate)
}

/// One generated session with everything needed to score every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub session: Session,
    pub features: FeatureMatrix,
    pub transcript: TurnTranscript,
    /// Child words by name, therapist turns as `therapist`, the rest silence.
    pub words: SegmentLabeling,
    /// Articulation class of each ultrasound frame during child speech.
    pub articulation: Vec<Option<usize>>,
}

/// Per-item generator: the corpus seed with a stream selected by `stream`,
/// so items are independent of generation order.
fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn session_id(index: usize) -> String {
    format!("s{index:03}")
}

/// Session `index` of the corpus defined by `config`.
pub fn generate_session_at(config: &SynthConfig, inv: &Inventory, index: usize) -> Result<SynthSession> {
    let mut master = item_rng(config.seed, 2 * index as u64);
    let mut rngs: [ChaCha8Rng; 4] = std::array::from_fn(|_| ChaCha8Rng::seed_from_u64(master.random()));
    let tl = session_timeline(config, inv, &mut rngs[0])?;
    let features = sample_features(config, inv, &tl.frames, &mut rngs[1])?;
    let (ultrasound, articulation) = render_ultrasound(config, inv, &tl.frames, &mut rngs[2])?;
    let audio = render_audio(config, &tl.frames, &mut rngs[3])?;
    let shift = config.frame_shift_s;
    let reference = runs(&tl.frames.iter().map(|f| f.speaker).collect::<Vec<_>>(), shift, |s| {
        s.map_or(SILENCE, Speaker::label).to_string()
    });
    let word_keys: Vec<(Option<Speaker>, Option<usize>)> = tl.frames.iter().map(|f| (f.speaker, f.word)).collect();
    let words = runs(&word_keys, shift, |(s, w)| match (s, w) {
        (_, Some(w)) => inv.words[tl.spoken[w]].clone(),
        (Some(s), None) => s.label().to_string(),
        (None, None) => SILENCE.to_string(),
    });
    let id = session_id(index);
    let prompt = Prompt::new(
        tl.spoken.iter().map(|&w| inv.words[w].clone()).collect(),
        id.clone(),
        format!("spk{}", index % config.num_speakers),
        Some(config.stages[(index / config.num_speakers) % config.stages.len()].clone()),
    )?;
    let transcript = TurnTranscript::new(id, tl.turns.iter().map(|s| s.label().to_string()).collect())?;
    Ok(SynthSession {
        session: Session::new(ultrasound, audio, prompt, Some(reference))?,
        features,
        transcript,
        words,
        articulation,
    })
}

/// The first session of the corpus defined by `config`.
pub fn generate_session(config: &SynthConfig) -> Result<SynthSession> {
    generate_session_at(config, &Inventory::new(config)?, 0)
}

pub fn articulation_to_string(classes: &[Option<usize>]) -> String {
    let mut out = String::new();
    for c in classes {
        match c {
            Some(c) => {
                let _ = writeln!(out, "{c}");
            }
            None => out.push_str("-\n"),
        }
    }
    out
}

/// One line per ultrasound frame: a class index, or `-` outside child speech.
pub fn parse_articulation(text: &str) -> Result<Vec<Option<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "-" => Ok(None),
            v => v.parse().map(Some).map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("invalid class `{v}`"),
            }),
        })
        .collect()
}

pub fn load_articulation(path: &Path) -> Result<Vec<Option<usize>>> {
    parse_articulation(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Writes every file of one session into `dir`.
pub fn write_session(s: &SynthSession, dir: &Path) -> Result<ManifestEntry> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SessionPaths::in_dir(dir);
    save_session(&s.session, &paths)?;
    let features = dir.join(FEATURES_FILE);
    save_matrix(&s.features, 0.0, &features)?;
    save_segments(&s.words, &dir.join(WORDS_FILE))?;
    s.transcript.save(&dir.join(TURNS_FILE))?;
    let artic = dir.join(ARTICULATION_FILE);
    std::fs::write(&artic, articulation_to_string(&s.articulation)).map_err(|e| Error::io(&artic, e))?;
    let p = &s.session.prompt;
    Ok(ManifestEntry {
        session_id: p.session_id.clone(),
        speaker_id: p.speaker_id.clone(),
        stage: p.session_stage.clone().unwrap_or_default(),
        ultrasound: paths.ultrasound,
        audio_or_features: features,
        segments: paths.reference.expect("conventional layout has a reference"),
        prompt: paths.prompt,
    })
}

/// Writes `n` sessions, the shared lexicon and `manifest.csv` under `out`;
/// returns the manifest entries.
pub fn generate_corpus(config: &SynthConfig, n: usize, out: &Path) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::EmptyRequest("a corpus needs at least one session".into()));
    }
    let inv = Inventory::new(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_session_at(config, &inv, i)?;
            write_session(&s, &out.join(session_id(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    inv.lexicon()?.save(&out.join(LEXICON_FILE))?;
    save_manifest(&entries, &out.join(MANIFEST_FILE))?;
    Ok(entries)
}

pub fn manifest_path(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join(MANIFEST_FILE)
}

/// A child-only utterance for alignment experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub words: Vec<String>,
    /// Feature frames of each word.
    pub word_frames: Vec<Range<usize>>,
    /// Phone and frame range of every phone, in order.
    pub phone_frames: Vec<(String, Range<usize>)>,
}

impl SynthUtterance {
    /// Per-frame phone names with `silence` for frames outside words.
    pub fn frame_phones(&self, silence: &str) -> Vec<String> {
        let mut out = vec![silence.to_string(); self.features.num_frames()];
        for (p, r) in &self.phone_frames {
            out[r.clone()].iter_mut().for_each(|x| *x = p.clone());
        }
        out
    }
}

/// Utterance `index`: silence, words with occasional pauses, silence.
pub fn generate_utterance(config: &SynthConfig, inv: &Inventory, index: usize) -> Result<SynthUtterance> {
    let mut rng = item_rng(config.seed, 2 * index as u64 + 1);
    let k = rng.random_range(config.utterance_words.0..=config.utterance_words.1);
    let mut tl = Timeline::default();
    let mut word_frames = Vec::with_capacity(k);
    let mut phone_frames = Vec::new();
    let edge = |rng: &mut ChaCha8Rng| rng.random_range(10..=30);
    let lead = edge(&mut rng);
    tl.silence(lead);
    for i in 0..k {
        if i > 0 && rng.random_bool(config.pause_prob) {
            let n = rng.random_range(5..=15);
            tl.silence(n);
        }
        let w = rng.random_range(0..inv.words.len());
        let phones = phone_durations(config, inv, w, &mut rng);
        let start = tl.frames.len();
        let mut at = start;
        for &(p, n) in &phones {
            phone_frames.push((inv.phones[p].clone(), at..at + n));
            at += n;
        }
        tl.phones(Speaker::Child, &phones, Some(i));
        word_frames.push(start..tl.frames.len());
        tl.spoken.push(w);
    }
    let trail = edge(&mut rng);
    tl.silence(trail);
    let features = sample_features(config, inv, &tl.frames, &mut rng)?;
    Ok(SynthUtterance {
        id: format!("u{index:04}"),
        features,
        words: tl.spoken.iter().map(|&w| inv.words[w].clone()).collect(),
        word_frames,
        phone_frames,
    })
}

pub fn generate_utterances(config: &SynthConfig, n: usize) -> Result<Vec<SynthUtterance>> {
    let inv = Inventory::new(config)?;
    (0..n).into_par_iter().map(|i| generate_utterance(config, &inv, i)).collect()
}
