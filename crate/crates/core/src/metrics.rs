//! Collar-based detection scores, diarization error rate, word-alignment
//! precision/recall and word error rate.
//!
//! Times are quantized to integer milliseconds and scored by an exact sweep
//! over segment and collar boundaries. Collars exclude `±collar/2` around the
//! start and end of every reference segment not labeled silence or noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::session_io::{SegmentLabeling, CHILD, NOISE, SILENCE, SPEECH, THERAPIST};

pub const DEFAULT_COLLAR_S: f64 = 0.1;
pub const SPEAKER_LABELS: [&str; 2] = [CHILD, THERAPIST];

fn to_ms(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

fn is_silence(label: &str) -> bool {
    label == SILENCE || label == NOISE
}

/// Labels that name a word rather than a speaker or silence.
pub fn is_word_label(label: &str) -> bool {
    ![SILENCE, NOISE, CHILD, THERAPIST, SPEECH, "sil"].contains(&label)
}

struct Quantized<'a> {
    segs: Vec<(i64, i64, &'a str)>,
}

impl<'a> Quantized<'a> {
    fn new(l: &'a SegmentLabeling) -> Self {
        Self {
            segs: l
                .segments()
                .iter()
                .map(|s| (to_ms(s.start_s), to_ms(s.end_s), s.label.as_str()))
                .filter(|s| s.0 < s.1)
                .collect(),
        }
    }

    fn label_at(&self, t: i64) -> Option<&'a str> {
        let i = self.segs.partition_point(|s| s.1 <= t);
        self.segs.get(i).filter(|s| s.0 <= t).map(|s| s.2)
    }
}

/// Calls `f(ms, ref_label, hyp_label)` for every scored elementary interval.
fn sweep(reference: &SegmentLabeling, hyp: &SegmentLabeling, collar_s: f64, mut f: impl FnMut(i64, Option<&str>, Option<&str>)) {
    let r = Quantized::new(reference);
    let h = Quantized::new(hyp);
    let half = to_ms(collar_s / 2.0);
    let mut zones: Vec<(i64, i64)> = Vec::new();
    if half > 0 {
        for &(a, b, l) in &r.segs {
            if !is_silence(l) {
                zones.push((a - half, a + half));
                zones.push((b - half, b + half));
            }
        }
    }
    zones.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::new();
    for z in zones {
        match merged.last_mut() {
            Some(m) if z.0 <= m.1 => m.1 = m.1.max(z.1),
            _ => merged.push(z),
        }
    }
    let mut points: Vec<i64> = r
        .segs
        .iter()
        .chain(&h.segs)
        .flat_map(|s| [s.0, s.1])
        .chain(merged.iter().flat_map(|z| [z.0, z.1]))
        .collect();
    points.sort_unstable();
    points.dedup();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let z = merged.partition_point(|z| z.1 <= a);
        if merged.get(z).is_some_and(|z| z.0 <= a) {
            continue;
        }
        f(b - a, r.label_at(a), h.label_at(a));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionCounts {
    pub correct_ms: i64,
    pub retrieved_ms: i64,
    pub relevant_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub retrieved_s: f64,
    pub relevant_s: f64,
    pub correct_s: f64,
}

impl DetectionCounts {
    pub fn add(&mut self, other: &DetectionCounts) {
        self.correct_ms += other.correct_ms;
        self.retrieved_ms += other.retrieved_ms;
        self.relevant_ms += other.relevant_ms;
    }

    /// Precision is 0 when nothing was retrieved; recall without relevant
    /// time is undefined.
    pub fn scores(&self) -> Result<DetectionScores> {
        if self.relevant_ms == 0 {
            return Err(Error::Undefined("recall: no scored reference target time".into()));
        }
        let precision = if self.retrieved_ms > 0 {
            self.correct_ms as f64 / self.retrieved_ms as f64
        } else {
            0.0
        };
        let recall = self.correct_ms as f64 / self.relevant_ms as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(DetectionScores {
            precision,
            recall,
            f1,
            retrieved_s: self.retrieved_ms as f64 / 1000.0,
            relevant_s: self.relevant_ms as f64 / 1000.0,
            correct_s: self.correct_ms as f64 / 1000.0,
        })
    }
}

pub fn detection_counts(reference: &SegmentLabeling, hyp: &SegmentLabeling, target: &str, collar_s: f64) -> DetectionCounts {
    let mut c = DetectionCounts::default();
    sweep(reference, hyp, collar_s, |d, r, h| {
        let (rt, ht) = (r == Some(target), h == Some(target));
        c.relevant_ms += d * rt as i64;
        c.retrieved_ms += d * ht as i64;
        c.correct_ms += d * (rt && ht) as i64;
    });
    c
}

pub fn detection_prf(
    reference: &SegmentLabeling,
    hyp: &SegmentLabeling,
    target: &str,
    collar_s: f64,
) -> Result<DetectionScores> {
    detection_counts(reference, hyp, target, collar_s).scores()
}

/// Word-label agreement: correct time needs equal word labels on both sides.
pub fn alignment_counts(ref_words: &SegmentLabeling, hyp_words: &SegmentLabeling, collar_s: f64) -> DetectionCounts {
    let mut c = DetectionCounts::default();
    sweep(ref_words, hyp_words, collar_s, |d, r, h| {
        let rw = r.filter(|l| is_word_label(l));
        let hw = h.filter(|l| is_word_label(l));
        c.relevant_ms += d * rw.is_some() as i64;
        c.retrieved_ms += d * hw.is_some() as i64;
        c.correct_ms += d * (rw.is_some() && rw == hw) as i64;
    });
    c
}

pub fn alignment_prf(ref_words: &SegmentLabeling, hyp_words: &SegmentLabeling, collar_s: f64) -> Result<DetectionScores> {
    alignment_counts(ref_words, hyp_words, collar_s).scores()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerCounts {
    pub scored_ms: i64,
    pub missed_ms: i64,
    pub false_alarm_ms: i64,
    pub confusion_ms: i64,
}

/// Percentages of scored reference speech time; `der` is the sum of the
/// three components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiarizationScores {
    pub der: f64,
    pub confusion: f64,
    pub missed: f64,
    pub false_alarm: f64,
    pub scored_s: f64,
}

impl DerCounts {
    pub fn add(&mut self, other: &DerCounts) {
        self.scored_ms += other.scored_ms;
        self.missed_ms += other.missed_ms;
        self.false_alarm_ms += other.false_alarm_ms;
        self.confusion_ms += other.confusion_ms;
    }

    pub fn scores(&self) -> Result<DiarizationScores> {
        if self.scored_ms == 0 {
            return Err(Error::Undefined("DER: no scored reference speech".into()));
        }
        let pct = |x: i64| 100.0 * x as f64 / self.scored_ms as f64;
        let (confusion, missed, false_alarm) = (pct(self.confusion_ms), pct(self.missed_ms), pct(self.false_alarm_ms));
        Ok(DiarizationScores {
            der: confusion + missed + false_alarm,
            confusion,
            missed,
            false_alarm,
            scored_s: self.scored_ms as f64 / 1000.0,
        })
    }
}

/// Speech is any label in `labels`; everything else, including gaps, is
/// non-speech.
pub fn der_counts(reference: &SegmentLabeling, hyp: &SegmentLabeling, collar_s: f64, labels: &[&str]) -> DerCounts {
    let mut c = DerCounts::default();
    fn speech<'a>(l: Option<&'a str>, labels: &[&str]) -> Option<&'a str> {
        l.filter(|l| labels.contains(l))
    }
    sweep(reference, hyp, collar_s, |d, r, h| match (speech(r, labels), speech(h, labels)) {
        (Some(a), Some(b)) => {
            c.scored_ms += d;
            if a != b {
                c.confusion_ms += d;
            }
        }
        (Some(_), None) => {
            c.scored_ms += d;
            c.missed_ms += d;
        }
        (None, Some(_)) => c.false_alarm_ms += d,
        (None, None) => {}
    });
    c
}

pub fn der(reference: &SegmentLabeling, hyp: &SegmentLabeling, collar_s: f64, labels: &[&str]) -> Result<DiarizationScores> {
    der_counts(reference, hyp, collar_s, labels).scores()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_words += other.reference_words;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> Result<f64> {
        if self.reference_words == 0 {
            return Err(Error::Undefined("WER: empty reference".into()));
        }
        Ok(100.0 * self.errors() as f64 / self.reference_words as f64)
    }
}

/// Minimum-edit alignment with unit costs. Among alignments with the fewest
/// errors, the one with the fewest deletions, then the fewest insertions,
/// is chosen.
pub fn edit_counts<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (errors, deletions, insertions)
    let mut dp = vec![(0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = (usize::MAX, 0, 0);
            if i > 0 && j > 0 {
                let p = dp[at(i - 1, j - 1)];
                let sub = (reference[i - 1].as_ref() != hyp[j - 1].as_ref()) as usize;
                best = best.min((p.0 + sub, p.1, p.2));
            }
            if i > 0 {
                let p = dp[at(i - 1, j)];
                best = best.min((p.0 + 1, p.1 + 1, p.2));
            }
            if j > 0 {
                let p = dp[at(i, j - 1)];
                best = best.min((p.0 + 1, p.1, p.2 + 1));
            }
            dp[at(i, j)] = best;
        }
    }
    let (e, d, ins) = dp[at(n, m)];
    EditCounts {
        substitutions: e - d - ins,
        insertions: ins,
        deletions: d,
        reference_words: n,
    }
}

pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<(f64, EditCounts)> {
    let c = edit_counts(reference, hyp);
    Ok((c.wer()?, c))
}

/// Accumulated scores of one utterance or group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub utt: String,
    pub group: String,
    pub detection: Option<DetectionCounts>,
    pub der: Option<DerCounts>,
    pub edits: Option<EditCounts>,
}

impl ReportRow {
    pub fn add(&mut self, other: &ReportRow) {
        fn merge<T: Copy + Default>(a: &mut Option<T>, b: &Option<T>, f: impl Fn(&mut T, &T)) {
            if let Some(b) = b {
                f(a.get_or_insert_with(T::default), b);
            }
        }
        merge(&mut self.detection, &other.detection, DetectionCounts::add);
        merge(&mut self.der, &other.der, DerCounts::add);
        merge(&mut self.edits, &other.edits, EditCounts::add);
    }
}

pub const REPORT_HEADER: &str = "utt,precision,recall,f1,der,conf,miss,fa,wer,group";

fn fmt_opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => write!(out, ",{v:.4}").expect("writing to a String"),
        None => out.push_str(",NA"),
    }
}

fn row_line(r: &ReportRow) -> String {
    let mut s = r.utt.clone();
    let det = r.detection.and_then(|c| c.scores().ok());
    fmt_opt(&mut s, det.map(|d| d.precision));
    fmt_opt(&mut s, det.map(|d| d.recall));
    fmt_opt(&mut s, det.map(|d| d.f1));
    let der = r.der.and_then(|c| c.scores().ok());
    fmt_opt(&mut s, der.map(|d| d.der));
    fmt_opt(&mut s, der.map(|d| d.confusion));
    fmt_opt(&mut s, der.map(|d| d.missed));
    fmt_opt(&mut s, der.map(|d| d.false_alarm));
    fmt_opt(&mut s, r.edits.and_then(|e| e.wer().ok()));
    s.push(',');
    s.push_str(&r.group);
    s
}

/// Per-utterance rows, then one `*` row per group when `grouped`, then the
/// corpus row `ALL`. Aggregates sum time and edit counts before scoring;
/// undefined values print as `NA`.
pub fn report_csv(rows: &[ReportRow], grouped: bool) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&row_line(r));
        out.push('\n');
    }
    if grouped {
        let mut groups: BTreeMap<&str, ReportRow> = BTreeMap::new();
        for r in rows {
            groups
                .entry(&r.group)
                .or_insert_with(|| ReportRow {
                    utt: "*".into(),
                    group: r.group.clone(),
                    ..ReportRow::default()
                })
                .add(r);
        }
        for g in groups.values() {
            out.push_str(&row_line(g));
            out.push('\n');
        }
    }
    let mut all = ReportRow {
        utt: "ALL".into(),
        group: "*".into(),
        ..ReportRow::default()
    };
    rows.iter().for_each(|r| all.add(r));
    out.push_str(&row_line(&all));
    out.push('\n');
    out
}
