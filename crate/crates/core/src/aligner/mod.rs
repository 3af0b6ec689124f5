//! Prompt-constrained word alignment with monophone HMMs, therapist-frame
//! masking, ultrasound-embedding context features, posterior interpolation
//! and decoding within known word boundaries.

mod graph;
mod mlp;
mod model;

pub use graph::{
    build_align_graph, force_align, force_align_scores, oracle_decode, oracle_decode_scores, AlignGraph, Alignment,
    Unit,
};
pub use mlp::{Mlp, MlpConfig};
pub use model::{
    combined_log_emissions, scaled_log_likelihoods, train_monophone, train_monophone_with_activity, train_network_emissions, AlignerConfig,
    Emissions, MonophoneModel, STATES_PER_PHONE,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::embedder::{EmbeddingSequence, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::features::{load_matrix, save_matrix, FeatureMatrix};
use crate::matrix::Matrix;
use crate::session_io::{SegmentLabeling, THERAPIST};

pub const DEFAULT_SILENCE_PHONE: &str = "sil";
pub const DEFAULT_CONTEXT: usize = 4;

/// Pronunciations over a closed phone inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
    silence: String,
}

impl Lexicon {
    /// Fails on an empty pronunciation or an entry using the silence phone.
    pub fn new(entries: BTreeMap<String, Vec<String>>, silence: impl Into<String>) -> Result<Self> {
        let silence = silence.into();
        for (word, phones) in &entries {
            if phones.is_empty() {
                return Err(Error::Validation(format!("word `{word}` has an empty pronunciation")));
            }
            if phones.iter().any(|p| *p == silence) {
                return Err(Error::Validation(format!("word `{word}` uses the reserved silence phone")));
            }
        }
        Ok(Self { entries, silence })
    }

    /// Parses `word<TAB>phone phone ...` lines; blank lines are skipped.
    pub fn parse(text: &str, silence: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `word<TAB>phones`".into(),
            })?;
            let phones: Vec<String> = pron.split_whitespace().map(str::to_string).collect();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("invalid word `{word}`"),
                });
            }
            if entries.insert(word.to_string(), phones).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate word `{word}`"),
                });
            }
        }
        Self::new(entries, silence)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(w, p)| format!("{w}\t{}\n", p.join(" ")))
            .collect()
    }

    pub fn load(path: &Path, silence: &str) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?, silence)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn silence(&self) -> &str {
        &self.silence
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn pronunciation(&self, word: &str) -> Result<&[String]> {
        self.entries
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    /// Words in lexicographic order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted phone inventory including the silence phone.
    pub fn phones(&self) -> Vec<String> {
        let mut set: BTreeSet<&str> = self.entries.values().flatten().map(String::as_str).collect();
        set.insert(&self.silence);
        set.into_iter().map(str::to_string).collect()
    }
}

/// Frame-level class posteriors; every row is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    data: Matrix,
    classes: Vec<String>,
    pub frame_shift_s: f64,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl PosteriorMatrix {
    pub fn new(data: Matrix, classes: Vec<String>, frame_shift_s: f64) -> Result<Self> {
        if data.cols() != classes.len() {
            return Err(Error::dim("posterior classes", data.cols(), classes.len()));
        }
        for (t, row) in data.iter_rows().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!("posterior row {t} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!("posterior row {t} sums to {s}")));
            }
        }
        Ok(Self {
            data,
            classes,
            frame_shift_s,
        })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = FeatureMatrix::new(self.data.clone(), self.frame_shift_s, self.frame_shift_s, self.classes.clone())?;
        save_matrix(&m, 0.0, path)
    }

    /// Reads a matrix written by `save`; values come back at `f32` precision.
    pub fn load(path: &Path) -> Result<Self> {
        let (m, _) = load_matrix(path)?;
        let shift = m.frame_shift_s;
        let classes = m.column_labels().to_vec();
        Self::new(m.into_data(), classes, shift)
    }
}

/// `alpha·a + (1-alpha)·b` row by row.
pub fn interpolate_posteriors(a: &PosteriorMatrix, b: &PosteriorMatrix, alpha: f64) -> Result<PosteriorMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("alpha {alpha} outside [0, 1]")));
    }
    if a.data.rows() != b.data.rows() {
        return Err(Error::dim("interpolated posterior frames", a.data.rows(), b.data.rows()));
    }
    if a.classes != b.classes {
        return Err(Error::Validation("posterior class orderings differ".into()));
    }
    let data: Vec<f64> = a
        .data
        .as_slice()
        .iter()
        .zip(b.data.as_slice())
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    PosteriorMatrix::new(
        Matrix::from_vec(a.data.rows(), a.data.cols(), data)?,
        a.classes.clone(),
        a.frame_shift_s,
    )
}

/// Features with therapist frames removed and the original index of every
/// remaining frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFeatures {
    /// `None` when every frame was removed.
    pub features: Option<FeatureMatrix>,
    pub kept: Vec<usize>,
    pub original_frames: usize,
    pub frame_shift_s: f64,
}

impl MaskedFeatures {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Start time of reduced frame `i` on the original clock.
    pub fn original_time(&self, i: usize) -> f64 {
        self.kept[i] as f64 * self.frame_shift_s
    }
}

/// Drops every frame whose center lies inside a therapist segment.
pub fn mask_therapist(features: &FeatureMatrix, diarization: &SegmentLabeling) -> Result<MaskedFeatures> {
    let kept: Vec<usize> = (0..features.num_frames())
        .filter(|&j| diarization.label_at(features.frame_center(j)) != Some(THERAPIST))
        .collect();
    let reduced = if kept.is_empty() {
        None
    } else if kept.len() == features.num_frames() {
        Some(features.clone())
    } else {
        Some(features.select_rows(&kept)?)
    };
    Ok(MaskedFeatures {
        features: reduced,
        kept,
        original_frames: features.num_frames(),
        frame_shift_s: features.frame_shift_s,
    })
}

/// How a context size maps to embedding offsets in acoustic frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// `-c ..= c`.
    Symmetric,
    /// `-c ..= 0`.
    LeftOnly,
    /// `c` consecutive offsets starting at `-c/2`; at least the current frame.
    Total,
}

impl ContextMode {
    pub fn offsets(self, context: usize) -> Vec<isize> {
        let c = context as isize;
        match self {
            Self::Symmetric => (-c..=c).collect(),
            Self::LeftOnly => (-c..=0).collect(),
            Self::Total => {
                let n = c.max(1);
                (-(n / 2)..n - n / 2).collect()
            }
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "left-only" => Ok(Self::LeftOnly),
            "total" => Ok(Self::Total),
            _ => Err(Error::Config(format!(
                "context mode `{s}` must be symmetric, left-only or total"
            ))),
        }
    }
}

/// Appends, for every acoustic frame, the embeddings of the ultrasound frames
/// nearest to the acoustic frames at each context offset. Offsets beyond the
/// feature matrix replicate its first or last frame.
pub fn augment_with_embeddings(
    features: &FeatureMatrix,
    emb: &EmbeddingSequence,
    context: usize,
    mode: ContextMode,
) -> Result<FeatureMatrix> {
    if emb.is_empty() {
        return Err(Error::EmptyRequest("embedding sequence has no frames".into()));
    }
    let offsets = mode.offsets(context);
    let n = features.num_frames() as isize;
    let d = features.dim();
    let width = d + offsets.len() * EMBEDDING_DIM;
    let mut m = Matrix::zeros(features.num_frames(), width);
    for j in 0..features.num_frames() {
        let row = m.row_mut(j);
        row[..d].copy_from_slice(features.row(j));
        for (k, &off) in offsets.iter().enumerate() {
            let src = (j as isize + off).clamp(0, n - 1) as usize;
            let u = emb.frame_at(features.frame_center(src));
            row[d + k * EMBEDDING_DIM..d + (k + 1) * EMBEDDING_DIM].copy_from_slice(emb.row(u));
        }
    }
    let mut labels = features.column_labels().to_vec();
    for off in &offsets {
        labels.extend((0..EMBEDDING_DIM).map(|i| format!("emb{off:+}_{i}")));
    }
    FeatureMatrix::new(m, features.frame_shift_s, features.frame_length_s, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::numbered_labels;
    use crate::session_io::{Segment, CHILD, SILENCE};
    use proptest::prelude::*;

    fn features(rows: usize, cols: usize) -> FeatureMatrix {
        let data = (0..rows * cols).map(|i| i as f64).collect();
        FeatureMatrix::new(Matrix::from_vec(rows, cols, data).unwrap(), 0.01, 0.025, numbered_labels("f", cols)).unwrap()
    }

    fn lexicon() -> Lexicon {
        Lexicon::parse("cat\tk a t\ndog\td o g\n", DEFAULT_SILENCE_PHONE).unwrap()
    }

    #[test]
    fn lexicon_round_trip_and_inventory() {
        let lex = lexicon();
        assert_eq!(Lexicon::parse(&lex.to_text(), "sil").unwrap(), lex);
        assert_eq!(lex.phones(), ["a", "d", "g", "k", "o", "sil", "t"]);
        assert!(matches!(lex.pronunciation("cow"), Err(Error::OutOfVocabulary(w)) if w == "cow"));
        assert!(Lexicon::parse("x\t\n", "sil").is_err());
        assert!(Lexicon::parse("x\tsil a\n", "sil").is_err());
        assert!(Lexicon::parse("x\ta\nx\tb\n", "sil").is_err());
    }

    #[test]
    fn mask_without_therapist_is_identity() {
        let f = features(300, 2);
        let d = SegmentLabeling::new(vec![Segment::new(0.0, 1.5, CHILD), Segment::new(1.5, 3.0, SILENCE)]).unwrap();
        let m = mask_therapist(&f, &d).unwrap();
        assert_eq!(m.features.as_ref(), Some(&f));
        assert_eq!(m.kept, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn mask_removes_therapist_frames() {
        let f = features(300, 1);
        let d = SegmentLabeling::new(vec![
            Segment::new(0.0, 1.0, CHILD),
            Segment::new(1.0, 2.0, THERAPIST),
            Segment::new(2.0, 3.0, SILENCE),
        ])
        .unwrap();
        let m = mask_therapist(&f, &d).unwrap();
        let expect: Vec<usize> = (0..100).chain(200..300).collect();
        assert_eq!(m.kept, expect);
        assert_eq!(m.features.unwrap().row(100), f.row(200));
        let all = SegmentLabeling::new(vec![Segment::new(0.0, 3.0, THERAPIST)]).unwrap();
        let m = mask_therapist(&f, &all).unwrap();
        assert!(m.is_empty() && m.features.is_none());
    }

    fn labeling_strategy() -> impl Strategy<Value = SegmentLabeling> {
        prop::collection::vec((1u32..60, 0usize..3), 1..12).prop_map(|parts| {
            let mut t = 0.0;
            let segs = parts
                .into_iter()
                .map(|(len, l)| {
                    let s = Segment::new(t, t + len as f64 * 0.013, [CHILD, THERAPIST, SILENCE][l]);
                    t += len as f64 * 0.013;
                    s
                })
                .collect();
            SegmentLabeling::new(segs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn kept_frames_lie_outside_therapist(d in labeling_strategy()) {
            let f = features(400, 1);
            let m = mask_therapist(&f, &d).unwrap();
            for (i, &j) in m.kept.iter().enumerate() {
                prop_assert_ne!(d.label_at(f.frame_center(j)), Some(THERAPIST));
                prop_assert_eq!(m.features.as_ref().unwrap().row(i), f.row(j));
            }
            let removed = m.original_frames - m.kept.len();
            let therapist = (0..400).filter(|&j| d.label_at(f.frame_center(j)) == Some(THERAPIST)).count();
            prop_assert_eq!(removed, therapist);
        }

        #[test]
        fn interpolation_keeps_rows_stochastic(
            raw in prop::collection::vec(0.0f64..1.0, 24),
            raw2 in prop::collection::vec(0.0f64..1.0, 24),
            alpha in 0.0f64..=1.0,
        ) {
            let norm = |v: &[f64]| {
                let rows: Vec<Vec<f64>> = v.chunks(4).map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-3;
                    r.iter().map(|x| (x + 2.5e-4) / s).collect()
                }).collect();
                PosteriorMatrix::new(Matrix::from_rows(&rows).unwrap(), numbered_labels("s", 4), 0.01).unwrap()
            };
            let c = interpolate_posteriors(&norm(&raw), &norm(&raw2), alpha).unwrap();
            for row in c.data().iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    fn post(rows: &[Vec<f64>]) -> PosteriorMatrix {
        PosteriorMatrix::new(Matrix::from_rows(rows).unwrap(), numbered_labels("s", 2), 0.01).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let a = post(&[vec![0.5, 0.5]]);
        let b = post(&[vec![1.0, 0.0]]);
        let c = interpolate_posteriors(&a, &b, 0.6).unwrap();
        assert!((c.data().get(0, 0) - 0.7).abs() < 1e-15 && (c.data().get(0, 1) - 0.3).abs() < 1e-15);
        assert_eq!(interpolate_posteriors(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate_posteriors(&a, &b, 0.0).unwrap(), b);
        assert!(matches!(interpolate_posteriors(&a, &b, 1.5), Err(Error::Range(_))));
        let three = PosteriorMatrix::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), numbered_labels("s", 2), 0.01).unwrap();
        assert!(interpolate_posteriors(&a, &three, 0.5).is_err());
        let renamed = PosteriorMatrix::new(a.data().clone(), numbered_labels("t", 2), 0.01).unwrap();
        assert!(interpolate_posteriors(&a, &renamed, 0.5).is_err());
        assert!(PosteriorMatrix::new(Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap(), numbered_labels("s", 2), 0.01).is_err());
    }

    #[test]
    fn posterior_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let a = post(&[vec![0.25, 0.75], vec![1.0, 0.0]]);
        a.save(&path).unwrap();
        assert_eq!(PosteriorMatrix::load(&path).unwrap(), a);
    }

    fn embeddings(rows: usize, fps: f64, f: impl Fn(usize) -> f64) -> EmbeddingSequence {
        let data = (0..rows * EMBEDDING_DIM).map(|i| f(i / EMBEDDING_DIM)).collect();
        EmbeddingSequence::new(Matrix::from_vec(rows, EMBEDDING_DIM, data).unwrap(), fps, 0.0).unwrap()
    }

    #[test]
    fn augmentation_widths() {
        let f = features(50, 24);
        let e = embeddings(61, 121.2, |t| t as f64);
        assert_eq!(augment_with_embeddings(&f, &e, 4, ContextMode::Symmetric).unwrap().dim(), 96);
        assert_eq!(augment_with_embeddings(&f, &e, 0, ContextMode::Symmetric).unwrap().dim(), 32);
        assert_eq!(augment_with_embeddings(&f, &e, 4, ContextMode::LeftOnly).unwrap().dim(), 24 + 40);
        assert_eq!(augment_with_embeddings(&f, &e, 4, ContextMode::Total).unwrap().dim(), 24 + 32);
        assert_eq!(ContextMode::Total.offsets(4), vec![-2, -1, 0, 1]);
        assert_eq!(ContextMode::Total.offsets(0), vec![0]);
    }

    #[test]
    fn augmentation_uses_nearest_frames_and_replicates_edges() {
        let f = features(20, 1);
        let e = embeddings(40, 200.0, |t| t as f64);
        let a = augment_with_embeddings(&f, &e, 1, ContextMode::Symmetric).unwrap();
        // acoustic frame j has center (j+0.5)*0.01 s, i.e. ultrasound frame round(2j+1)
        for j in 0..20usize {
            for (k, off) in [-1isize, 0, 1].iter().enumerate() {
                let src = (j as isize + off).clamp(0, 19) as usize;
                let expect = (2 * src + 1) as f64;
                assert_eq!(a.row(j)[1 + k * EMBEDDING_DIM], expect, "frame {j} offset {off}");
            }
        }
        let c = embeddings(10, 100.0, |_| 3.25);
        let a = augment_with_embeddings(&f, &c, 4, ContextMode::Symmetric).unwrap();
        assert!(a.data().iter_rows().all(|r| r[1..].iter().all(|&v| v == 3.25)));
    }
}
