//! Linear word graphs, Viterbi forced alignment and per-segment word decoding.

use super::model::{MonophoneModel, STATES_PER_PHONE};
use super::{Lexicon, MaskedFeatures};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::matrix::Matrix;
use crate::session_io::{Prompt, Segment, SegmentLabeling, CHILD, NOISE, SILENCE, THERAPIST};

/// One phone instance of an alignment graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub phone: String,
    /// Index of the prompt word this phone belongs to; `None` for silence.
    pub word: Option<usize>,
    pub optional: bool,
}

/// Prompt words in order, each expanded to its phones, with an optional
/// silence before the first word, between words and after the last word.
/// Every unit is a left-to-right chain of three emitting states; a virtual
/// start and end state bracket the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignGraph {
    words: Vec<String>,
    units: Vec<Unit>,
}

impl AlignGraph {
    pub fn from_words(words: &[String], lexicon: &Lexicon) -> Result<Self> {
        Self::build(words, lexicon, true)
    }

    /// A single word without silences.
    pub fn word_only(word: &str, lexicon: &Lexicon) -> Result<Self> {
        Self::build(&[word.to_string()], lexicon, false)
    }

    fn build(words: &[String], lexicon: &Lexicon, silences: bool) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Validation("cannot align an empty prompt".into()));
        }
        let silence = |units: &mut Vec<Unit>| {
            if silences {
                units.push(Unit {
                    phone: lexicon.silence().to_string(),
                    word: None,
                    optional: true,
                });
            }
        };
        let mut units = Vec::new();
        silence(&mut units);
        for (i, w) in words.iter().enumerate() {
            for p in lexicon.pronunciation(w)? {
                units.push(Unit {
                    phone: p.clone(),
                    word: Some(i),
                    optional: false,
                });
            }
            silence(&mut units);
        }
        Ok(Self {
            words: words.to_vec(),
            units,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn num_word_states(&self) -> usize {
        STATES_PER_PHONE * self.units.iter().filter(|u| u.word.is_some()).count()
    }

    pub fn silence_positions(&self) -> usize {
        self.units.iter().filter(|u| u.word.is_none()).count()
    }

    /// Frames on the shortest complete path.
    pub fn min_frames(&self) -> usize {
        STATES_PER_PHONE * self.units.iter().filter(|u| !u.optional).count()
    }

    /// Units reachable when entering position `v`, with their probabilities;
    /// `None` is the end state.
    fn entries(&self, v: usize, p_sil: f64) -> Vec<(Option<usize>, f64)> {
        let mut out = Vec::new();
        let mut mass = 1.0;
        for (u, unit) in self.units.iter().enumerate().skip(v) {
            if unit.optional {
                out.push((Some(u), mass * p_sil));
                mass *= 1.0 - p_sil;
            } else {
                out.push((Some(u), mass));
                return out;
            }
        }
        out.push((None, mass));
        out
    }
}

pub fn build_align_graph(prompt: &Prompt, lexicon: &Lexicon) -> Result<AlignGraph> {
    AlignGraph::from_words(&prompt.target_words, lexicon)
}

/// A graph bound to model transition probabilities.
pub(crate) struct Trellis {
    pub model_state: Vec<usize>,
    pub unit: Vec<usize>,
    /// Incoming arcs sorted by source: (source, log probability).
    preds: Vec<Vec<(usize, f64)>>,
    init: Vec<f64>,
    fin: Vec<f64>,
}

impl Trellis {
    pub fn new(graph: &AlignGraph, model: &MonophoneModel) -> Result<Self> {
        let n = graph.units.len() * STATES_PER_PHONE;
        let p_sil = model.optional_silence_prob();
        let mut model_state = Vec::with_capacity(n);
        let mut unit = Vec::with_capacity(n);
        let mut preds = vec![Vec::new(); n];
        let mut init = vec![f64::NEG_INFINITY; n];
        let mut fin = vec![f64::NEG_INFINITY; n];
        for (u, un) in graph.units.iter().enumerate() {
            for k in 0..STATES_PER_PHONE {
                let ms = model
                    .state_index(&un.phone, k)
                    .ok_or_else(|| Error::Validation(format!("phone `{}` not in the acoustic model", un.phone)))?;
                model_state.push(ms);
                unit.push(u);
                let g = u * STATES_PER_PHONE + k;
                let a = model.self_loop(ms);
                preds[g].push((g, a.ln()));
                if k + 1 < STATES_PER_PHONE {
                    preds[g + 1].push((g, (1.0 - a).ln()));
                } else {
                    for (target, p) in graph.entries(u + 1, p_sil) {
                        let lp = ((1.0 - a) * p).ln();
                        match target {
                            Some(v) => preds[v * STATES_PER_PHONE].push((g, lp)),
                            None => fin[g] = lp,
                        }
                    }
                }
            }
        }
        for (target, p) in graph.entries(0, p_sil) {
            if let Some(v) = target {
                init[v * STATES_PER_PHONE] = p.ln();
            }
        }
        preds.iter_mut().for_each(|p| p.sort_by_key(|&(s, _)| s));
        Ok(Self {
            model_state,
            unit,
            preds,
            init,
            fin,
        })
    }

    /// Best complete path through `scores` (frames × model states); ties go
    /// to the lower state index. `None` when no complete path exists.
    pub fn viterbi(&self, scores: &Matrix) -> Option<(Vec<usize>, f64)> {
        let (t_len, n) = (scores.rows(), self.model_state.len());
        if t_len == 0 {
            return None;
        }
        let emit = |t: usize, g: usize| scores.get(t, self.model_state[g]);
        let mut delta: Vec<f64> = (0..n).map(|g| self.init[g] + emit(0, g)).collect();
        let mut back = vec![0u32; t_len * n];
        for t in 1..t_len {
            let mut next = vec![f64::NEG_INFINITY; n];
            for g in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for &(s, lp) in &self.preds[g] {
                    let v = delta[s] + lp;
                    if v > best {
                        best = v;
                        arg = s;
                    }
                }
                next[g] = best + emit(t, g);
                back[t * n + g] = arg as u32;
            }
            delta = next;
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for g in 0..n {
            let v = delta[g] + self.fin[g];
            if v > best {
                best = v;
                last = g;
            }
        }
        if best == f64::NEG_INFINITY || best.is_nan() {
            return None;
        }
        let mut path = vec![last; t_len];
        for t in (1..t_len).rev() {
            path[t - 1] = back[t * n + path[t]] as usize;
        }
        Some((path, best))
    }
}

/// Frame-level result of a forced alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    words: Vec<String>,
    /// Prompt word index per frame; `None` on silence.
    pub frame_words: Vec<Option<usize>>,
    pub model_states: Vec<usize>,
    pub log_likelihood: f64,
    pub frame_shift_s: f64,
}

impl Alignment {
    pub fn num_frames(&self) -> usize {
        self.frame_words.len()
    }

    /// Frame runs `[start, end)` of each word or silence, in order.
    fn runs(&self) -> Vec<(usize, usize, Option<usize>)> {
        let mut runs: Vec<(usize, usize, Option<usize>)> = Vec::new();
        for (t, &w) in self.frame_words.iter().enumerate() {
            match runs.last_mut() {
                Some(r) if r.2 == w => r.1 = t + 1,
                _ => runs.push((t, t + 1, w)),
            }
        }
        runs
    }

    fn label(&self, w: Option<usize>) -> String {
        w.map_or_else(|| SILENCE.to_string(), |i| self.words[i].clone())
    }

    /// Frame span `[start, end)` of every prompt word, in prompt order.
    pub fn word_frames(&self) -> Vec<(usize, usize)> {
        self.runs()
            .into_iter()
            .filter(|r| r.2.is_some())
            .map(|(s, e, _)| (s, e))
            .collect()
    }

    /// Word and silence segments tiling the aligned frames.
    pub fn labeling(&self) -> SegmentLabeling {
        let s = self.frame_shift_s;
        let segs = self
            .runs()
            .into_iter()
            .map(|(a, b, w)| Segment::new(a as f64 * s, b as f64 * s, self.label(w)))
            .collect();
        SegmentLabeling::new(segs).expect("frame runs are ordered and disjoint")
    }

    /// Segments on the clock of the unmasked features. A word spans from its
    /// first to its last kept frame; removed frames outside any word are
    /// labeled therapist.
    pub fn labeling_on(&self, masked: &MaskedFeatures) -> Result<SegmentLabeling> {
        if masked.kept.len() != self.num_frames() {
            return Err(Error::dim("aligned frames vs kept frames", masked.kept.len(), self.num_frames()));
        }
        let s = masked.frame_shift_s;
        let mut segs: Vec<Segment> = Vec::new();
        let mut cursor = 0usize;
        for (a, b, w) in self.runs() {
            let (start, end) = (masked.kept[a], masked.kept[b - 1] + 1);
            if start > cursor {
                segs.push(Segment::new(cursor as f64 * s, start as f64 * s, THERAPIST));
            }
            segs.push(Segment::new(start as f64 * s, end as f64 * s, self.label(w)));
            cursor = end;
        }
        if masked.original_frames > cursor {
            segs.push(Segment::new(cursor as f64 * s, masked.original_frames as f64 * s, THERAPIST));
        }
        SegmentLabeling::new(segs)
    }
}

/// Viterbi alignment of precomputed log emission scores (frames × model
/// states) to `graph`.
pub fn force_align_scores(
    scores: &Matrix,
    frame_shift_s: f64,
    graph: &AlignGraph,
    model: &MonophoneModel,
) -> Result<Alignment> {
    if scores.cols() != model.num_states() {
        return Err(Error::dim("emission score columns", model.num_states(), scores.cols()));
    }
    if scores.rows() < graph.min_frames() {
        return Err(Error::AlignmentFailure(format!(
            "{} frames cannot cover the {} frames needed by `{}`",
            scores.rows(),
            graph.min_frames(),
            graph.words.join(" ")
        )));
    }
    let trellis = Trellis::new(graph, model)?;
    let (path, log_likelihood) = trellis.viterbi(scores).ok_or_else(|| {
        Error::AlignmentFailure(format!("no complete path for `{}`", graph.words.join(" ")))
    })?;
    Ok(Alignment {
        words: graph.words.clone(),
        frame_words: path.iter().map(|&g| graph.units[trellis.unit[g]].word).collect(),
        model_states: path.iter().map(|&g| trellis.model_state[g]).collect(),
        log_likelihood,
        frame_shift_s,
    })
}

pub fn force_align(features: &FeatureMatrix, graph: &AlignGraph, model: &MonophoneModel) -> Result<Alignment> {
    force_align_scores(&model.log_emissions(features)?, features.frame_shift_s, graph, model)
}

fn is_word_label(label: &str, lexicon: &Lexicon) -> bool {
    ![SILENCE, NOISE, THERAPIST, CHILD, lexicon.silence()].contains(&label)
}

/// For every word segment of `boundaries`, the vocabulary word whose phone
/// chain best explains the segment's frames, or `None` when the segment is
/// too short for every word. Ties go to the lexicographically first word.
pub fn oracle_decode_scores(
    scores: &Matrix,
    frame_shift_s: f64,
    boundaries: &SegmentLabeling,
    vocabulary: &[String],
    lexicon: &Lexicon,
    model: &MonophoneModel,
) -> Result<Vec<Option<String>>> {
    if vocabulary.is_empty() {
        return Err(Error::EmptyRequest("oracle decoding needs a vocabulary".into()));
    }
    let mut vocab: Vec<&String> = vocabulary.iter().collect();
    vocab.sort();
    vocab.dedup();
    let trellises = vocab
        .iter()
        .map(|w| Trellis::new(&AlignGraph::word_only(w, lexicon)?, model))
        .collect::<Result<Vec<_>>>()?;
    let frames = scores.rows();
    let first_frame = |t: f64| (((t / frame_shift_s) - 0.5).ceil().max(0.0) as usize).min(frames);
    let mut out = Vec::new();
    for seg in boundaries.segments() {
        if !is_word_label(&seg.label, lexicon) {
            continue;
        }
        let (a, b) = (first_frame(seg.start_s), first_frame(seg.end_s));
        let rows: Vec<usize> = (a..b).collect();
        let sub = scores.select_rows(&rows);
        let mut best: Option<(f64, &String)> = None;
        for (w, tr) in vocab.iter().zip(&trellises) {
            if let Some((_, score)) = tr.viterbi(&sub) {
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, w));
                }
            }
        }
        out.push(best.map(|(_, w)| w.clone()));
    }
    Ok(out)
}

pub fn oracle_decode(
    features: &FeatureMatrix,
    boundaries: &SegmentLabeling,
    vocabulary: &[String],
    lexicon: &Lexicon,
    model: &MonophoneModel,
) -> Result<Vec<Option<String>>> {
    oracle_decode_scores(
        &model.log_emissions(features)?,
        features.frame_shift_s,
        boundaries,
        vocabulary,
        lexicon,
        model,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::model::Emissions;
    use crate::gmm::DiagGmm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lexicon() -> Lexicon {
        Lexicon::parse("ab\ta b\nc\tc\nba\tb a\n", "sil").unwrap()
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    /// One-dimensional model whose state `s` emits around `s`.
    fn model(self_loops: Vec<f64>) -> MonophoneModel {
        let lex = lexicon();
        let n = lex.phones().len() * STATES_PER_PHONE;
        let gmms = (0..n).map(|s| DiagGmm::single(&[s as f64], &[1.0]).unwrap()).collect();
        MonophoneModel::new(&lex, self_loops, 0.5, Emissions::Gmm(gmms)).unwrap()
    }

    #[test]
    fn graph_arithmetic() {
        let lex = lexicon();
        let g = AlignGraph::from_words(&words(&["ab"]), &lex).unwrap();
        assert_eq!(g.num_word_states(), 6);
        assert_eq!(g.silence_positions(), 2);
        assert_eq!(g.min_frames(), 6);
        let g = AlignGraph::from_words(&words(&["ab", "c"]), &lex).unwrap();
        assert_eq!(g.silence_positions(), 3);
        assert_eq!(g.num_word_states(), 9);
        assert!(matches!(AlignGraph::from_words(&words(&["ab", "zz"]), &lex), Err(Error::OutOfVocabulary(w)) if w == "zz"));
        assert!(AlignGraph::from_words(&[], &lex).is_err());
    }

    #[test]
    fn too_short_input_fails() {
        let m = model(vec![0.5; 12]);
        let g = AlignGraph::from_words(&words(&["ab", "c"]), &lexicon()).unwrap();
        let scores = Matrix::zeros(8, 12);
        assert!(matches!(force_align_scores(&scores, 0.01, &g, &m), Err(Error::AlignmentFailure(_))));
    }

    /// Log-probability of a complete path given as (unit, state) pairs,
    /// derived from the topology description rather than the trellis.
    fn path_log_prob(g: &AlignGraph, m: &MonophoneModel, path: &[(usize, usize)], scores: &Matrix) -> f64 {
        let p = m.optional_silence_prob();
        let units = g.units();
        let ms = |(u, k): (usize, usize)| m.state_index(&units[u].phone, k).unwrap();
        let skip = |from: usize, to: usize| -> Option<f64> {
            // entering unit `to` after leaving position `from - 1`
            let mut prob = 1.0;
            for u in &units[from..to] {
                if !u.optional {
                    return None;
                }
                prob *= 1.0 - p;
            }
            Some(if to < units.len() && units[to].optional { prob * p } else { prob })
        };
        let (u0, k0) = path[0];
        if k0 != 0 {
            return f64::NEG_INFINITY;
        }
        let Some(init) = skip(0, u0) else { return f64::NEG_INFINITY };
        let mut lp = init.ln() + scores.get(0, ms(path[0]));
        for t in 1..path.len() {
            let (pu, pk) = path[t - 1];
            let (u, k) = path[t];
            let a = m.self_loop(ms(path[t - 1]));
            let step = if (u, k) == (pu, pk) {
                a
            } else if u == pu && k == pk + 1 {
                1.0 - a
            } else if pk == STATES_PER_PHONE - 1 && k == 0 && u > pu {
                match skip(pu + 1, u) {
                    Some(q) => (1.0 - a) * q,
                    None => return f64::NEG_INFINITY,
                }
            } else {
                return f64::NEG_INFINITY;
            };
            lp += step.ln() + scores.get(t, ms(path[t]));
        }
        let (lu, lk) = *path.last().unwrap();
        if lk != STATES_PER_PHONE - 1 {
            return f64::NEG_INFINITY;
        }
        match skip(lu + 1, units.len()) {
            Some(q) => lp + ((1.0 - m.self_loop(ms((lu, lk)))) * q).ln(),
            None => f64::NEG_INFINITY,
        }
    }

    fn all_paths(n_units: usize, len: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        fn rec(n: usize, len: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            if cur.len() == len {
                out.push(cur.clone());
                return;
            }
            for u in 0..n {
                for k in 0..STATES_PER_PHONE {
                    if let Some(&(pu, pk)) = cur.last() {
                        if u < pu || (u == pu && k < pk) {
                            continue;
                        }
                    }
                    cur.push((u, k));
                    rec(n, len, cur, out);
                    cur.pop();
                }
            }
        }
        rec(n_units, len, &mut cur, &mut out);
        out
    }

    #[test]
    fn viterbi_matches_exhaustive_search() {
        let lex = lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..12 {
            let prompt: &[&str] = if case % 2 == 0 { &["c"] } else { &["c", "c"] };
            let g = AlignGraph::from_words(&words(prompt), &lex).unwrap();
            let loops: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..0.9)).collect();
            let m = model(loops);
            let t_len = rng.random_range(g.min_frames()..=8);
            let data: Vec<f64> = (0..t_len * 12).map(|_| rng.random_range(-6.0..0.0)).collect();
            let scores = Matrix::from_vec(t_len, 12, data).unwrap();
            let best = all_paths(g.units().len(), t_len)
                .iter()
                .map(|p| path_log_prob(&g, &m, p, &scores))
                .fold(f64::NEG_INFINITY, f64::max);
            let a = force_align_scores(&scores, 0.01, &g, &m).unwrap();
            assert!((a.log_likelihood - best).abs() < 1e-9, "case {case}: {} vs {best}", a.log_likelihood);
        }
    }

    #[test]
    fn segments_tile_and_follow_prompt() {
        let lex = lexicon();
        let m = model(vec![0.6; 12]);
        let g = AlignGraph::from_words(&words(&["ab", "c", "ab"]), &lex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40 * 12).map(|_| rng.random_range(-3.0..0.0)).collect();
        let a = force_align_scores(&Matrix::from_vec(40, 12, data).unwrap(), 0.01, &g, &m).unwrap();
        let l = a.labeling();
        let segs = l.segments();
        assert_eq!(segs[0].start_s, 0.0);
        assert!((segs.last().unwrap().end_s - 0.4).abs() < 1e-12);
        for w in segs.windows(2) {
            assert_eq!(w[0].end_s, w[1].start_s);
        }
        let spoken: Vec<&str> = segs.iter().map(|s| s.label.as_str()).filter(|l| *l != SILENCE).collect();
        assert_eq!(spoken, ["ab", "c", "ab"]);
    }

    #[test]
    fn masked_alignment_maps_to_original_clock() {
        let lex = lexicon();
        let m = model(vec![0.5; 12]);
        let g = AlignGraph::from_words(&words(&["c"]), &lex).unwrap();
        let masked = MaskedFeatures {
            features: None,
            kept: vec![0, 1, 2, 6, 7, 8],
            original_frames: 10,
            frame_shift_s: 0.01,
        };
        let a = force_align_scores(&Matrix::zeros(6, 12), 0.01, &g, &m).unwrap();
        let l = a.labeling_on(&masked).unwrap();
        let last = l.segments().last().unwrap();
        assert_eq!(last.label, THERAPIST);
        assert!((last.start_s - 0.09).abs() < 1e-12 && (last.end_s - 0.10).abs() < 1e-12);
        assert_eq!(l.segments().iter().filter(|s| s.label == "c").count(), 1);
    }

    #[test]
    fn oracle_decode_picks_matching_word() {
        let lex = lexicon();
        let m = model(vec![0.5; 12]);
        let phones = lex.phones();
        let state = |p: &str, k: usize| phones.iter().position(|q| q == p).unwrap() * 3 + k;
        let mut rows = Vec::new();
        for p in ["b", "a"] {
            for k in 0..3 {
                rows.push(vec![state(p, k) as f64; 2]);
            }
        }
        for k in 0..3 {
            rows.push(vec![state("c", k) as f64; 3]);
        }
        let values: Vec<f64> = rows.concat();
        let f = FeatureMatrix::from_column("x", &values, 0.01).unwrap();
        let b = SegmentLabeling::new(vec![
            Segment::new(0.0, 0.12, "ba"),
            Segment::new(0.12, 0.17, "c"),
            Segment::new(0.17, 0.21, SILENCE),
        ])
        .unwrap();
        let vocab = words(&["c", "ba", "ab"]);
        let hyp = oracle_decode(&f, &b, &vocab, &lex, &m).unwrap();
        assert_eq!(hyp, vec![Some("ba".to_string()), Some("c".to_string())]);
        let only = oracle_decode(&f, &b, &words(&["ab"]), &lex, &m).unwrap();
        assert_eq!(only, vec![Some("ab".to_string()), None]);
    }
}
