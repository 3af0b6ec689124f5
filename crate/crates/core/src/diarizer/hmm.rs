use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;

use super::TurnTranscript;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gmm::{global_moments, DiagGmm, GmmStats};
use crate::matrix::{log_sum_exp, Matrix};
use crate::session_io::{SegmentLabeling, SILENCE};

const MAGIC: &[u8; 4] = b"TTHM";
const VERSION: u32 = 1;
const MIN_OCCUPANCY: f64 = 1e-10;
const POSTERIOR_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub states_per_token: usize,
    pub iterations: usize,
    pub max_components: usize,
    /// Components double every this many iterations until `max_components`.
    pub split_every: usize,
    pub var_floor_ratio: f64,
    pub initial_self_loop: f64,
    /// Lower bound on every inter-token transition and token prior.
    pub transition_floor: f64,
    /// Optional tokens allowed between transcript tokens and at both edges.
    pub fillers: Vec<String>,
    /// Unrecorded re-estimations from the flat start with every filler slot
    /// obligatory; zero skips them and the degenerate-token check.
    pub filler_passes: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            states_per_token: 5,
            iterations: 10,
            max_components: 32,
            split_every: 2,
            var_floor_ratio: 1e-3,
            initial_self_loop: 0.9,
            transition_floor: 1e-6,
            fillers: vec![SILENCE.to_string()],
            filler_passes: 5,
        }
    }
}

/// Token loop in which each token is a left-to-right chain of emitting
/// states. Only the last state of a token exits, to the first state of any
/// token, with probability `(1 - self_loop) * token_transitions[from][to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicHmm {
    tokens: Vec<String>,
    states_per_token: usize,
    gmms: Vec<DiagGmm>,
    self_loops: Vec<f64>,
    token_transitions: Matrix,
    priors: Vec<f64>,
    var_floor: Vec<f64>,
}

/// Corpus log-likelihood before each EM update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub log_likelihoods: Vec<f64>,
    /// Whether components were split immediately before that E-step.
    pub split_before: Vec<bool>,
    pub components: Vec<usize>,
}

impl TrainHistory {
    /// Consecutive iteration pairs not separated by a split.
    pub fn em_steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.log_likelihoods
            .windows(2)
            .zip(&self.split_before[1..])
            .filter(|(_, &split)| !split)
            .map(|(w, _)| (w[0], w[1]))
    }
}

impl ErgodicHmm {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn states_per_token(&self) -> usize {
        self.states_per_token
    }

    pub fn num_states(&self) -> usize {
        self.gmms.len()
    }

    pub fn dim(&self) -> usize {
        self.gmms[0].dim()
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn state_gmm(&self, state: usize) -> &DiagGmm {
        &self.gmms[state]
    }

    pub fn token_gmms(&self, token: usize) -> &[DiagGmm] {
        &self.gmms[token * self.states_per_token..(token + 1) * self.states_per_token]
    }

    pub fn self_loop(&self, state: usize) -> f64 {
        self.self_loops[state]
    }

    pub fn token_transitions(&self) -> &Matrix {
        &self.token_transitions
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn max_components(&self) -> usize {
        self.gmms.iter().map(DiagGmm::num_components).max().unwrap_or(0)
    }

    fn is_last(&self, state: usize) -> bool {
        state % self.states_per_token == self.states_per_token - 1
    }

    /// Probability of moving from state `from` to state `to` in one frame.
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        let per = self.states_per_token;
        let a = self.self_loops[from];
        let mut p = if from == to { a } else { 0.0 };
        if self.is_last(from) {
            if to % per == 0 {
                p += (1.0 - a) * self.token_transitions.get(from / per, to / per);
            }
        } else if to == from + 1 {
            p += 1.0 - a;
        }
        p
    }

    /// Sum of outgoing probabilities of `state`.
    pub fn outgoing_mass(&self, state: usize) -> f64 {
        let a = self.self_loops[state];
        if self.is_last(state) {
            let tok = state / self.states_per_token;
            a + (1.0 - a) * self.token_transitions.row(tok).iter().sum::<f64>()
        } else {
            1.0
        }
    }

    /// Builds a model with uniform token transitions and priors.
    pub fn new(
        tokens: Vec<String>,
        states_per_token: usize,
        gmms: Vec<DiagGmm>,
        self_loop: f64,
        var_floor: Vec<f64>,
    ) -> Result<Self> {
        let n = tokens.len();
        if n == 0 || states_per_token == 0 || gmms.len() != n * states_per_token {
            return Err(Error::dim("ergodic model states", n * states_per_token, gmms.len()));
        }
        if !(0.0 < self_loop && self_loop < 1.0) {
            return Err(Error::Range(format!("self-loop probability {self_loop} must be in (0,1)")));
        }
        let d = gmms[0].dim();
        if gmms.iter().any(|g| g.dim() != d) || var_floor.len() != d {
            return Err(Error::Validation("state mixtures differ in dimension".into()));
        }
        Ok(Self {
            tokens,
            states_per_token,
            self_loops: vec![self_loop; gmms.len()],
            gmms,
            token_transitions: Matrix::filled(n, n, 1.0 / n as f64),
            priors: vec![1.0 / n as f64; n],
            var_floor,
        })
    }

    fn emission_scores(&self, features: &FeatureMatrix) -> Matrix {
        let t_len = features.num_frames();
        let s = self.num_states();
        let mut b = Matrix::zeros(t_len, s);
        b.as_mut_slice()
            .par_chunks_mut(s)
            .enumerate()
            .for_each(|(t, row)| {
                let x = features.row(t);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = self.gmms[j].log_likelihood(x);
                }
            });
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        let io = |e| Error::io(path, e);
        w.bytes(MAGIC).map_err(io)?;
        w.u32(VERSION).map_err(io)?;
        w.u32(self.tokens.len() as u32).map_err(io)?;
        w.u32(self.states_per_token as u32).map_err(io)?;
        w.u32(self.dim() as u32).map_err(io)?;
        for t in &self.tokens {
            w.str(t).map_err(io)?;
        }
        for g in &self.gmms {
            w.u32(g.num_components() as u32).map_err(io)?;
            w.f64s(g.weights()).map_err(io)?;
            w.f64s(g.means().as_slice()).map_err(io)?;
            w.f64s(g.variances().as_slice()).map_err(io)?;
        }
        w.f64s(&self.self_loops).map_err(io)?;
        w.f64s(self.token_transitions.as_slice()).map_err(io)?;
        w.f64s(&self.priors).map_err(io)?;
        w.f64s(&self.var_floor).map_err(io)?;
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file), "ergodic_hmm");
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format("ergodic_hmm.version", format!("unsupported version {version}")));
        }
        let n = r.u32("num_tokens")? as usize;
        let per = r.u32("states_per_token")? as usize;
        let d = r.u32("dim")? as usize;
        if n == 0 || n > 1024 || per == 0 || per > 1024 || d == 0 || d > 1 << 16 {
            return Err(Error::format("ergodic_hmm.header", "implausible model dimensions"));
        }
        let tokens = (0..n).map(|_| r.str("token")).collect::<Result<Vec<_>>>()?;
        let mut gmms = Vec::with_capacity(n * per);
        for _ in 0..n * per {
            let k = r.u32("components")? as usize;
            if k == 0 || k > 1 << 16 {
                return Err(Error::format("ergodic_hmm.components", format!("bad component count {k}")));
            }
            let weights = r.f64s(k, "weights")?;
            let means = Matrix::from_vec(k, d, r.f64s(k * d, "means")?)?;
            let vars = Matrix::from_vec(k, d, r.f64s(k * d, "variances")?)?;
            gmms.push(DiagGmm::new(weights, means, vars)?);
        }
        let self_loops = r.f64s(n * per, "self_loops")?;
        let token_transitions = Matrix::from_vec(n, n, r.f64s(n * n, "token_transitions")?)?;
        let priors = r.f64s(n, "priors")?;
        let var_floor = r.f64s(d, "var_floor")?;
        let model = Self {
            tokens,
            states_per_token: per,
            gmms,
            self_loops,
            token_transitions,
            priors,
            var_floor,
        };
        for s in 0..model.num_states() {
            if (model.outgoing_mass(s) - 1.0).abs() > 1e-8 {
                return Err(Error::format("ergodic_hmm.transitions", format!("state {s} is not stochastic")));
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy)]
enum ArcKind {
    SelfLoop(usize),
    Next(usize),
    Exit(usize, usize),
}

struct GraphState {
    model_state: usize,
    /// Incoming arcs: (source graph state, log probability, kind).
    preds: Vec<(usize, f64, ArcKind)>,
    init: Option<(f64, usize)>,
    is_final: bool,
}

/// Expands a transcript into a linear graph of token chains with filler
/// slots between tokens and at both edges, skippable when `optional`.
fn training_graph(
    model: &ErgodicHmm,
    transcript: &TurnTranscript,
    fillers: &[usize],
    optional: bool,
) -> Result<Vec<GraphState>> {
    let mut slots: Vec<(usize, bool)> = Vec::new();
    let push_fillers = |slots: &mut Vec<(usize, bool)>| slots.extend(fillers.iter().map(|&f| (f, optional)));
    push_fillers(&mut slots);
    for tok in transcript.tokens() {
        let idx = model.token_index(tok).ok_or_else(|| {
            Error::Validation(format!(
                "utterance {}: token `{tok}` not in the model inventory",
                transcript.utterance_id
            ))
        })?;
        slots.push((idx, false));
        push_fillers(&mut slots);
    }
    let per = model.states_per_token;
    let mut states: Vec<GraphState> = Vec::with_capacity(slots.len() * per);
    for &(tok, _) in &slots {
        for i in 0..per {
            states.push(GraphState {
                model_state: tok * per + i,
                preds: Vec::new(),
                init: None,
                is_final: false,
            });
        }
    }
    // slots reachable directly after slot `s` (skipping optional ones)
    let successors = |s: usize| -> Vec<usize> {
        let mut out = Vec::new();
        for (n, &(_, optional)) in slots.iter().enumerate().skip(s + 1) {
            out.push(n);
            if !optional {
                break;
            }
        }
        out
    };
    for (s, &(tok, _)) in slots.iter().enumerate() {
        for i in 0..per {
            let g = s * per + i;
            let ms = tok * per + i;
            let a = model.self_loops[ms];
            states[g].preds.push((g, a.ln(), ArcKind::SelfLoop(ms)));
            if i + 1 < per {
                states[g + 1].preds.push((g, (1.0 - a).ln(), ArcKind::Next(ms)));
            } else {
                for n in successors(s) {
                    let to = slots[n].0;
                    let p = (1.0 - a) * model.token_transitions.get(tok, to);
                    states[n * per].preds.push((g, p.ln(), ArcKind::Exit(tok, to)));
                }
            }
        }
    }
    for (n, &(tok, optional)) in slots.iter().enumerate() {
        states[n * per].init = Some((model.priors[tok].ln(), tok));
        if !optional {
            break;
        }
    }
    for n in (0..slots.len()).rev() {
        states[n * per + per - 1].is_final = true;
        if !slots[n].1 {
            break;
        }
    }
    Ok(states)
}

struct UttStats {
    log_likelihood: f64,
    gmm: Vec<GmmStats>,
    self_counts: Vec<f64>,
    next_counts: Vec<f64>,
    exit_counts: Matrix,
    init_counts: Vec<f64>,
}

impl UttStats {
    fn new(model: &ErgodicHmm) -> Self {
        let n = model.tokens.len();
        Self {
            log_likelihood: 0.0,
            gmm: model
                .gmms
                .iter()
                .map(|g| GmmStats::new(g.num_components(), g.dim()))
                .collect(),
            self_counts: vec![0.0; model.num_states()],
            next_counts: vec![0.0; model.num_states()],
            exit_counts: Matrix::zeros(n, n),
            init_counts: vec![0.0; n],
        }
    }

    fn merge(&mut self, o: &UttStats) {
        self.log_likelihood += o.log_likelihood;
        for (a, b) in self.gmm.iter_mut().zip(&o.gmm) {
            a.merge(b);
        }
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.self_counts, &o.self_counts);
        add(&mut self.next_counts, &o.next_counts);
        add(self.exit_counts.as_mut_slice(), o.exit_counts.as_slice());
        add(&mut self.init_counts, &o.init_counts);
    }
}

fn utterance_stats(
    model: &ErgodicHmm,
    features: &FeatureMatrix,
    transcript: &TurnTranscript,
    fillers: &[usize],
    optional: bool,
) -> Result<UttStats> {
    let graph = training_graph(model, transcript, fillers, optional)?;
    let b = model.emission_scores(features);
    let t_len = features.num_frames();
    let g_len = graph.len();
    let neg = f64::NEG_INFINITY;
    let mut alpha = Matrix::filled(t_len, g_len, neg);
    for (g, st) in graph.iter().enumerate() {
        if let Some((p, _)) = st.init {
            alpha.set(0, g, p + b.get(0, st.model_state));
        }
    }
    let mut buf = Vec::new();
    for t in 1..t_len {
        for (g, st) in graph.iter().enumerate() {
            buf.clear();
            buf.extend(st.preds.iter().map(|&(src, p, _)| alpha.get(t - 1, src) + p));
            let v = log_sum_exp(&buf);
            alpha.set(t, g, v + b.get(t, st.model_state));
        }
    }
    let finals: Vec<f64> = graph
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_final)
        .map(|(g, _)| alpha.get(t_len - 1, g))
        .collect();
    let ll = log_sum_exp(&finals);
    if !ll.is_finite() {
        return Err(Error::InsufficientData(format!(
            "utterance {}: {t_len} frames cannot cover its transcript",
            transcript.utterance_id
        )));
    }
    let mut beta = Matrix::filled(t_len, g_len, neg);
    for (g, st) in graph.iter().enumerate() {
        if st.is_final {
            beta.set(t_len - 1, g, 0.0);
        }
    }
    for t in (0..t_len - 1).rev() {
        for (h, st) in graph.iter().enumerate() {
            let after = beta.get(t + 1, h) + b.get(t + 1, st.model_state);
            if after == neg {
                continue;
            }
            for &(src, p, _) in &st.preds {
                let cur = beta.get(t, src);
                let v = after + p;
                beta.set(t, src, if cur == neg { v } else { log_sum_exp(&[cur, v]) });
            }
        }
    }

    let mut stats = UttStats::new(model);
    stats.log_likelihood = ll;
    let mut scratch = Vec::new();
    for t in 0..t_len {
        let x = features.row(t);
        for (g, st) in graph.iter().enumerate() {
            let gamma = (alpha.get(t, g) + beta.get(t, g) - ll).exp();
            if gamma > POSTERIOR_CUTOFF {
                stats.gmm[st.model_state].accumulate(&model.gmms[st.model_state], x, gamma, &mut scratch);
                if t == 0 {
                    if let Some((_, tok)) = st.init {
                        stats.init_counts[tok] += gamma;
                    }
                }
            }
        }
        if t + 1 == t_len {
            continue;
        }
        for (h, st) in graph.iter().enumerate() {
            let after = beta.get(t + 1, h) + b.get(t + 1, st.model_state) - ll;
            if after == neg {
                continue;
            }
            for &(src, p, kind) in &st.preds {
                let xi = (alpha.get(t, src) + p + after).exp();
                if xi <= 0.0 {
                    continue;
                }
                match kind {
                    ArcKind::SelfLoop(ms) => stats.self_counts[ms] += xi,
                    ArcKind::Next(ms) => stats.next_counts[ms] += xi,
                    ArcKind::Exit(a, c) => {
                        let v = stats.exit_counts.get(a, c);
                        stats.exit_counts.set(a, c, v + xi);
                    }
                }
            }
        }
    }
    Ok(stats)
}

fn floored_distribution(counts: &[f64], floor: f64) -> Option<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut p: Vec<f64> = counts.iter().map(|c| (c / total).max(floor)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Some(p)
}

fn reestimate(model: &ErgodicHmm, stats: &UttStats, floor: f64) -> ErgodicHmm {
    let mut next = model.clone();
    for (s, st) in stats.gmm.iter().enumerate() {
        if let Some(g) = st.estimate(&model.gmms[s], &model.var_floor) {
            next.gmms[s] = g;
        }
    }
    let per = model.states_per_token;
    for s in 0..model.num_states() {
        let out = if model.is_last(s) {
            stats.exit_counts.row(s / per).iter().sum::<f64>()
        } else {
            stats.next_counts[s]
        };
        let total = stats.self_counts[s] + out;
        if total > MIN_OCCUPANCY {
            next.self_loops[s] = (stats.self_counts[s] / total).clamp(floor, 1.0 - floor);
        }
    }
    for tok in 0..model.tokens.len() {
        if let Some(row) = floored_distribution(stats.exit_counts.row(tok), floor) {
            next.token_transitions.row_mut(tok).copy_from_slice(&row);
        }
    }
    if let Some(p) = floored_distribution(&stats.init_counts, floor) {
        next.priors = p;
    }
    next
}

fn validate_data(data: &[(&FeatureMatrix, &TurnTranscript)]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::EmptyRequest("diarizer training needs at least one utterance".into()))?;
    let d = first.0.dim();
    for (f, t) in data {
        if f.dim() != d {
            return Err(Error::dim(format!("features of utterance {}", t.utterance_id), d, f.dim()));
        }
    }
    Ok(d)
}

/// Flat-start embedded Baum-Welch over the tokens of the transcripts plus
/// the configured fillers.
pub fn train_ergodic(
    data: &[(&FeatureMatrix, &TurnTranscript)],
    config: &HmmConfig,
) -> Result<(ErgodicHmm, TrainHistory)> {
    let d = validate_data(data)?;
    let mut inventory: BTreeSet<String> = config.fillers.iter().cloned().collect();
    for (_, t) in data {
        inventory.extend(t.tokens().iter().cloned());
    }
    let tokens: Vec<String> = inventory.into_iter().collect();
    let (mean, var) = global_moments(data.iter().flat_map(|(f, _)| f.data().iter_rows()), d)
        .ok_or_else(|| Error::InsufficientData("no frames".into()))?;
    let var_floor: Vec<f64> = var
        .iter()
        .map(|v| (v * config.var_floor_ratio).max(f64::MIN_POSITIVE))
        .collect();
    let var: Vec<f64> = var.iter().zip(&var_floor).map(|(v, f)| v.max(*f)).collect();
    let flat = DiagGmm::single(&mean, &var)?;
    let model = ErgodicHmm::new(
        tokens.clone(),
        config.states_per_token,
        vec![flat; tokens.len() * config.states_per_token],
        config.initial_self_loop,
        var_floor,
    )?;
    run_em(model, data, config, false)
}

/// Embedded Baum-Welch starting from `model`; tokens without occupancy keep
/// their parameters.
pub fn train_ergodic_from(
    model: &ErgodicHmm,
    data: &[(&FeatureMatrix, &TurnTranscript)],
    config: &HmmConfig,
) -> Result<(ErgodicHmm, TrainHistory)> {
    let d = validate_data(data)?;
    if d != model.dim() {
        return Err(Error::dim("features for warm-start training", model.dim(), d));
    }
    run_em(model.clone(), data, config, true)
}

fn run_em(
    mut model: ErgodicHmm,
    data: &[(&FeatureMatrix, &TurnTranscript)],
    config: &HmmConfig,
    warm: bool,
) -> Result<(ErgodicHmm, TrainHistory)> {
    let fillers: Vec<usize> = config
        .fillers
        .iter()
        .filter_map(|f| model.token_index(f))
        .collect();
    if !warm {
        for _ in 0..config.filler_passes {
            model = initial_pass(&model, data, &fillers, config.transition_floor)?;
        }
    }
    let mut history = TrainHistory::default();
    for iter in 0..config.iterations {
        let mut split = false;
        if iter > 0 && config.split_every > 0 && iter % config.split_every == 0 {
            let target = (model.max_components() * 2).min(config.max_components);
            if target > model.max_components() {
                for g in model.gmms.iter_mut() {
                    *g = g.split(target);
                }
                split = true;
            }
        }
        let total = corpus_stats(&model, data, &fillers, true)?;
        history.log_likelihoods.push(total.log_likelihood);
        history.split_before.push(split);
        history.components.push(model.max_components());
        model = reestimate(&model, &total, config.transition_floor);
    }
    Ok((model, history))
}

fn corpus_stats(
    model: &ErgodicHmm,
    data: &[(&FeatureMatrix, &TurnTranscript)],
    fillers: &[usize],
    optional: bool,
) -> Result<UttStats> {
    let per_utt: Vec<UttStats> = data
        .par_iter()
        .map(|(f, t)| match utterance_stats(model, f, t, fillers, optional) {
            Err(Error::InsufficientData(_)) if !optional => utterance_stats(model, f, t, fillers, true),
            other => other,
        })
        .collect::<Result<_>>()?;
    let mut total = UttStats::new(model);
    for s in &per_utt {
        total.merge(s);
    }
    Ok(total)
}

/// One re-estimation from the flat model with every filler slot obligatory
/// (utterances too short for that keep optional fillers), so fillers own
/// the inter-token frames before the recorded EM iterations start.
fn initial_pass(
    model: &ErgodicHmm,
    data: &[(&FeatureMatrix, &TurnTranscript)],
    fillers: &[usize],
    floor: f64,
) -> Result<ErgodicHmm> {
    let total = corpus_stats(model, data, fillers, false)?;
    for (tok, name) in model.tokens.iter().enumerate() {
        let occ: f64 = (0..model.states_per_token)
            .map(|i| total.gmm[tok * model.states_per_token + i].total())
            .sum();
        if occ <= MIN_OCCUPANCY {
            return Err(Error::DegenerateTraining { token: name.clone() });
        }
    }
    Ok(reestimate(model, &total, floor))
}

/// Most likely state sequence through the full token loop and its log
/// probability. The path starts in a token's first state and may end in any
/// state.
pub fn viterbi_path(model: &ErgodicHmm, features: &FeatureMatrix) -> Result<(Vec<usize>, f64)> {
    if features.dim() != model.dim() {
        return Err(Error::dim("features for decoding", model.dim(), features.dim()));
    }
    let b = model.emission_scores(features);
    let s_len = model.num_states();
    let per = model.states_per_token;
    let n_tok = model.tokens.len();
    let t_len = features.num_frames();
    let neg = f64::NEG_INFINITY;
    let mut delta = vec![neg; s_len];
    for tok in 0..n_tok {
        delta[tok * per] = model.priors[tok].ln() + b.get(0, tok * per);
    }
    // predecessors with the summed probability of all arcs between the pair
    let preds: Vec<Vec<(usize, f64)>> = (0..s_len)
        .map(|to| {
            (0..s_len)
                .filter_map(|from| {
                    let p = model.transition(from, to);
                    (p > 0.0).then(|| (from, p.ln()))
                })
                .collect()
        })
        .collect();
    let mut back = vec![0usize; t_len * s_len];
    let mut next = vec![neg; s_len];
    for t in 1..t_len {
        for s in 0..s_len {
            let (mut best, mut arg) = (neg, s);
            for &(from, lp) in &preds[s] {
                let v = delta[from] + lp;
                if v > best {
                    best = v;
                    arg = from;
                }
            }
            next[s] = best + b.get(t, s);
            back[t * s_len + s] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut s, score) = delta
        .iter()
        .enumerate()
        .fold((0, neg), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if !score.is_finite() {
        return Err(Error::InsufficientData("no decodable path".into()));
    }
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = s;
        if t > 0 {
            s = back[t * s_len + s];
        }
    }
    Ok((path, score))
}

/// Viterbi decoding collapsed to token runs on the feature clock.
pub fn decode(model: &ErgodicHmm, features: &FeatureMatrix) -> Result<SegmentLabeling> {
    let (path, _) = viterbi_path(model, features)?;
    let labels: Vec<&str> = path
        .iter()
        .map(|&s| model.tokens[s / model.states_per_token].as_str())
        .collect();
    Ok(SegmentLabeling::from_frame_labels(&labels, features.frame_shift_s))
}

/// Non-filler segment labels in order; a labeling with none becomes a
/// single silence token.
pub fn transcript_from_labeling(id: &str, labeling: &SegmentLabeling, fillers: &[String]) -> Result<TurnTranscript> {
    let mut tokens: Vec<String> = labeling
        .segments()
        .iter()
        .filter(|s| !fillers.contains(&s.label))
        .map(|s| s.label.clone())
        .collect();
    if tokens.is_empty() {
        tokens.push(SILENCE.to_string());
    }
    TurnTranscript::new(id, tokens)
}

/// Decodes the unlabeled utterances, turns the hypotheses into transcripts,
/// and continues training from `model` on labeled plus hypothesized data.
pub fn semi_supervised_retrain(
    model: &ErgodicHmm,
    labeled: &[(&FeatureMatrix, &TurnTranscript)],
    unlabeled: &[(&str, &FeatureMatrix)],
    config: &HmmConfig,
) -> Result<(ErgodicHmm, TrainHistory)> {
    if unlabeled.is_empty() {
        return Err(Error::EmptyRequest("semi-supervised retraining needs unlabeled data".into()));
    }
    let hyps: Vec<TurnTranscript> = unlabeled
        .par_iter()
        .map(|(id, f)| transcript_from_labeling(id, &decode(model, f)?, &config.fillers))
        .collect::<Result<_>>()?;
    let mut data: Vec<(&FeatureMatrix, &TurnTranscript)> = labeled.to_vec();
    data.extend(unlabeled.iter().zip(&hyps).map(|((_, f), t)| (*f, t)));
    train_ergodic_from(model, &data, config)
}
