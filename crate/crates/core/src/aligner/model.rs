//! Monophone acoustic models: three-state phones with mixture or network
//! emissions, and their Viterbi training.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::graph::{AlignGraph, Trellis};
use super::mlp::{Mlp, MlpConfig};
use super::{interpolate_posteriors, Lexicon, PosteriorMatrix};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gmm::{global_moments, DiagGmm, GmmStats};
use crate::matrix::Matrix;

pub const STATES_PER_PHONE: usize = 3;
/// Posteriors below this are clamped before taking logarithms.
const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub enum Emissions {
    /// One mixture per state.
    Gmm(Vec<DiagGmm>),
    /// State posteriors divided by state priors.
    Network { mlp: Mlp, priors: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonophoneModel {
    phones: Vec<String>,
    silence: String,
    self_loops: Vec<f64>,
    optional_silence_prob: f64,
    emissions: Emissions,
}

impl MonophoneModel {
    pub fn new(lexicon: &Lexicon, self_loops: Vec<f64>, optional_silence_prob: f64, emissions: Emissions) -> Result<Self> {
        Self::from_parts(lexicon.phones(), lexicon.silence().to_string(), self_loops, optional_silence_prob, emissions)
    }

    fn from_parts(
        phones: Vec<String>,
        silence: String,
        self_loops: Vec<f64>,
        optional_silence_prob: f64,
        emissions: Emissions,
    ) -> Result<Self> {
        let n = phones.len() * STATES_PER_PHONE;
        if self_loops.len() != n {
            return Err(Error::dim("self-loop probabilities", n, self_loops.len()));
        }
        if let Some(a) = self_loops.iter().find(|a| !(0.0 < **a && **a < 1.0)) {
            return Err(Error::Range(format!("self-loop probability {a} outside (0, 1)")));
        }
        if !(0.0 < optional_silence_prob && optional_silence_prob < 1.0) {
            return Err(Error::Range(format!(
                "optional silence probability {optional_silence_prob} outside (0, 1)"
            )));
        }
        match &emissions {
            Emissions::Gmm(g) => {
                if g.len() != n {
                    return Err(Error::dim("state mixtures", n, g.len()));
                }
                if g.iter().any(|m| m.dim() != g[0].dim()) {
                    return Err(Error::Validation("state mixtures differ in dimension".into()));
                }
            }
            Emissions::Network { mlp, priors } => {
                if mlp.outputs() != n || priors.len() != n {
                    return Err(Error::dim("network states", n, mlp.outputs().min(priors.len())));
                }
                if priors.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::Range("state priors must be positive".into()));
                }
            }
        }
        Ok(Self {
            phones,
            silence,
            self_loops,
            optional_silence_prob,
            emissions,
        })
    }

    /// Same topology with different emissions.
    pub fn with_emissions(&self, emissions: Emissions) -> Result<Self> {
        Self::from_parts(
            self.phones.clone(),
            self.silence.clone(),
            self.self_loops.clone(),
            self.optional_silence_prob,
            emissions,
        )
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn silence(&self) -> &str {
        &self.silence
    }

    pub fn num_states(&self) -> usize {
        self.self_loops.len()
    }

    pub fn state_index(&self, phone: &str, k: usize) -> Option<usize> {
        let p = self.phones.binary_search_by(|q| q.as_str().cmp(phone)).ok()?;
        (k < STATES_PER_PHONE).then_some(p * STATES_PER_PHONE + k)
    }

    /// `phone_k` for every state.
    pub fn state_names(&self) -> Vec<String> {
        self.phones
            .iter()
            .flat_map(|p| (0..STATES_PER_PHONE).map(move |k| format!("{p}_{k}")))
            .collect()
    }

    pub fn self_loop(&self, state: usize) -> f64 {
        self.self_loops[state]
    }

    pub fn optional_silence_prob(&self) -> f64 {
        self.optional_silence_prob
    }

    pub fn emissions(&self) -> &Emissions {
        &self.emissions
    }

    pub fn dim(&self) -> usize {
        match &self.emissions {
            Emissions::Gmm(g) => g[0].dim(),
            Emissions::Network { mlp, .. } => mlp.inputs(),
        }
    }

    pub fn priors(&self) -> Option<&[f64]> {
        match &self.emissions {
            Emissions::Gmm(_) => None,
            Emissions::Network { priors, .. } => Some(priors),
        }
    }

    /// Network state posteriors for every frame.
    pub fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorMatrix> {
        let Emissions::Network { mlp, .. } = &self.emissions else {
            return Err(Error::Validation("posteriors need network emissions".into()));
        };
        self.check_dim(features)?;
        let rows = (0..features.num_frames())
            .into_par_iter()
            .map(|t| mlp.probabilities(features.row(t)))
            .collect::<Result<Vec<_>>>()?;
        PosteriorMatrix::new(Matrix::from_rows(&rows)?, self.state_names(), features.frame_shift_s)
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<()> {
        if features.dim() != self.dim() {
            return Err(Error::dim("acoustic model feature dimension", self.dim(), features.dim()));
        }
        Ok(())
    }

    /// Log emission score of every state for every frame.
    pub fn log_emissions(&self, features: &FeatureMatrix) -> Result<Matrix> {
        self.check_dim(features)?;
        match &self.emissions {
            Emissions::Gmm(gmms) => {
                let mut m = Matrix::zeros(features.num_frames(), gmms.len());
                m.as_mut_slice()
                    .par_chunks_mut(gmms.len())
                    .enumerate()
                    .for_each(|(t, row)| {
                        for (v, g) in row.iter_mut().zip(gmms) {
                            *v = g.log_likelihood(features.row(t));
                        }
                    });
                Ok(m)
            }
            Emissions::Network { priors, .. } => scaled_log_likelihoods(&self.posteriors(features)?, priors),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        let io = |e| Error::io(path, e);
        w.bytes(MAGIC).map_err(io)?;
        w.u32(VERSION).map_err(io)?;
        w.u64(self.phones.len() as u64).map_err(io)?;
        for p in &self.phones {
            w.str(p).map_err(io)?;
        }
        w.str(&self.silence).map_err(io)?;
        w.f64s(&self.self_loops).map_err(io)?;
        w.f64(self.optional_silence_prob).map_err(io)?;
        match &self.emissions {
            Emissions::Gmm(gmms) => {
                w.u32(0).map_err(io)?;
                w.u64(self.dim() as u64).map_err(io)?;
                for g in gmms {
                    w.u64(g.num_components() as u64).map_err(io)?;
                    w.f64s(g.weights()).map_err(io)?;
                    w.f64s(g.means().as_slice()).map_err(io)?;
                    w.f64s(g.variances().as_slice()).map_err(io)?;
                }
            }
            Emissions::Network { mlp, priors } => {
                w.u32(1).map_err(io)?;
                for n in [mlp.inputs(), mlp.hidden(), mlp.outputs()] {
                    w.u64(n as u64).map_err(io)?;
                }
                w.f64s(mlp.mean()).map_err(io)?;
                w.f64s(mlp.scale()).map_err(io)?;
                w.f64s(mlp.theta()).map_err(io)?;
                w.f64s(priors).map_err(io)?;
            }
        }
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file), "monophone_model");
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format("monophone_model.version", format!("unsupported version {version}")));
        }
        let np = r.count("num_phones", 4096)?;
        let phones = (0..np).map(|_| r.str("phone")).collect::<Result<Vec<_>>>()?;
        let silence = r.str("silence")?;
        let n = np * STATES_PER_PHONE;
        let self_loops = r.f64s(n, "self_loops")?;
        let osp = r.f64("optional_silence_prob")?;
        let emissions = match r.u32("emission_kind")? {
            0 => {
                let d = r.count("dim", 1 << 16)?;
                let mut gmms = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = r.count("components", 1 << 16)?;
                    let weights = r.f64s(k, "weights")?;
                    let means = Matrix::from_vec(k, d, r.f64s(k * d, "means")?)?;
                    let vars = Matrix::from_vec(k, d, r.f64s(k * d, "variances")?)?;
                    gmms.push(DiagGmm::new(weights, means, vars)?);
                }
                Emissions::Gmm(gmms)
            }
            1 => {
                let inputs = r.count("inputs", 1 << 20)?;
                let hidden = r.count("hidden", 1 << 16)?;
                let outputs = r.count("outputs", 1 << 16)?;
                let mean = r.f64s(inputs, "mean")?;
                let scale = r.f64s(inputs, "scale")?;
                let theta = r.f64s(hidden * inputs + hidden + outputs * hidden + outputs, "theta")?;
                let priors = r.f64s(outputs, "priors")?;
                Emissions::Network {
                    mlp: Mlp::from_parts((inputs, hidden, outputs), mean, scale, theta)?,
                    priors,
                }
            }
            k => return Err(Error::format("monophone_model.emission_kind", format!("unknown kind {k}"))),
        };
        Self::from_parts(phones, silence, self_loops, osp, emissions)
    }
}

const MAGIC: &[u8; 4] = b"TTMM";
const VERSION: u32 = 1;

/// `ln p(s | x) - ln p(s)` for every frame and state.
pub fn scaled_log_likelihoods(posteriors: &PosteriorMatrix, priors: &[f64]) -> Result<Matrix> {
    let c = posteriors.data().cols();
    if priors.len() != c {
        return Err(Error::dim("state priors", c, priors.len()));
    }
    let log_priors: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    let data = posteriors
        .data()
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, p)| p.max(PROB_FLOOR).ln() - log_priors[i % c])
        .collect();
    Matrix::from_vec(posteriors.data().rows(), c, data)
}

/// Scaled log-likelihoods of two systems' interpolated posteriors; the state
/// priors are interpolated with the same weight.
pub fn combined_log_emissions(
    a: &PosteriorMatrix,
    priors_a: &[f64],
    b: &PosteriorMatrix,
    priors_b: &[f64],
    alpha: f64,
) -> Result<Matrix> {
    if priors_a.len() != priors_b.len() {
        return Err(Error::dim("interpolated priors", priors_a.len(), priors_b.len()));
    }
    let p = interpolate_posteriors(a, b, alpha)?;
    let priors: Vec<f64> = priors_a
        .iter()
        .zip(priors_b)
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    scaled_log_likelihoods(&p, &priors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerConfig {
    pub iterations: usize,
    pub max_components: usize,
    /// Components double every this many iterations until `max_components`.
    pub split_every: usize,
    pub var_floor_ratio: f64,
    pub initial_self_loop: f64,
    pub optional_silence_prob: f64,
    /// Self-loops stay within `[floor, 1 - floor]`.
    pub self_loop_floor: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            max_components: 4,
            split_every: 2,
            var_floor_ratio: 1e-3,
            initial_self_loop: 0.5,
            optional_silence_prob: 0.5,
            self_loop_floor: 0.01,
        }
    }
}

/// Per-state model states along the all-silences path, or along the words
/// alone when the utterance is too short for the silences.
fn flat_start_states(graph: &AlignGraph, phones: &[String], frames: usize) -> Option<Vec<usize>> {
    let idx = |p: &str| phones.binary_search_by(|q| q.as_str().cmp(p)).ok();
    for with_silence in [true, false] {
        let units: Vec<usize> = graph
            .units()
            .iter()
            .filter(|u| with_silence || !u.optional)
            .map(|u| idx(&u.phone))
            .collect::<Option<_>>()?;
        let n = units.len() * STATES_PER_PHONE;
        if frames >= n {
            return Some(
                (0..frames)
                    .map(|t| {
                        let g = t * n / frames;
                        units[g / STATES_PER_PHONE] * STATES_PER_PHONE + g % STATES_PER_PHONE
                    })
                    .collect(),
            );
        }
    }
    None
}

/// Flat start guided by per-frame speech activity: word states are spread
/// evenly over the active frames and each run of inactive frames over the
/// silence states. Falls back to [`flat_start_states`] when no frame is
/// active.
fn activity_start_states(graph: &AlignGraph, phones: &[String], silence: &str, active: &[bool]) -> Option<Vec<usize>> {
    let idx = |p: &str| phones.binary_search_by(|q| q.as_str().cmp(p)).ok();
    let speech = active.iter().filter(|&&a| a).count();
    if speech == 0 {
        return flat_start_states(graph, phones, active.len());
    }
    let words: Vec<usize> = graph
        .units()
        .iter()
        .filter(|u| u.word.is_some())
        .map(|u| idx(&u.phone))
        .collect::<Option<_>>()?;
    let n = words.len() * STATES_PER_PHONE;
    let sil = idx(silence)?;
    let mut states = Vec::with_capacity(active.len());
    let mut seen = 0usize;
    let mut t = 0;
    while t < active.len() {
        let end = t + active[t..].iter().take_while(|&&a| a == active[t]).count();
        for k in 0..end - t {
            states.push(if active[t] {
                let g = seen * n / speech;
                seen += 1;
                words[g / STATES_PER_PHONE] * STATES_PER_PHONE + g % STATES_PER_PHONE
            } else {
                sil * STATES_PER_PHONE + k * STATES_PER_PHONE / (end - t)
            });
        }
        t = end;
    }
    Some(states)
}

/// Viterbi training from word transcripts: a flat start that splits every
/// utterance evenly over its states, then `iterations` rounds of realignment
/// and re-estimation with mixture splitting on a schedule. Returns the model
/// and the total alignment log-likelihood of each round.
pub fn train_monophone(
    data: &[(&FeatureMatrix, &[String])],
    lexicon: &Lexicon,
    config: &AlignerConfig,
) -> Result<(MonophoneModel, Vec<f64>)> {
    train_monophone_with_activity(data, &vec![None; data.len()], lexicon, config)
}

/// [`train_monophone`] with an optional per-frame speech-activity hint per
/// utterance (for example from diarization) that places the flat start.
pub fn train_monophone_with_activity(
    data: &[(&FeatureMatrix, &[String])],
    activity: &[Option<&[bool]>],
    lexicon: &Lexicon,
    config: &AlignerConfig,
) -> Result<(MonophoneModel, Vec<f64>)> {
    if activity.len() != data.len() {
        return Err(Error::dim("activity hints", data.len(), activity.len()));
    }
    if let Some((f, a)) = data.iter().zip(activity).find_map(|((f, _), a)| a.filter(|a| a.len() != f.num_frames()).map(|a| (f, a))) {
        return Err(Error::dim("activity hint frames", f.num_frames(), a.len()));
    }
    let first = data
        .first()
        .ok_or_else(|| Error::EmptyRequest("aligner training needs utterances".into()))?;
    let dim = first.0.dim();
    if let Some((f, _)) = data.iter().find(|(f, _)| f.dim() != dim) {
        return Err(Error::dim("training feature dimension", dim, f.dim()));
    }
    let graphs = data
        .iter()
        .map(|(_, w)| AlignGraph::from_words(w, lexicon))
        .collect::<Result<Vec<_>>>()?;
    let phones = lexicon.phones();
    let n = phones.len() * STATES_PER_PHONE;
    let (gmean, gvar) = global_moments(data.iter().flat_map(|(f, _)| f.data().iter_rows()), dim)
        .ok_or_else(|| Error::InsufficientData("no training frames".into()))?;
    let var_floor: Vec<f64> = gvar.iter().map(|v| (v * config.var_floor_ratio).max(f64::MIN_POSITIVE)).collect();
    let global = DiagGmm::single(&gmean, &gvar.iter().zip(&var_floor).map(|(v, f)| v.max(*f)).collect::<Vec<_>>())?;

    let mut stats: Vec<GmmStats> = (0..n).map(|_| GmmStats::new(1, dim)).collect();
    for (((f, _), g), a) in data.iter().zip(&graphs).zip(activity) {
        let start = match a {
            Some(a) => activity_start_states(g, &phones, lexicon.silence(), a),
            None => flat_start_states(g, &phones, f.num_frames()),
        };
        if let Some(states) = start {
            for (t, &s) in states.iter().enumerate() {
                stats[s].add(0, f.row(t), 1.0);
            }
        }
    }
    let gmms: Vec<DiagGmm> = stats
        .iter()
        .map(|st| st.estimate(&global, &var_floor).unwrap_or_else(|| global.clone()))
        .collect();
    let mut model = MonophoneModel::from_parts(
        phones,
        lexicon.silence().to_string(),
        vec![config.initial_self_loop; n],
        config.optional_silence_prob,
        Emissions::Gmm(gmms),
    )?;

    let mut history = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        if iter > 0 && config.split_every > 0 && iter % config.split_every == 0 {
            if let Emissions::Gmm(g) = &mut model.emissions {
                for m in g.iter_mut() {
                    *m = m.split((2 * m.num_components()).min(config.max_components));
                }
            }
        }
        let paths: Vec<Option<(Vec<usize>, f64)>> = data
            .par_iter()
            .zip(&graphs)
            .map(|((f, _), g)| -> Result<_> {
                let scores = model.log_emissions(f)?;
                let trellis = Trellis::new(g, &model)?;
                Ok(trellis
                    .viterbi(&scores)
                    .map(|(p, ll)| (p.iter().map(|&s| trellis.model_state[s]).collect(), ll)))
            })
            .collect::<Result<_>>()?;
        let Emissions::Gmm(gmms) = &model.emissions else {
            unreachable!("training keeps mixture emissions")
        };
        let mut stats: Vec<GmmStats> = gmms.iter().map(|g| GmmStats::new(g.num_components(), dim)).collect();
        let mut occupancy = vec![0.0f64; n];
        let mut exits = vec![0.0f64; n];
        let mut total = 0.0;
        let mut aligned = 0;
        let mut scratch = Vec::new();
        for ((f, _), p) in data.iter().zip(&paths) {
            let Some((states, ll)) = p else { continue };
            aligned += 1;
            total += ll;
            for (t, &s) in states.iter().enumerate() {
                stats[s].accumulate(&gmms[s], f.row(t), 1.0, &mut scratch);
                occupancy[s] += 1.0;
                if states.get(t + 1) != Some(&s) {
                    exits[s] += 1.0;
                }
            }
        }
        if aligned == 0 {
            return Err(Error::InsufficientData("no training utterance could be aligned".into()));
        }
        let new_gmms: Vec<DiagGmm> = stats
            .iter()
            .zip(gmms)
            .map(|(st, g)| st.estimate(g, &var_floor).unwrap_or_else(|| g.clone()))
            .collect();
        let floor = config.self_loop_floor;
        for s in 0..n {
            if occupancy[s] > 0.0 {
                model.self_loops[s] = ((occupancy[s] - exits[s]) / occupancy[s]).clamp(floor, 1.0 - floor);
            }
        }
        model.emissions = Emissions::Gmm(new_gmms);
        history.push(total);
    }
    Ok((model, history))
}

const PRIOR_FLOOR: f64 = 1e-5;

/// Network emissions trained on frame-level state targets (typically from a
/// mixture model's forced alignments). Priors are target frequencies,
/// floored and renormalized.
pub fn train_network_emissions(
    topology: &MonophoneModel,
    data: &[(&FeatureMatrix, &[usize])],
    config: &MlpConfig,
) -> Result<MonophoneModel> {
    let first = data
        .first()
        .ok_or_else(|| Error::EmptyRequest("network training needs utterances".into()))?;
    let n = topology.num_states();
    let mut examples = Vec::new();
    let mut counts = vec![0.0f64; n];
    for (f, targets) in data {
        if targets.len() != f.num_frames() {
            return Err(Error::dim("state targets", f.num_frames(), targets.len()));
        }
        for (t, &s) in targets.iter().enumerate() {
            if s >= n {
                return Err(Error::Range(format!("state target {s} outside 0..{n}")));
            }
            counts[s] += 1.0;
            examples.push((f.row(t), s));
        }
    }
    let total: f64 = counts.iter().sum();
    let raw: Vec<f64> = counts.iter().map(|c| (c / total).max(PRIOR_FLOOR)).collect();
    let z: f64 = raw.iter().sum();
    let priors = raw.iter().map(|p| p / z).collect();
    let mut mlp = Mlp::new(first.0.dim(), config.hidden, n, config.seed);
    mlp.fit(&examples, config)?;
    topology.with_emissions(Emissions::Network { mlp, priors })
}
