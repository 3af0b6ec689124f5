//! Subcommand implementations. Sessions are processed in parallel; every
//! output file is per session except reports, which are written atomically.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tonguetrack::aligner::{
    augment_with_embeddings, combined_log_emissions, force_align, force_align_scores, mask_therapist,
    oracle_decode, train_monophone_with_activity, train_network_emissions, AlignGraph, Lexicon, MaskedFeatures, MonophoneModel,
    PosteriorMatrix, DEFAULT_SILENCE_PHONE,
};
use tonguetrack::diarizer::{
    decode, postprocess, semi_supervised_retrain, train_ergodic, transcript_from_labeling, vad_diarize,
    vad_eta_diarize, vad_scores, ErgodicHmm, TurnTranscript,
};
use tonguetrack::embedder::{build_input_stack, extract_embeddings, speaker_mean, train, CnnParams, EmbeddingSequence};
use tonguetrack::eta::{compute_eta, eta_frame_feature, normalize_unity};
use tonguetrack::features::{
    assemble_features, compute_mfcc, compute_pitch, frame_log_energy, load_matrix, FeatureMatrix, MfccConfig,
    PitchConfig, LOG_ENERGY,
};
use tonguetrack::metrics::{
    alignment_counts, der_counts, detection_counts, edit_counts, report_csv, DetectionCounts, ReportRow,
    SPEAKER_LABELS,
};
use tonguetrack::session_io::{
    load_audio, load_manifest, load_prompt, load_segments, load_session, save_segments, ManifestEntry,
    SegmentLabeling, Session, CHILD,
};
use tonguetrack::synthgen::{generate_corpus, load_articulation, ARTICULATION_FILE, LEXICON_FILE, MANIFEST_FILE, WORDS_FILE};

use crate::config::RunConfig;
use crate::{AlignArgs, Command, DiarizeMethod, EvalKind, GroupBy, ReportArgs};

pub const SEGMENTS_EXT: &str = "seg";
pub const WORDS_EXT: &str = "words.seg";
pub const DECODED_EXT: &str = "words.txt";
pub const POSTERIOR_EXT: &str = "post";
pub const EMBEDDING_EXT: &str = "emb";
pub const MODEL_FILE: &str = "model.bin";
pub const SWEEP_FILE: &str = "alpha_sweep.csv";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Stage {
        stage: &'static str,
        input: String,
        source: tonguetrack::Error,
    },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Stage { stage, input, source } => write!(f, "{stage}: {input}: {source}"),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

trait At<T> {
    fn at(self, stage: &'static str, input: impl fmt::Display) -> Outcome<T>;
}

impl<T> At<T> for tonguetrack::Result<T> {
    fn at(self, stage: &'static str, input: impl fmt::Display) -> Outcome<T> {
        self.map_err(|source| Failure::Stage {
            stage,
            input: input.to_string(),
            source,
        })
    }
}

pub fn dispatch(cmd: &Command, cfg: &RunConfig, seed: u64) -> Outcome<()> {
    match cmd {
        Command::Synth { n, out } => synth(cfg, seed, *n, out),
        Command::Eta {
            manifest,
            out,
            normalized,
        } => eta(cfg, manifest, out, *normalized),
        Command::Diarize {
            method,
            manifest,
            out,
            model,
        } => diarize(cfg, *method, manifest, out, model.as_deref()),
        Command::TrainDiarizer {
            manifest,
            out,
            unlabeled,
        } => train_diarizer(cfg, manifest, out, unlabeled.as_deref()),
        Command::TrainEmbedder { manifest, out } => train_embedder(cfg, seed, manifest, out),
        Command::Embed { manifest, model, out } => embed(manifest, model, out),
        Command::Align {
            common,
            embeddings,
            model,
        } => align(cfg, seed, common, embeddings.as_deref(), model.as_deref()),
        Command::Combine { common, a, b } => combine(cfg, common, a, b),
        Command::DecodeOracle {
            manifest,
            model,
            out,
            lexicon,
            embeddings,
        } => decode_oracle(cfg, manifest, model, out, lexicon.as_deref(), embeddings.as_deref()),
        Command::Eval {
            kind,
            reference,
            hyp,
            report,
        } => {
            let (d, a, w) = match kind {
                EvalKind::Diar => (Some(hyp.as_path()), None, None),
                EvalKind::Align => (None, Some(hyp.as_path()), None),
                EvalKind::Wer => (None, None, Some(hyp.as_path())),
            };
            evaluate(cfg, reference, d, a, w, report)
        }
        Command::Report {
            reference,
            diar,
            align,
            wer,
            report,
        } => {
            if diar.is_none() && align.is_none() && wer.is_none() {
                return Err(Failure::Usage("report needs at least one of --diar, --align, --wer".into()));
            }
            evaluate(cfg, reference, diar.as_deref(), align.as_deref(), wer.as_deref(), report)
        }
    }
}

/// A corpus directory stands for its manifest.
pub fn manifest_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn entries(p: &Path) -> Outcome<Vec<ManifestEntry>> {
    let m = manifest_file(p);
    load_manifest(&m).at("manifest", m.display())
}

fn create_dir(p: &Path) -> Outcome<()> {
    std::fs::create_dir_all(p)
        .map_err(|e| tonguetrack::Error::io(p, e))
        .at("output", p.display())
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, text: &str) -> Outcome<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| tonguetrack::Error::io(path, e))
        .at("output", path.display())
}

fn per_session(dir: &Path, e: &ManifestEntry, ext: &str) -> PathBuf {
    dir.join(format!("{}.{ext}", e.session_id))
}

fn session(e: &ManifestEntry) -> Outcome<Session> {
    load_session(&e.session_paths(), &e.meta()).at("load session", e.ultrasound.display())
}

/// Stored features, or MFCC, pitch and log energy computed from a recording.
pub fn features(e: &ManifestEntry) -> Outcome<FeatureMatrix> {
    let path = &e.audio_or_features;
    let input = path.display();
    if !e.is_audio() {
        return Ok(load_matrix(path).at("load features", input)?.0);
    }
    let audio = load_audio(path).at("load audio", &input)?;
    let mfcc_cfg = MfccConfig::default();
    let mfcc = compute_mfcc(&audio, &mfcc_cfg).at("mfcc", &input)?;
    let pitch = compute_pitch(&audio, &PitchConfig::default()).at("pitch", &input)?;
    let energy = frame_log_energy(&audio, mfcc_cfg.frame_length_s, mfcc_cfg.frame_shift_s).at("energy", &input)?;
    let energy = FeatureMatrix::from_column(LOG_ENERGY, &energy, mfcc_cfg.frame_shift_s).at("energy", &input)?;
    assemble_features(&[&mfcc, &pitch, &energy]).at("assemble features", &input)
}

fn log_energy(f: &FeatureMatrix, e: &ManifestEntry) -> Outcome<Vec<f64>> {
    f.column(LOG_ENERGY).ok_or_else(|| Failure::Stage {
        stage: "vad",
        input: e.audio_or_features.display().to_string(),
        source: tonguetrack::Error::Validation(format!("no `{LOG_ENERGY}` column")),
    })
}

fn synth(cfg: &RunConfig, seed: u64, n: usize, out: &Path) -> Outcome<()> {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let entries = generate_corpus(&cfg.synth(seed), n, out).at("synth", out.display())?;
    println!("wrote {} sessions to {}", entries.len(), out.display());
    Ok(())
}

fn eta(cfg: &RunConfig, manifest: &Path, out: &Path, normalized: bool) -> Outcome<()> {
    let entries = entries(manifest)?;
    create_dir(out)?;
    entries.par_iter().try_for_each(|e| {
        let s = session(e)?;
        let input = e.ultrasound.display();
        let mut sig = compute_eta(&s.ultrasound, cfg.f64("eta.window_s"), cfg.usize("eta.hop_frames")).at("eta", &input)?;
        if normalized {
            sig = normalize_unity(&sig).at("eta", &input)?;
        }
        write_atomic(&per_session(out, e, "eta.csv"), &sig.to_csv())
    })
}

/// Post-processed diarization of one session.
pub fn diarize_session(
    cfg: &RunConfig,
    method: DiarizeMethod,
    e: &ManifestEntry,
    model: Option<&ErgodicHmm>,
) -> Outcome<SegmentLabeling> {
    let f = features(e)?;
    let input = e.audio_or_features.display();
    let shift = f.frame_shift_s;
    let raw = match method {
        DiarizeMethod::Hmm => {
            let m = model.expect("hmm diarization is dispatched with a model");
            decode(m, &f).at("hmm decode", &input)?
        }
        DiarizeMethod::Vad => {
            let scores = vad_scores(&log_energy(&f, e)?, &cfg.vad());
            vad_diarize(&scores, cfg.f64("vad.threshold"), shift).at("vad", &input)?
        }
        DiarizeMethod::VadEta => {
            let scores = vad_scores(&log_energy(&f, e)?, &cfg.vad());
            let s = session(e)?;
            let us = e.ultrasound.display();
            let sig = compute_eta(&s.ultrasound, cfg.f64("eta.window_s"), cfg.usize("eta.hop_frames")).at("eta", &us)?;
            let sig = normalize_unity(&sig).at("eta", &us)?;
            let act = eta_frame_feature(&sig, shift, f.num_frames()).at("eta", &us)?;
            vad_eta_diarize(&scores, &act, cfg.f64("vad.threshold"), cfg.f64("eta.threshold"), shift)
                .at("vad-eta", &input)?
        }
    };
    Ok(postprocess(
        &raw,
        cfg.f64("post.merge_gap_s"),
        cfg.f64("post.min_duration_s"),
    ))
}

fn diarize(cfg: &RunConfig, method: DiarizeMethod, manifest: &Path, out: &Path, model: Option<&Path>) -> Outcome<()> {
    let model = match (method, model) {
        (DiarizeMethod::Hmm, None) => return Err(Failure::Usage("diarize hmm needs --model".into())),
        (DiarizeMethod::Hmm, Some(p)) => Some(ErgodicHmm::load(p).at("load diarizer", p.display())?),
        _ => None,
    };
    let entries = entries(manifest)?;
    create_dir(out)?;
    entries.par_iter().try_for_each(|e| {
        let hyp = diarize_session(cfg, method, e, model.as_ref())?;
        let path = per_session(out, e, SEGMENTS_EXT);
        save_segments(&hyp, &path).at("output", path.display())
    })
}

fn reference(e: &ManifestEntry) -> Outcome<SegmentLabeling> {
    load_segments(&e.segments).at("load reference", e.segments.display())
}

fn train_diarizer(cfg: &RunConfig, manifest: &Path, out: &Path, unlabeled: Option<&Path>) -> Outcome<()> {
    let hmm = cfg.hmm();
    let labeled = entries(manifest)?;
    let data: Vec<(FeatureMatrix, TurnTranscript)> = labeled
        .par_iter()
        .map(|e| {
            let r = reference(e)?;
            let t = transcript_from_labeling(&e.session_id, &r, &hmm.fillers).at("transcript", e.segments.display())?;
            Ok((features(e)?, t))
        })
        .collect::<Outcome<_>>()?;
    let pairs: Vec<(&FeatureMatrix, &TurnTranscript)> = data.iter().map(|(f, t)| (f, t)).collect();
    let (mut model, mut history) = train_ergodic(&pairs, &hmm).at("train diarizer", manifest.display())?;
    if let Some(u) = unlabeled {
        let extra = entries(u)?;
        let feats: Vec<(String, FeatureMatrix)> = extra
            .par_iter()
            .map(|e| Ok((e.session_id.clone(), features(e)?)))
            .collect::<Outcome<_>>()?;
        let refs: Vec<(&str, &FeatureMatrix)> = feats.iter().map(|(id, f)| (id.as_str(), f)).collect();
        (model, history) = semi_supervised_retrain(&model, &pairs, &refs, &hmm).at("retrain diarizer", u.display())?;
    }
    model.save(out).at("output", out.display())?;
    for (i, ll) in history.log_likelihoods.iter().enumerate() {
        println!("iteration {i}: log-likelihood {ll:.6}");
    }
    Ok(())
}

/// Sessions grouped by speaker id, in first-appearance order.
fn by_speaker(entries: &[ManifestEntry]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        m.entry(e.speaker_id.as_str()).or_default().push(i);
    }
    m
}

/// Mean ultrasound frame of each session's speaker.
fn speaker_means(entries: &[ManifestEntry], sessions: &[Session]) -> Outcome<Vec<Vec<f64>>> {
    let mut means = vec![Vec::new(); entries.len()];
    for (spk, idx) in by_speaker(entries) {
        let seqs: Vec<_> = idx.iter().map(|&i| &sessions[i].ultrasound).collect();
        let m = speaker_mean(&seqs).at("speaker mean", spk)?;
        for i in idx {
            means[i] = m.clone();
        }
    }
    Ok(means)
}

fn load_sessions(entries: &[ManifestEntry]) -> Outcome<Vec<Session>> {
    entries.par_iter().map(session).collect()
}

fn train_embedder(cfg: &RunConfig, seed: u64, manifest: &Path, out: &Path) -> Outcome<()> {
    let entries = entries(manifest)?;
    let sessions = load_sessions(&entries)?;
    let means = speaker_means(&entries, &sessions)?;
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let path = e.dir().join(ARTICULATION_FILE);
        let labels = load_articulation(&path).at("load articulation", path.display())?;
        if labels.len() != sessions[i].ultrasound.num_frames() {
            return Err(Failure::Stage {
                stage: "load articulation",
                input: path.display().to_string(),
                source: tonguetrack::Error::Dimension {
                    context: "articulation labels".into(),
                    expected: sessions[i].ultrasound.num_frames(),
                    found: labels.len(),
                },
            });
        }
        candidates.extend(labels.iter().enumerate().filter_map(|(t, c)| c.map(|c| (i, t, c))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(cfg.usize("cnn.max_examples"));
    let geometry = sessions
        .first()
        .map(|s| s.ultrasound.geometry())
        .expect("manifests list at least one session");
    let config = cfg.cnn(geometry, seed);
    let classes = config.num_classes;
    if let Some(&(i, _, c)) = candidates.iter().find(|x| x.2 >= classes) {
        return Err(Failure::Stage {
            stage: "train embedder",
            input: entries[i].session_id.clone(),
            source: tonguetrack::Error::Range(format!("class {c} outside 0..{classes}")),
        });
    }
    let examples: Vec<(Vec<f64>, usize)> = candidates
        .par_iter()
        .map(|&(i, t, c)| {
            let x = build_input_stack(&sessions[i].ultrasound, t, &means[i]).at("input stack", &entries[i].session_id)?;
            Ok((x, c))
        })
        .collect::<Outcome<_>>()?;
    let mut params = CnnParams::init(&config).at("train embedder", manifest.display())?;
    let losses = train(&mut params, &examples, &cfg.cnn_training(seed)).at("train embedder", manifest.display())?;
    params.save(out).at("output", out.display())?;
    for (i, l) in losses.iter().enumerate() {
        println!("epoch {i}: loss {l:.6}");
    }
    Ok(())
}

fn embed(manifest: &Path, model: &Path, out: &Path) -> Outcome<()> {
    let params = CnnParams::load(model).at("load embedder", model.display())?;
    let entries = entries(manifest)?;
    let sessions = load_sessions(&entries)?;
    let means = speaker_means(&entries, &sessions)?;
    create_dir(out)?;
    entries.iter().zip(&sessions).zip(&means).try_for_each(|((e, s), m)| {
        let emb = extract_embeddings(&params, &s.ultrasound, m).at("embed", e.ultrasound.display())?;
        let path = per_session(out, e, EMBEDDING_EXT);
        emb.save(&path).at("output", path.display())
    })
}

fn lexicon(manifest: &Path, explicit: Option<&Path>) -> Outcome<Lexicon> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => manifest_file(manifest)
            .parent()
            .unwrap_or(Path::new(""))
            .join(LEXICON_FILE),
    };
    Lexicon::load(&path, DEFAULT_SILENCE_PHONE).at("load lexicon", path.display())
}

/// Features of one session with optional embedding context.
fn aligner_features(cfg: &RunConfig, e: &ManifestEntry, embeddings: Option<&Path>) -> Outcome<FeatureMatrix> {
    let f = features(e)?;
    let Some(dir) = embeddings else { return Ok(f) };
    let path = per_session(dir, e, EMBEDDING_EXT);
    let emb = EmbeddingSequence::load(&path).at("load embeddings", path.display())?;
    augment_with_embeddings(&f, &emb, cfg.usize("align.context"), cfg.context_mode()).at("augment", path.display())
}

fn diarization(args: &AlignArgs, e: &ManifestEntry) -> Outcome<SegmentLabeling> {
    match &args.diarization {
        Some(dir) => {
            let p = per_session(dir, e, SEGMENTS_EXT);
            load_segments(&p).at("load diarization", p.display())
        }
        None => reference(e),
    }
}

struct AlignInput {
    masked: MaskedFeatures,
    words: Vec<String>,
    /// Kept frames the diarization labels child speech.
    active: Vec<bool>,
}

fn align_inputs(
    cfg: &RunConfig,
    args: &AlignArgs,
    entries: &[ManifestEntry],
    embeddings: Option<&Path>,
) -> Outcome<Vec<AlignInput>> {
    entries
        .par_iter()
        .map(|e| {
            let f = aligner_features(cfg, e, embeddings)?;
            let diar = diarization(args, e)?;
            let masked = mask_therapist(&f, &diar).at("mask therapist", &e.session_id)?;
            if masked.is_empty() {
                return Err(Failure::Stage {
                    stage: "mask therapist",
                    input: e.session_id.clone(),
                    source: tonguetrack::Error::InsufficientData("every frame is therapist speech".into()),
                });
            }
            let words = load_prompt(&e.prompt).at("load prompt", e.prompt.display())?;
            let active = masked
                .kept
                .iter()
                .map(|&j| diar.label_at(f.frame_center(j)) == Some(CHILD))
                .collect();
            Ok(AlignInput { masked, words, active })
        })
        .collect()
}

fn masked_features(x: &AlignInput) -> &FeatureMatrix {
    x.masked.features.as_ref().expect("empty masks are rejected")
}

fn align(
    cfg: &RunConfig,
    seed: u64,
    args: &AlignArgs,
    embeddings: Option<&Path>,
    model: Option<&Path>,
) -> Outcome<()> {
    let entries = entries(&args.manifest)?;
    let lex = lexicon(&args.manifest, args.lexicon.as_deref())?;
    let inputs = align_inputs(cfg, args, &entries, embeddings)?;
    let graphs: Vec<AlignGraph> = inputs
        .iter()
        .zip(&entries)
        .map(|(x, e)| AlignGraph::from_words(&x.words, &lex).at("align graph", e.prompt.display()))
        .collect::<Outcome<_>>()?;
    let model = match model {
        Some(p) => MonophoneModel::load(p).at("load aligner", p.display())?,
        None => {
            let data: Vec<(&FeatureMatrix, &[String])> =
                inputs.iter().map(|x| (masked_features(x), x.words.as_slice())).collect();
            let activity: Vec<Option<&[bool]>> = inputs.iter().map(|x| Some(x.active.as_slice())).collect();
            let (gmm, _) = train_monophone_with_activity(&data, &activity, &lex, &cfg.aligner())
                .at("train aligner", args.manifest.display())?;
            if cfg.str("align.emissions") == "network" {
                let targets: Vec<Vec<usize>> = inputs
                    .par_iter()
                    .zip(&graphs)
                    .zip(&entries)
                    .map(|((x, g), e)| Ok(force_align(masked_features(x), g, &gmm).at("align", &e.session_id)?.model_states))
                    .collect::<Outcome<_>>()?;
                let data: Vec<(&FeatureMatrix, &[usize])> = inputs
                    .iter()
                    .zip(&targets)
                    .map(|(x, t)| (masked_features(x), t.as_slice()))
                    .collect();
                train_network_emissions(&gmm, &data, &cfg.mlp(seed)).at("train network", args.manifest.display())?
            } else {
                gmm
            }
        }
    };
    create_dir(&args.out)?;
    let path = args.out.join(MODEL_FILE);
    model.save(&path).at("output", path.display())?;
    inputs
        .par_iter()
        .zip(&graphs)
        .zip(&entries)
        .try_for_each(|((x, g), e)| {
            let f = masked_features(x);
            let a = force_align(f, g, &model).at("align", &e.session_id)?;
            let words = a.labeling_on(&x.masked).at("align", &e.session_id)?;
            let p = per_session(&args.out, e, WORDS_EXT);
            save_segments(&words, &p).at("output", p.display())?;
            if model.priors().is_some() {
                let post = model.posteriors(f).at("posteriors", &e.session_id)?;
                let p = per_session(&args.out, e, POSTERIOR_EXT);
                post.save(&p).at("output", p.display())?;
            }
            Ok(())
        })
}

fn network_model(dir: &Path) -> Outcome<(MonophoneModel, Vec<f64>)> {
    let p = dir.join(MODEL_FILE);
    let m = MonophoneModel::load(&p).at("load aligner", p.display())?;
    let priors = m
        .priors()
        .ok_or_else(|| Failure::Usage(format!("{} has no network emissions to combine", p.display())))?
        .to_vec();
    Ok((m, priors))
}

fn words_reference(e: &ManifestEntry) -> Outcome<SegmentLabeling> {
    let p = e.dir().join(WORDS_FILE);
    load_segments(&p).at("load word reference", p.display())
}

fn combine(cfg: &RunConfig, args: &AlignArgs, a: &Path, b: &Path) -> Outcome<()> {
    let (model_a, priors_a) = network_model(a)?;
    let (model_b, priors_b) = network_model(b)?;
    if model_a.state_names() != model_b.state_names() {
        return Err(Failure::Usage("systems A and B use different state inventories".into()));
    }
    let entries = entries(&args.manifest)?;
    let lex = lexicon(&args.manifest, args.lexicon.as_deref())?;
    let collar = cfg.f64("eval.collar_s");
    let chosen = cfg.f64("combine.alpha");
    let mut grid = cfg.f64_list("combine.alpha_grid");
    if !grid.contains(&chosen) {
        grid.push(chosen);
    }
    create_dir(&args.out)?;
    let per: Vec<Vec<DetectionCounts>> = entries
        .par_iter()
        .map(|e| {
            let f = features(e)?;
            let diar = diarization(args, e)?;
            let masked = mask_therapist(&f, &diar).at("mask therapist", &e.session_id)?;
            let load = |dir: &Path| {
                let p = per_session(dir, e, POSTERIOR_EXT);
                PosteriorMatrix::load(&p).at("load posteriors", p.display())
            };
            let (pa, pb) = (load(a)?, load(b)?);
            let words = load_prompt(&e.prompt).at("load prompt", e.prompt.display())?;
            let graph = AlignGraph::from_words(&words, &lex).at("align graph", e.prompt.display())?;
            let truth = words_reference(e)?;
            grid.iter()
                .map(|&alpha| {
                    let scores =
                        combined_log_emissions(&pa, &priors_a, &pb, &priors_b, alpha).at("combine", &e.session_id)?;
                    // transitions of the more heavily weighted system, so each endpoint is that system
                    let topology = if alpha >= 0.5 { &model_a } else { &model_b };
                    let al = force_align_scores(&scores, pa.frame_shift_s, &graph, topology).at("align", &e.session_id)?;
                    let hyp = al.labeling_on(&masked).at("align", &e.session_id)?;
                    if alpha == chosen {
                        let p = per_session(&args.out, e, WORDS_EXT);
                        save_segments(&hyp, &p).at("output", p.display())?;
                    }
                    Ok(alignment_counts(&truth, &hyp, collar))
                })
                .collect()
        })
        .collect::<Outcome<_>>()?;
    let mut csv = String::from("alpha,precision,recall,f1\n");
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| grid[i].total_cmp(&grid[j]));
    order.dedup_by(|i, j| grid[*i] == grid[*j]);
    for k in order {
        let mut total = DetectionCounts::default();
        per.iter().for_each(|c| total.add(&c[k]));
        let s = total.scores().at("combine", format!("alpha {}", grid[k]))?;
        csv.push_str(&format!("{},{:.4},{:.4},{:.4}\n", grid[k], s.precision, s.recall, s.f1));
    }
    write_atomic(&args.out.join(SWEEP_FILE), &csv)
}

fn decode_oracle(
    cfg: &RunConfig,
    manifest: &Path,
    model: &Path,
    out: &Path,
    lexicon_path: Option<&Path>,
    embeddings: Option<&Path>,
) -> Outcome<()> {
    let model = MonophoneModel::load(model).at("load aligner", model.display())?;
    let lex = lexicon(manifest, lexicon_path)?;
    let vocabulary: Vec<String> = lex.words().map(str::to_string).collect();
    let entries = entries(manifest)?;
    create_dir(out)?;
    entries.par_iter().try_for_each(|e| {
        let f = aligner_features(cfg, e, embeddings)?;
        let bounds = words_reference(e)?;
        let words = oracle_decode(&f, &bounds, &vocabulary, &lex, &model).at("decode", &e.session_id)?;
        let line: Vec<String> = words.into_iter().flatten().collect();
        write_atomic(&per_session(out, e, DECODED_EXT), &(line.join(" ") + "\n"))
    })
}

fn read_words(p: &Path) -> Outcome<Vec<String>> {
    let text = std::fs::read_to_string(p)
        .map_err(|e| tonguetrack::Error::io(p, e))
        .at("load hypothesis", p.display())?;
    Ok(text.split_whitespace().map(str::to_string).collect())
}

/// Report rows for every session, optionally scoring diarization, word
/// alignment and decoded words. Precision, recall and F1 come from the
/// alignment when given, otherwise from child-speech detection.
pub fn report_rows(
    cfg: &RunConfig,
    entries: &[ManifestEntry],
    diar: Option<&Path>,
    align: Option<&Path>,
    wer: Option<&Path>,
    group_by: Option<GroupBy>,
) -> Outcome<Vec<ReportRow>> {
    let collar = cfg.f64("eval.collar_s");
    entries
        .par_iter()
        .map(|e| {
            let mut row = ReportRow {
                utt: e.session_id.clone(),
                group: match group_by {
                    Some(GroupBy::Stage) => e.stage.clone(),
                    Some(GroupBy::Speaker) => e.speaker_id.clone(),
                    None => String::new(),
                },
                ..ReportRow::default()
            };
            if let Some(dir) = diar {
                let r = reference(e)?;
                let p = per_session(dir, e, SEGMENTS_EXT);
                let h = load_segments(&p).at("load hypothesis", p.display())?;
                row.der = Some(der_counts(&r, &h, collar, &SPEAKER_LABELS));
                row.detection = Some(detection_counts(&r, &h, CHILD, collar));
            }
            if let Some(dir) = align {
                let r = words_reference(e)?;
                let p = per_session(dir, e, WORDS_EXT);
                let h = load_segments(&p).at("load hypothesis", p.display())?;
                row.detection = Some(alignment_counts(&r, &h, collar));
            }
            if let Some(dir) = wer {
                let r = load_prompt(&e.prompt).at("load prompt", e.prompt.display())?;
                let h = read_words(&per_session(dir, e, DECODED_EXT))?;
                row.edits = Some(edit_counts(&r, &h));
            }
            Ok(row)
        })
        .collect()
}

fn evaluate(
    cfg: &RunConfig,
    reference: &Path,
    diar: Option<&Path>,
    align: Option<&Path>,
    wer: Option<&Path>,
    report: &ReportArgs,
) -> Outcome<()> {
    let entries = entries(reference)?;
    let rows = report_rows(cfg, &entries, diar, align, wer, report.group_by)?;
    let csv = report_csv(&rows, report.group_by.is_some());
    match &report.out {
        Some(p) => write_atomic(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
