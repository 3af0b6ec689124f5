//! Run configuration: a fixed registry of `section.key` tunables, layered
//! from defaults, an optional config file and command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use tonguetrack::aligner::{AlignerConfig, ContextMode, MlpConfig};
use tonguetrack::diarizer::{HmmConfig, VadConfig};
use tonguetrack::embedder::{CnnConfig, TrainConfig};
use tonguetrack::session_io::FrameGeometry;
use tonguetrack::synthgen::SynthConfig;

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Inclusive bounds.
    Float(f64, f64),
    /// Lower bound exclusive, upper inclusive.
    PositiveFloat,
    Int(u64, u64),
    Bool,
    Choice(&'static [&'static str]),
    /// Comma-separated values within inclusive bounds.
    FloatList(f64, f64),
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    kind: Kind,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        kind,
    }
}

const INF: f64 = f64::INFINITY;
const MAX: u64 = u64::MAX;

use Kind::*;

pub const KEYS: &[Key] = &[
    key("synth.duration_s", "20", PositiveFloat, "session length in seconds"),
    key("synth.sigma_child", "0.1", PositiveFloat, "ultrasound noise deviation during child speech"),
    key("synth.sigma_other", "0.01", Float(0.0, INF), "ultrasound noise deviation elsewhere"),
    key("synth.therapist_turn_mean_s", "1", PositiveFloat, "mean therapist turn length"),
    key("synth.max_child_words", "2", Int(1, 100), "most prompt words per child turn"),
    key("synth.gap_min_s", "0.25", PositiveFloat, "shortest silence between turns"),
    key("synth.gap_max_s", "0.6", PositiveFloat, "longest silence between turns"),
    key("synth.render_audio", "false", Bool, "render tones instead of a silent recording"),
    key("synth.num_speakers", "4", Int(1, 10_000), "distinct child speaker ids"),
    key("synth.inventory_seed", "0", Int(0, MAX), "seed of the shared phone inventory"),
    key("synth.num_phones", "12", Int(1, 1000), "phone inventory size"),
    key("synth.vocabulary_size", "24", Int(1, 100_000), "vocabulary size"),
    key("synth.sync_offset_s", "0", Float(0.0, INF), "ultrasound start relative to the audio"),
    key("eta.window_s", "0.16", PositiveFloat, "variance window length"),
    key("eta.hop_frames", "1", Int(1, 10_000), "ultrasound frames between windows"),
    key("eta.threshold", "0.5", Float(0.0, 1.0), "normalized activity threshold for child speech"),
    key("vad.threshold", "7", Float(-INF, INF), "speech threshold on shifted log energy"),
    key("vad.offset", "20.79441541679836", Float(-INF, INF), "shift added to raw log energies"),
    key("vad.mean_scale", "0", Float(-INF, INF), "weight of the utterance mean subtracted from scores"),
    key("post.merge_gap_s", "0.1", Float(0.0, INF), "merge same-speaker segments across shorter gaps"),
    key("post.min_duration_s", "0.05", Float(0.0, INF), "drop speech segments shorter than this"),
    key("hmm.states_per_token", "5", Int(1, 100), "emitting states per turn token"),
    key("hmm.iterations", "10", Int(0, 10_000), "embedded training iterations"),
    key("hmm.max_components", "32", Int(1, 100_000), "mixture components per state"),
    key("hmm.split_every", "2", Int(0, 10_000), "iterations between mixture splits"),
    key("hmm.var_floor_ratio", "0.001", PositiveFloat, "variance floor relative to global variance"),
    key("hmm.initial_self_loop", "0.9", Float(0.0, 1.0), "initial self-loop probability"),
    key("hmm.transition_floor", "0.000001", Float(0.0, 1.0), "lower bound on token transitions"),
    key("hmm.filler_passes", "5", Int(0, 1_000), "flat-start passes with obligatory silence between turns"),
    key("cnn.preset", "small", Choice(&["small", "full"]), "network size"),
    key("cnn.num_classes", "11", Int(2, 10_000), "articulation classes"),
    key("cnn.embedding_pre_activation", "true", Bool, "read embeddings before the rectifier"),
    key("cnn.epochs", "10", Int(0, 100_000), "training epochs"),
    key("cnn.batch_size", "16", Int(1, 1_000_000), "mini-batch size"),
    key("cnn.learning_rate", "0.05", PositiveFloat, "SGD step size"),
    key("cnn.max_examples", "4000", Int(1, MAX), "training frames drawn from the corpus"),
    key("align.context", "4", Int(0, 1000), "embedding context size"),
    key("align.context_mode", "symmetric", Choice(&["symmetric", "left-only", "total"]), "embedding context layout"),
    key("align.emissions", "gmm", Choice(&["gmm", "network"]), "state emission model"),
    key("align.iterations", "8", Int(1, 10_000), "Viterbi training iterations"),
    key("align.max_components", "4", Int(1, 100_000), "mixture components per state"),
    key("align.split_every", "2", Int(0, 10_000), "iterations between mixture splits"),
    key("align.var_floor_ratio", "0.001", PositiveFloat, "variance floor relative to global variance"),
    key("align.initial_self_loop", "0.5", Float(0.0, 1.0), "initial self-loop probability"),
    key("align.optional_silence_prob", "0.5", Float(0.0, 1.0), "probability of each optional silence"),
    key("align.self_loop_floor", "0.01", Float(0.0, 0.5), "self-loops stay within [floor, 1 - floor]"),
    key("align.mlp_hidden", "64", Int(1, 100_000), "hidden units of the emission network"),
    key("align.mlp_epochs", "10", Int(0, 100_000), "emission network epochs"),
    key("align.mlp_batch_size", "64", Int(1, 1_000_000), "emission network mini-batch size"),
    key("align.mlp_learning_rate", "0.05", PositiveFloat, "emission network step size"),
    key("combine.alpha", "0.6", Float(0.0, 1.0), "weight of system A in the interpolation"),
    key("combine.alpha_grid", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", FloatList(0.0, 1.0), "weights swept by combine"),
    key("eval.collar_s", "0.1", Float(0.0, INF), "total collar width around reference boundaries"),
];

fn check(kind: Kind, v: &str) -> Result<(), String> {
    let float = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    let within = |x: f64, lo: f64, hi: f64| {
        if x.is_nan() || x < lo || x > hi {
            Err(format!("{x} outside [{lo}, {hi}]"))
        } else {
            Ok(())
        }
    };
    match kind {
        Float(lo, hi) => within(float(v)?, lo, hi),
        PositiveFloat => {
            let x = float(v)?;
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(format!("{x} must be positive"))
            }
        }
        Int(lo, hi) => {
            let x: u64 = v.trim().parse().map_err(|_| format!("`{v}` is not a non-negative integer"))?;
            if x < lo || x > hi {
                Err(format!("{x} outside [{lo}, {hi}]"))
            } else {
                Ok(())
            }
        }
        Bool => v.trim().parse::<bool>().map(|_| ()).map_err(|_| format!("`{v}` is not true or false")),
        Choice(options) => {
            if options.contains(&v.trim()) {
                Ok(())
            } else {
                Err(format!("`{v}` is not one of {}", options.join(", ")))
            }
        }
        FloatList(lo, hi) => {
            let items: Vec<&str> = v.split(',').collect();
            if v.trim().is_empty() {
                return Err("empty list".into());
            }
            items.iter().try_for_each(|s| within(float(s)?, lo, hi))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Validates and stores one value; unknown keys are rejected.
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), String> {
        let k = KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| format!("unknown configuration key `{name}`"))?;
        check(k.kind, value).map_err(|e| format!("{name}: {e}"))?;
        self.values.insert(k.name, value.trim().to_string());
        Ok(())
    }

    /// `KEY=VALUE` from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), String> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("override `{pair}` is not KEY=VALUE"))?;
        self.set(k.trim(), v)
    }

    /// Applies `key = value` lines; a `[section]` header prefixes later keys
    /// with `section.`. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let k = k.trim();
            let full = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&full, v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("configuration key `{name}` is not registered"))
    }

    pub fn f64(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("validated on insert")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.raw(name).parse().expect("validated on insert")
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.raw(name).parse().expect("validated on insert")
    }

    pub fn bool(&self, name: &str) -> bool {
        self.raw(name).parse().expect("validated on insert")
    }

    pub fn str(&self, name: &str) -> &str {
        self.raw(name)
    }

    pub fn f64_list(&self, name: &str) -> Vec<f64> {
        self.raw(name)
            .split(',')
            .map(|s| s.trim().parse().expect("validated on insert"))
            .collect()
    }

    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            inventory_seed: self.u64("synth.inventory_seed"),
            duration_s: self.f64("synth.duration_s"),
            sigma_child: self.f64("synth.sigma_child"),
            sigma_other: self.f64("synth.sigma_other"),
            therapist_turn_mean_s: self.f64("synth.therapist_turn_mean_s"),
            max_child_words: self.usize("synth.max_child_words"),
            gap_min_s: self.f64("synth.gap_min_s"),
            gap_max_s: self.f64("synth.gap_max_s"),
            render_audio: self.bool("synth.render_audio"),
            num_speakers: self.usize("synth.num_speakers"),
            num_phones: self.usize("synth.num_phones"),
            vocabulary_size: self.usize("synth.vocabulary_size"),
            sync_offset_s: self.f64("synth.sync_offset_s"),
            num_classes: self.usize("cnn.num_classes"),
            ..SynthConfig::default()
        }
    }

    pub fn vad(&self) -> VadConfig {
        VadConfig {
            threshold: self.f64("vad.threshold"),
            offset: self.f64("vad.offset"),
            mean_scale: self.f64("vad.mean_scale"),
        }
    }

    pub fn hmm(&self) -> HmmConfig {
        HmmConfig {
            states_per_token: self.usize("hmm.states_per_token"),
            iterations: self.usize("hmm.iterations"),
            max_components: self.usize("hmm.max_components"),
            split_every: self.usize("hmm.split_every"),
            var_floor_ratio: self.f64("hmm.var_floor_ratio"),
            initial_self_loop: self.f64("hmm.initial_self_loop"),
            transition_floor: self.f64("hmm.transition_floor"),
            filler_passes: self.usize("hmm.filler_passes"),
            ..HmmConfig::default()
        }
    }

    pub fn cnn(&self, geometry: FrameGeometry, seed: u64) -> CnnConfig {
        let base = match self.str("cnn.preset") {
            "full" => CnnConfig::default(),
            _ => CnnConfig::small(),
        };
        CnnConfig {
            num_classes: self.usize("cnn.num_classes"),
            embedding_pre_activation: self.bool("cnn.embedding_pre_activation"),
            seed,
            ..base.with_geometry(geometry.scanlines, geometry.echoes)
        }
    }

    pub fn cnn_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.usize("cnn.epochs"),
            batch_size: self.usize("cnn.batch_size"),
            learning_rate: self.f64("cnn.learning_rate"),
            seed,
        }
    }

    pub fn aligner(&self) -> AlignerConfig {
        AlignerConfig {
            iterations: self.usize("align.iterations"),
            max_components: self.usize("align.max_components"),
            split_every: self.usize("align.split_every"),
            var_floor_ratio: self.f64("align.var_floor_ratio"),
            initial_self_loop: self.f64("align.initial_self_loop"),
            optional_silence_prob: self.f64("align.optional_silence_prob"),
            self_loop_floor: self.f64("align.self_loop_floor"),
        }
    }

    pub fn mlp(&self, seed: u64) -> MlpConfig {
        MlpConfig {
            hidden: self.usize("align.mlp_hidden"),
            epochs: self.usize("align.mlp_epochs"),
            batch_size: self.usize("align.mlp_batch_size"),
            learning_rate: self.f64("align.mlp_learning_rate"),
            seed,
        }
    }

    pub fn context_mode(&self) -> ContextMode {
        self.str("align.context_mode").parse().expect("validated on insert")
    }
}

/// Every key with its default, for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (set in --config files or with --set KEY=VALUE):\n");
    let width = KEYS.iter().map(|k| k.name.len() + k.default.len() + 3).max().unwrap_or(0);
    for k in KEYS {
        let left = format!("{} = {}", k.name, k.default);
        let _ = writeln!(s, "  {left:<width$}  {}", k.help);
    }
    s
}
