use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ParamMap, SessionPaths};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str =
    "session_id,speaker_id,stage,ultrasound_path,audio_or_feature_path,segments_path,prompt_path";

/// One corpus session. Relative paths in the file are resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub session_id: String,
    pub speaker_id: String,
    pub stage: String,
    pub ultrasound: PathBuf,
    /// A `.wav` recording or a feature matrix.
    pub audio_or_features: PathBuf,
    pub segments: PathBuf,
    pub prompt: PathBuf,
}

impl ManifestEntry {
    pub fn is_audio(&self) -> bool {
        self.audio_or_features
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
    }

    /// Directory holding the session's ultrasound file.
    pub fn dir(&self) -> PathBuf {
        self.ultrasound.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Session files; a feature-only entry takes its recording from
    /// `audio.wav` beside the ultrasound.
    pub fn session_paths(&self) -> SessionPaths {
        let audio = if self.is_audio() {
            self.audio_or_features.clone()
        } else {
            self.dir().join("audio.wav")
        };
        SessionPaths {
            ultrasound: self.ultrasound.clone(),
            params: None,
            audio,
            prompt: self.prompt.clone(),
            reference: Some(self.segments.clone()),
        }
    }

    /// Identifiers in the form `load_session` accepts as metadata.
    pub fn meta(&self) -> ParamMap {
        [
            ("session_id", &self.session_id),
            ("speaker_id", &self.speaker_id),
            ("stage", &self.stage),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
    }
}

fn field_ok(s: &str) -> bool {
    !s.contains([',', '\n', '\r'])
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

/// Paths are written relative to `base` where they lie below it.
pub fn manifest_to_string(entries: &[ManifestEntry], base: &Path) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let fields = [
            e.session_id.clone(),
            e.speaker_id.clone(),
            e.stage.clone(),
            rel(&e.ultrasound, base),
            rel(&e.audio_or_features, base),
            rel(&e.segments, base),
            rel(&e.prompt, base),
        ];
        if let Some(f) = fields.iter().find(|f| !field_ok(f)) {
            return Err(Error::format("manifest", format!("field `{f}` contains a separator")));
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    Ok(out)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        Some((i, _)) => {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected header `{MANIFEST_HEADER}`"),
            })
        }
        None => return Err(Error::EmptyRequest("manifest is empty".into())),
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 7 fields, found {}", f.len()),
            });
        }
        if f[0].is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty session id".into(),
            });
        }
        let path = |s: &str| base.join(s);
        entries.push(ManifestEntry {
            session_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            stage: f[2].to_string(),
            ultrasound: path(f[3]),
            audio_or_features: path(f[4]),
            segments: path(f[5]),
            prompt: path(f[6]),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyRequest("manifest lists no sessions".into()));
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let text = manifest_to_string(entries, path.parent().unwrap_or(Path::new("")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(base: &Path, id: &str) -> ManifestEntry {
        let d = base.join(id);
        ManifestEntry {
            session_id: id.into(),
            speaker_id: "spk0".into(),
            stage: "BL".into(),
            ultrasound: d.join("ultrasound.raw"),
            audio_or_features: d.join("features.bin"),
            segments: d.join("reference.seg"),
            prompt: d.join("prompt.txt"),
        }
    }

    #[test]
    fn round_trip_with_relative_paths() {
        let base = Path::new("/data/corpus");
        let entries = vec![entry(base, "s000"), entry(base, "s001")];
        let text = manifest_to_string(&entries, base).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("s000,spk0,BL,s000/ultrasound.raw,"));
        assert_eq!(parse_manifest(&text, base).unwrap(), entries);
    }

    #[test]
    fn session_paths_for_feature_entries() {
        let e = entry(Path::new("c"), "s1");
        assert!(!e.is_audio());
        assert_eq!(e.session_paths().audio, Path::new("c/s1/audio.wav"));
        assert_eq!(e.meta()["stage"], "BL");
    }

    #[test]
    fn malformed_manifests() {
        let base = Path::new("");
        assert!(matches!(parse_manifest("", base), Err(Error::EmptyRequest(_))));
        assert!(matches!(parse_manifest("a,b\n", base), Err(Error::Parse { line: 1, .. })));
        let bad = format!("{MANIFEST_HEADER}\ns0,spk,BL,a,b,c\n");
        assert!(matches!(parse_manifest(&bad, base), Err(Error::Parse { line: 2, .. })));
        let mut e = entry(base, "s0");
        e.stage = "a,b".into();
        assert!(manifest_to_string(&[e], base).is_err());
    }
}
