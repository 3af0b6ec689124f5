use std::fmt::Write as _;
use std::path::Path;

use super::{AudioTrack, FrameGeometry, ParamMap, UltrasoundSequence, RAW_ECHOES, RAW_SCANLINES};
use crate::error::{Error, Result};

/// Parses a `key=value` sidecar; blank lines and `#` comments are skipped.
pub fn parse_sidecar(text: &str) -> Result<ParamMap> {
    let mut map = ParamMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_sidecar(path: &Path) -> Result<ParamMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sidecar(&text)
}

fn param<T: std::str::FromStr>(params: &ParamMap, key: &str) -> Result<Option<T>> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::format(key, format!("cannot parse `{v}`"))),
    }
}

/// Loads a headerless u8 raster, scan-line-major, scaling bytes by 1/255.
pub fn load_ultrasound(path: &Path, params: &ParamMap) -> Result<UltrasoundSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let scanlines = param::<usize>(params, "num_scanlines")?.unwrap_or(RAW_SCANLINES);
    let echoes = param::<usize>(params, "num_echoes")?.unwrap_or(RAW_ECHOES);
    if scanlines == 0 || echoes == 0 {
        return Err(Error::format("num_scanlines", "geometry must be positive"));
    }
    let geometry = FrameGeometry::new(scanlines, echoes);
    let px = geometry.pixels();
    if bytes.is_empty() || bytes.len() % px != 0 {
        let frames = (bytes.len() / px).max(1);
        return Err(Error::dim(
            format!("ultrasound file {} (bytes)", path.display()),
            frames * px,
            bytes.len(),
        ));
    }
    let fps = param::<f64>(params, "fps")?
        .ok_or_else(|| Error::format("fps", "missing from sidecar and metadata"))?;
    let sync = param::<f64>(params, "sync_offset_s")?
        .ok_or_else(|| Error::format("sync_offset_s", "missing from sidecar and metadata"))?;
    let frames = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    UltrasoundSequence::new(geometry, frames, fps, sync)
}

pub fn sidecar_text(seq: &UltrasoundSequence) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "fps={}", seq.fps());
    let _ = writeln!(s, "sync_offset_s={}", seq.sync_offset_s());
    let _ = writeln!(s, "num_scanlines={}", seq.geometry().scanlines);
    let _ = writeln!(s, "num_echoes={}", seq.geometry().echoes);
    s
}

/// Writes the raster and its sidecar. Intensities are quantized to the
/// nearest of 256 levels.
pub fn save_ultrasound(seq: &UltrasoundSequence, raw_path: &Path, sidecar: &Path) -> Result<()> {
    let bytes: Vec<u8> = seq
        .data()
        .iter()
        .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    std::fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
    std::fs::write(sidecar, sidecar_text(seq)).map_err(|e| Error::io(sidecar, e))
}

pub fn load_audio(path: &Path) -> Result<AudioTrack> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "channels",
            format!("{}: expected mono, found {} channels", path.display(), spec.channels),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                "bits_per_sample",
                format!("{}: unsupported {bits}-bit {fmt:?} PCM", path.display()),
            ))
        }
    };
    AudioTrack::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", format!("{}: {other}", path.display())),
    }
}

/// Writes 16-bit mono PCM.
pub fn save_audio(audio: &AudioTrack, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

pub fn load_prompt(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.split_whitespace().map(str::to_string).collect())
}

pub fn save_prompt(words: &[String], path: &Path) -> Result<()> {
    let mut text = words.join(" ");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(fps: &str) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("fps".into(), fps.into());
        p.insert("sync_offset_s".into(), "0".into());
        p
    }

    #[test]
    fn raw_three_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.raw");
        let mut bytes = vec![0u8; 3 * 63 * 412];
        bytes[1] = 255;
        std::fs::write(&path, &bytes).unwrap();
        let seq = load_ultrasound(&path, &params("121.2")).unwrap();
        assert_eq!(seq.num_frames(), 3);
        assert_eq!(seq.geometry(), FrameGeometry::RAW);
        assert_eq!(seq.frame(0)[1], 1.0);
        assert_eq!(seq.frame(0)[0], 0.0);
    }

    #[test]
    fn raw_size_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.raw");
        std::fs::write(&path, vec![0u8; 63 * 412 + 5]).unwrap();
        match load_ultrasound(&path, &params("121.2")).unwrap_err() {
            Error::Dimension { expected, found, .. } => {
                assert_eq!(expected, 63 * 412);
                assert_eq!(found, 63 * 412 + 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_or_bad_fps_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.raw");
        std::fs::write(&path, vec![0u8; 63 * 412]).unwrap();
        let err = load_ultrasound(&path, &ParamMap::new()).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "fps"));
        let err = load_ultrasound(&path, &params("fast")).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "fps"));
    }

    #[test]
    fn ultrasound_bytes_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let g = FrameGeometry::new(3, 5);
        let bytes: Vec<u8> = (0..45u32).map(|i| (i * 37 % 256) as u8).collect();
        let frames = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        let seq = UltrasoundSequence::new(g, frames, 121.2, 0.25).unwrap();
        let raw = dir.path().join("u.raw");
        let side = dir.path().join("u.param");
        save_ultrasound(&seq, &raw, &side).unwrap();
        assert_eq!(std::fs::read(&raw).unwrap(), bytes);
        let back = load_ultrasound(&raw, &load_sidecar(&side).unwrap()).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| (((i * 331) % 2000) as f64 - 983.0) / 32768.0).collect();
        let audio = AudioTrack::new(samples, 16000).unwrap();
        save_audio(&audio, &path).unwrap();
        assert_eq!(load_audio(&path).unwrap(), audio);
    }

    #[test]
    fn malformed_wav_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        std::fs::write(&path, b"not a wave file at all").unwrap();
        assert!(matches!(load_audio(&path), Err(Error::Format { .. })));
    }
}
