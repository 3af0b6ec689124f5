use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{numbered_labels, FeatureMatrix, DEFAULT_FRAME_LENGTH_S, DEFAULT_FRAME_SHIFT_S, ENERGY_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::session_io::AudioTrack;

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub num_ceps: usize,
    pub num_filters: usize,
    pub preemphasis: f64,
    pub frame_length_s: f64,
    pub frame_shift_s: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub high_hz: Option<f64>,
    /// Floor applied to mel energies before the log.
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_ceps: 20,
            num_filters: 23,
            preemphasis: 0.97,
            frame_length_s: DEFAULT_FRAME_LENGTH_S,
            frame_shift_s: DEFAULT_FRAME_SHIFT_S,
            low_hz: 20.0,
            high_hz: None,
            energy_floor: ENERGY_FLOOR,
        }
    }
}

pub(crate) struct Framing {
    pub length: usize,
    pub shift: usize,
    pub count: usize,
}

pub(crate) fn framing(num_samples: usize, sample_rate: u32, length_s: f64, shift_s: f64) -> Result<Framing> {
    let length = (length_s * sample_rate as f64).round() as usize;
    let shift = (shift_s * sample_rate as f64).round() as usize;
    if length == 0 || shift == 0 {
        return Err(Error::Range("frame length and shift must span at least one sample".into()));
    }
    if num_samples < length {
        return Err(Error::InsufficientData(format!(
            "{num_samples} samples, one frame needs {length}"
        )));
    }
    Ok(Framing {
        length,
        shift,
        count: (num_samples - length) / shift + 1,
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale, evaluated on FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per filter: first bin and weights for consecutive bins.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_filters: usize, fft_size: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= low_hz && low_hz < high_hz && high_hz <= nyquist) {
            return Err(Error::Range(format!(
                "filterbank edges {low_hz}..{high_hz} Hz invalid for Nyquist {nyquist}"
            )));
        }
        let lo = hz_to_mel(low_hz);
        let hi = hz_to_mel(high_hz);
        let step = (hi - lo) / (num_filters + 1) as f64;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut filters = Vec::with_capacity(num_filters);
        let mut centers_hz = Vec::with_capacity(num_filters);
        for m in 0..num_filters {
            let left = lo + m as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=fft_size / 2 {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Ok(Self { filters, centers_hz })
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Weight of filter `m` at FFT bin `k`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (first, w) = &self.filters[m];
        if k < *first {
            0.0
        } else {
            w.get(k - first).copied().unwrap_or(0.0)
        }
    }

    /// Filter outputs for a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(first, w)| w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub(crate) struct SpectrumAnalyzer {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    window: Vec<f64>,
    buf: Vec<Complex<f64>>,
    pub fft_size: usize,
    preemphasis: f64,
}

impl SpectrumAnalyzer {
    pub fn new(frame_length: usize, preemphasis: f64) -> Self {
        let fft_size = frame_length.next_power_of_two();
        let window = (0..frame_length)
            .map(|n| {
                if frame_length == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_length - 1) as f64).cos()
                }
            })
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            window,
            buf: vec![Complex::new(0.0, 0.0); fft_size],
            fft_size,
            preemphasis,
        }
    }

    /// Pre-emphasis, Hamming window, one-sided power spectrum.
    pub fn power(&mut self, frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        for c in self.buf.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        for i in 0..n {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let v = frame[i] - self.preemphasis * prev;
            self.buf[i] = Complex::new(v * self.window[i], 0.0);
        }
        self.fft.process(&mut self.buf);
        self.buf[..=self.fft_size / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Orthonormal DCT-II except coefficient 0, which is the plain mean of the
/// log mel energies.
fn dct_rows(num_ceps: usize, num_filters: usize) -> Vec<Vec<f64>> {
    let m = num_filters as f64;
    (0..num_ceps)
        .map(|i| {
            let scale = if i == 0 { 1.0 / m } else { (2.0 / m).sqrt() };
            (0..num_filters)
                .map(|j| scale * (PI * i as f64 * (j as f64 + 0.5) / m).cos())
                .collect()
        })
        .collect()
}

pub fn compute_mfcc(audio: &AudioTrack, config: &MfccConfig) -> Result<FeatureMatrix> {
    if config.num_ceps == 0 || config.num_ceps > config.num_filters {
        return Err(Error::Range(format!(
            "num_ceps {} must be in 1..={}",
            config.num_ceps, config.num_filters
        )));
    }
    let fr = framing(
        audio.samples.len(),
        audio.sample_rate,
        config.frame_length_s,
        config.frame_shift_s,
    )?;
    let mut analyzer = SpectrumAnalyzer::new(fr.length, config.preemphasis);
    let high = config.high_hz.unwrap_or(audio.sample_rate as f64 / 2.0);
    let bank = MelFilterbank::new(
        config.num_filters,
        analyzer.fft_size,
        audio.sample_rate,
        config.low_hz,
        high,
    )?;
    let dct = dct_rows(config.num_ceps, config.num_filters);
    let mut out = Matrix::zeros(fr.count, config.num_ceps);
    for t in 0..fr.count {
        let start = t * fr.shift;
        let power = analyzer.power(&audio.samples[start..start + fr.length]);
        let log_mel: Vec<f64> = bank
            .apply(&power)
            .into_iter()
            .map(|e| e.max(config.energy_floor).ln())
            .collect();
        let row = out.row_mut(t);
        for (c, basis) in row.iter_mut().zip(&dct) {
            *c = basis.iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
    }
    FeatureMatrix::new(
        out,
        config.frame_shift_s,
        config.frame_length_s,
        numbered_labels("mfcc", config.num_ceps),
    )
}

/// `ln(sum of squared samples + 1e-10)` per frame on the MFCC clock.
pub fn frame_log_energy(audio: &AudioTrack, frame_length_s: f64, frame_shift_s: f64) -> Result<Vec<f64>> {
    let fr = framing(audio.samples.len(), audio.sample_rate, frame_length_s, frame_shift_s)?;
    Ok((0..fr.count)
        .map(|t| {
            let s = &audio.samples[t * fr.shift..t * fr.shift + fr.length];
            (s.iter().map(|x| x * x).sum::<f64>() + ENERGY_FLOOR).ln()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, amp: f64) -> AudioTrack {
        let n = (seconds * 16000.0) as usize;
        AudioTrack::new(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let m = compute_mfcc(&tone(440.0, 1.0, 0.3), &MfccConfig::default()).unwrap();
        assert_eq!(m.num_frames(), 98);
        assert_eq!(m.dim(), 20);
        assert_eq!(m.column_labels()[0], "mfcc_0");
    }

    #[test]
    fn silence_sits_at_log_floor() {
        let audio = AudioTrack::new(vec![0.0; 4000], 16000).unwrap();
        let m = compute_mfcc(&audio, &MfccConfig::default()).unwrap();
        let floor = ENERGY_FLOOR.ln();
        for t in 0..m.num_frames() {
            let r = m.row(t);
            assert!((r[0] - floor).abs() < 1e-9);
            assert!(r[1..].iter().all(|c| c.abs() < 1e-6));
        }
    }

    #[test]
    fn short_audio_rejected() {
        let audio = AudioTrack::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(
            compute_mfcc(&audio, &MfccConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn deterministic() {
        let a = tone(300.0, 0.5, 0.2);
        let c = MfccConfig::default();
        assert_eq!(compute_mfcc(&a, &c).unwrap(), compute_mfcc(&a, &c).unwrap());
    }

    /// Direct O(N^2) DFT and an independently evaluated triangle filter.
    fn brute_filter_energies(frame: &[f64], num_filters: usize) -> Vec<f64> {
        let n = frame.len();
        let nfft = n.next_power_of_two();
        let mut x = vec![0.0; nfft];
        for i in 0..n {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            x[i] = (frame[i] - 0.97 * prev) * w;
        }
        let power: Vec<f64> = (0..=nfft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * k as f64 * i as f64 / nfft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
        let (lo, hi) = (mel(20.0), mel(8000.0));
        let step = (hi - lo) / (num_filters + 1) as f64;
        (0..num_filters)
            .map(|m| {
                let (l, c, r) = (lo + m as f64 * step, lo + (m + 1) as f64 * step, lo + (m + 2) as f64 * step);
                power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let z = mel(k as f64 * 16000.0 / nfft as f64);
                        let w = if z > l && z <= c {
                            (z - l) / (c - l)
                        } else if z > c && z < r {
                            (r - z) / (r - c)
                        } else {
                            0.0
                        };
                        w * p
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn sine_at_filter_center_concentrates_energy() {
        let bank = MelFilterbank::new(23, 512, 16000, 20.0, 8000.0).unwrap();
        for m in [8usize, 12, 18] {
            let f = bank.centers_hz()[m];
            let audio = tone(f, 0.025, 0.5);
            let mut analyzer = SpectrumAnalyzer::new(400, 0.97);
            let energies = bank.apply(&analyzer.power(&audio.samples[..400]));
            let oracle = brute_filter_energies(&audio.samples[..400], 23);
            for (a, b) in energies.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            }
            let best = (0..23).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
            assert_eq!(best, m);
            let others = energies.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, e)| *e);
            assert!(others.fold(0.0f64, f64::max) * 2.0 < energies[m]);
        }
    }

    #[test]
    fn energy_floor_and_scaling() {
        let zeros = AudioTrack::new(vec![0.0; 800], 16000).unwrap();
        let e = frame_log_energy(&zeros, 0.025, 0.01).unwrap();
        assert!(e.iter().all(|&v| v == ENERGY_FLOOR.ln()));

        let a = tone(250.0, 0.2, 0.3);
        let doubled = AudioTrack::new(a.samples.iter().map(|x| 2.0 * x).collect(), 16000).unwrap();
        let e1 = frame_log_energy(&a, 0.025, 0.01).unwrap();
        let e2 = frame_log_energy(&doubled, 0.025, 0.01).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert!((y - x - 4f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_matches_direct_sum() {
        let samples: Vec<f64> = (0..1234).map(|i| (((i * 7919) % 1000) as f64 / 1000.0) - 0.5).collect();
        let audio = AudioTrack::new(samples.clone(), 16000).unwrap();
        let e = frame_log_energy(&audio, 0.025, 0.01).unwrap();
        assert_eq!(e.len(), (1234 - 400) / 160 + 1);
        for (t, v) in e.iter().enumerate() {
            let mut s = 0.0;
            for x in &samples[t * 160..t * 160 + 400] {
                s += x * x;
            }
            assert_eq!(*v, (s + 1e-10).ln());
        }
    }
}
