//! Log mel filterbank features from 16 kHz mono audio.

mod wav;

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use wav::{read_wav, write_wav, WavEncoding};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "sample rate {sample_rate} Hz is not supported, expected {SAMPLE_RATE} Hz"
            )));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    /// Lower bound applied to mel energies before the logarithm.
    pub log_floor: f64,
    pub mean_norm: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 72,
            frame_len: 400,
            hop: 240,
            n_fft: 512,
            fmin: 20.0,
            fmax: 7600.0,
            sample_rate: SAMPLE_RATE,
            log_floor: 1e-10,
            mean_norm: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "features: need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.n_fft < self.frame_len || self.frame_len == 0 || self.hop == 0 {
            return Err(Error::Config(format!(
                "features: need n_fft >= frame_len > 0 and hop > 0, got n_fft={} frame_len={} hop={}",
                self.n_fft, self.frame_len, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("features: n_mels must be at least 1".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("features: log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced from `len` samples, or `None` when shorter than one frame.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_len).then(|| (len - self.frame_len) / self.hop + 1)
    }

    /// Frame count for an input of `seconds` seconds.
    pub fn frames_for_seconds(&self, seconds: f64) -> Option<usize> {
        self.num_frames((seconds * self.sample_rate as f64).round() as usize)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `(n_mels, n_fft/2 + 1)`, with centers equally spaced
/// in mel between `fmin` and `fmax`. Triangles are linear in the mel domain.
pub fn mel_matrix(cfg: &FeatureConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64))
        .collect();
    let mut out = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (lo + step * m as f64, lo + step * (m + 1) as f64, lo + step * (m + 2) as f64);
        let row = &mut out[m * n_bins..(m + 1) * n_bins];
        for (w, &b) in row.iter_mut().zip(&bin_mel) {
            let rise = (b - left) / (center - left);
            let fall = (right - b) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({:.1}-{:.1} Hz) covers no FFT bin; lower n_mels or raise n_fft",
                mel_to_hz(left),
                mel_to_hz(right)
            )));
        }
    }
    Tensor::new(out, &[cfg.n_mels, n_bins])
}

/// Reusable front end holding the window, FFT plan and filterbank.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Per filter: first nonzero bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        let mel = mel_matrix(&cfg)?;
        let n_bins = cfg.n_bins();
        let filters = mel
            .data()
            .chunks(n_bins)
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        let n = cfg.frame_len;
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(FeatureExtractor { cfg, window, fft, filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    fn check_len(&self, len: usize) -> Result<usize> {
        self.cfg.num_frames(len).ok_or_else(|| {
            Error::Input(format!(
                "waveform has {len} samples, at least {} ({} ms) are required",
                self.cfg.frame_len,
                self.cfg.frame_len * 1000 / self.cfg.sample_rate as usize
            ))
        })
    }

    /// Power spectrum `(n_fft/2 + 1, T)` of non-centered windowed frames.
    pub fn power(&self, samples: &[f32]) -> Result<Tensor<f64>> {
        let frames = self.check_len(samples.len())?;
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("sample {i} of the waveform is not finite")));
        }
        let (n_fft, n_bins) = (self.cfg.n_fft, self.cfg.n_bins());
        let mut out = vec![0.0; n_bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * self.cfg.hop..t * self.cfg.hop + self.cfg.frame_len];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = match frame.get(i) {
                    Some(&s) => Complex::new(s as f64 * self.window[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf[..n_bins].iter().enumerate() {
                out[k * frames + t] = c.norm_sqr();
            }
        }
        Tensor::new(out, &[n_bins, frames])
    }

    /// Log mel energies `(n_mels, T)`, mean normalized per row when enabled.
    pub fn features(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let power = self.power(samples)?;
        let frames = power.dim(1);
        let p = power.data();
        let mut out = vec![0f32; self.cfg.n_mels * frames];
        let mut row = vec![0.0f64; frames];
        for (m, (first, weights)) in self.filters.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            for (j, &w) in weights.iter().enumerate() {
                let bin = &p[(first + j) * frames..(first + j + 1) * frames];
                for (acc, &e) in row.iter_mut().zip(bin) {
                    *acc += w * e;
                }
            }
            for v in row.iter_mut() {
                *v = v.max(self.cfg.log_floor).ln();
            }
            let mean = if self.cfg.mean_norm { row.iter().sum::<f64>() / frames as f64 } else { 0.0 };
            for (o, &v) in out[m * frames..(m + 1) * frames].iter_mut().zip(&row) {
                *o = (v - mean) as f32;
            }
        }
        Tensor::new(out, &[self.cfg.n_mels, frames])
    }
}

pub fn stft_power(wave: &Waveform, cfg: &FeatureConfig) -> Result<Tensor<f64>> {
    FeatureExtractor::new(cfg.clone())?.power(&wave.samples)
}

pub fn extract_features(wave: &Waveform, cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    FeatureExtractor::new(cfg.clone())?.features(&wave.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(hz: f64, len: usize) -> Waveform {
        let s = (0..len).map(|i| (2.0 * PI * hz * i as f64 / 16000.0).cos() as f32).collect();
        Waveform::new(s, 16000).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn frame_count_from_length() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.num_frames(32000), Some(132));
        assert_eq!(cfg.num_frames(400), Some(1));
        assert_eq!(cfg.num_frames(399), None);
        let p = stft_power(&tone(300.0, 32000), &cfg).unwrap();
        assert_eq!(p.shape(), &[257, 132]);
    }

    #[test]
    fn short_input_names_minimum() {
        let err = stft_power(&tone(300.0, 100), &FeatureConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Input(m) if m.contains("400")), "{err}");
    }

    #[test]
    fn non_finite_samples_rejected() {
        let mut x = tone(300.0, 800).samples;
        x[500] = f32::NAN;
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        assert!(matches!(fx.features(&x), Err(Error::Input(m)) if m.contains("500")));
    }

    #[test]
    fn wrong_rate_rejected() {
        assert!(Waveform::new(vec![0.0; 800], 8000).is_err());
    }

    #[test]
    fn silence_has_zero_power_and_zero_features() {
        let cfg = FeatureConfig::default();
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        assert!(stft_power(&w, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
        let raw = extract_features(&w, &FeatureConfig { mean_norm: false, ..cfg.clone() }).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(raw.data().iter().all(|&v| v == floor));
        assert!(extract_features(&w, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_peaks_at_expected_bin_matching_direct_dft() {
        let cfg = FeatureConfig::default();
        let w = tone(1000.0, 4000);
        let p = stft_power(&w, &cfg).unwrap();
        let frames = p.dim(1);
        let col: Vec<f64> = (0..257).map(|k| p.data()[k * frames]).collect();
        let arg = (0..257).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(arg, 32);
        // direct DFT of the first windowed frame
        let win: Vec<f64> = (0..400).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / 400.0).cos()).collect();
        for k in [0usize, 17, 31, 32, 33, 200, 256] {
            let (mut re, mut im) = (0.0, 0.0);
            #[allow(clippy::needless_range_loop)]
            for n in 0..400 {
                let x = w.samples[n] as f64 * win[n];
                let ang = -2.0 * PI * (k * n) as f64 / 512.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let direct = re * re + im * im;
            assert!((direct - col[k]).abs() <= 1e-9 * direct.max(1.0), "bin {k}: {direct} vs {}", col[k]);
        }
    }

    #[test]
    fn mel_scale_values() {
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_geometry() {
        let cfg = FeatureConfig::default();
        let mel = mel_matrix(&cfg).unwrap();
        assert_eq!(mel.shape(), &[72, 257]);
        let d = mel.data();
        assert!(d.iter().all(|&w| w >= 0.0));
        let mut last_center = 0;
        for m in 0..72 {
            let row = &d[m * 257..(m + 1) * 257];
            assert!(row.iter().sum::<f64>() > 0.0);
            let c = (0..257).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(c >= last_center);
            last_center = c;
        }
        for k in 0..257 {
            let f = k as f64 * 16000.0 / 512.0;
            if f >= cfg.fmin && f <= cfg.fmax {
                assert!((0..72).any(|m| d[m * 257 + k] > 0.0), "bin {k} uncovered");
            }
        }
    }

    #[test]
    fn degenerate_filterbank_is_config_error() {
        let cfg = FeatureConfig { n_mels: 400, ..FeatureConfig::default() };
        assert!(matches!(mel_matrix(&cfg), Err(Error::Config(_))));
        let cfg = FeatureConfig { fmax: 9000.0, ..FeatureConfig::default() };
        assert!(matches!(mel_matrix(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn tone_excites_filter_containing_its_bin() {
        let cfg = FeatureConfig { mean_norm: false, ..FeatureConfig::default() };
        let f = extract_features(&tone(1000.0, 4000), &cfg).unwrap();
        let frames = f.dim(1);
        let arg = (0..72).max_by(|&a, &b| f.data()[a * frames].total_cmp(&f.data()[b * frames])).unwrap();
        let mel = mel_matrix(&cfg).unwrap();
        assert!(mel.data()[arg * 257 + 32] > 0.0);
    }

    #[test]
    fn mean_normalized_rows_and_scale_invariance() {
        let cfg = FeatureConfig::default();
        let w = noise(16000, 3);
        let f = extract_features(&w, &cfg).unwrap();
        let frames = f.dim(1);
        for row in f.data().chunks(frames) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / frames as f64;
            assert!(mean.abs() < 1e-5);
        }
        for scale in [0.01f32, 0.3, 1.7] {
            let scaled = Waveform::new(w.samples.iter().map(|s| s * scale).collect(), 16000).unwrap();
            let g = extract_features(&scaled, &cfg).unwrap();
            let diff = f.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(diff < 1e-5, "scale {scale}: {diff}");
        }
        let raw_cfg = FeatureConfig { mean_norm: false, ..cfg };
        let a = extract_features(&w, &raw_cfg).unwrap();
        let b = extract_features(
            &Waveform::new(w.samples.iter().map(|s| s * 0.5).collect(), 16000).unwrap(),
            &raw_cfg,
        )
        .unwrap();
        let shift = (0.25f64).ln() as f32;
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (y - x - shift).abs() < 1e-4));
    }
}
