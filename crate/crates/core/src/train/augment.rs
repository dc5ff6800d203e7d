use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Resampling factors of speed perturbation.
pub const SPEED_FACTORS: [f64; 2] = [0.9, 1.1];

/// Resamples by `factor` with linear interpolation and returns the label
/// offset of the new speaker identity: `n_speakers` for 0.9 and
/// `2 * n_speakers` for 1.1.
pub fn speed_perturb(wave: &[f32], factor: f64, n_speakers: usize) -> Result<(Vec<f32>, usize)> {
    let offset = if factor == SPEED_FACTORS[0] {
        n_speakers
    } else if factor == SPEED_FACTORS[1] {
        2 * n_speakers
    } else {
        return Err(Error::Config(format!("speed factor must be 0.9 or 1.1, got {factor}")));
    };
    Ok((resample_linear(wave, factor), offset))
}

/// Output sample `i` reads the input at position `i * factor`.
pub fn resample_linear(wave: &[f32], factor: f64) -> Vec<f32> {
    let len = (wave.len() as f64 / factor).round() as usize;
    if wave.is_empty() {
        return Vec::new();
    }
    let last = wave.len() - 1;
    (0..len)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let a = wave[j] as f64;
            let b = wave[(j + 1).min(last)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len().max(1) as f64
}

/// Gain applied to noise of power `noise_power` so the mix reaches `snr_db`.
pub fn snr_scale(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` (looped to the signal length) at the given SNR.
/// An infinite SNR returns the signal unchanged.
pub fn mix_at_snr(signal: &[f32], noise: &[f32], snr_db: f64, offset: usize) -> Result<Vec<f32>> {
    if snr_db == f64::INFINITY {
        return Ok(signal.to_vec());
    }
    if noise.is_empty() {
        return Err(Error::Config("noise source is empty".into()));
    }
    let looped: Vec<f32> = (0..signal.len()).map(|i| noise[(offset + i) % noise.len()]).collect();
    let (ps, pn) = (power(signal), power(&looped));
    if pn == 0.0 || ps == 0.0 {
        return Ok(signal.to_vec());
    }
    let g = snr_scale(ps, pn, snr_db);
    Ok(signal.iter().zip(&looped).map(|(&s, &n)| (s as f64 + g * n as f64) as f32).collect())
}

/// First `x.len()` samples of the full convolution.
fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| h.iter().enumerate().take(i + 1).map(|(k, &hk)| hk * x[i - k]).sum())
        .collect()
}

fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Convolves with `rir` scaled to unit peak, keeps the signal length and
/// restores the input energy.
pub fn reverberate(signal: &[f32], rir: &[f32]) -> Result<Vec<f32>> {
    let peak = rir.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Config("impulse response is empty or silent".into()));
    }
    let h: Vec<f64> = rir.iter().map(|&v| (v / peak) as f64).collect();
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let out = if h.len() <= 64 { convolve_direct(&x, &h) } else { convolve_fft(&x, &h) };
    let e_in: f64 = signal.iter().map(|&v| v as f64 * v as f64).sum();
    let e_out: f64 = out.iter().map(|v| v * v).sum();
    let g = if e_out > 0.0 { (e_in / e_out).sqrt() } else { 1.0 };
    Ok(out.iter().map(|&v| (v * g) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Noise,
    Music,
    Babble,
    Reverb,
}

/// Augmentation probabilities, SNR ranges and optional source directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub noise_prob: f64,
    pub noise_snr: [f64; 2],
    pub music_prob: f64,
    pub music_snr: [f64; 2],
    pub babble_prob: f64,
    pub babble_snr: [f64; 2],
    pub reverb_prob: f64,
    /// WAV files used instead of the synthetic noise, music and babble.
    pub noise_dir: Option<PathBuf>,
    /// WAV impulse responses used instead of the synthetic ones.
    pub rir_dir: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            noise_prob: 0.2,
            noise_snr: [0.0, 15.0],
            music_prob: 0.2,
            music_snr: [5.0, 15.0],
            babble_prob: 0.2,
            babble_snr: [13.0, 20.0],
            reverb_prob: 0.2,
            noise_dir: None,
            rir_dir: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_prob", self.noise_prob),
            ("music_prob", self.music_prob),
            ("babble_prob", self.babble_prob),
            ("reverb_prob", self.reverb_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, [lo, hi]) in [("noise_snr", self.noise_snr), ("music_snr", self.music_snr), ("babble_snr", self.babble_snr)] {
            if !(lo <= hi) || lo.is_nan() {
                return Err(Error::Config(format!("train.augment.{name} must be [low, high] with low <= high")));
            }
        }
        Ok(())
    }
}

/// Noise and impulse-response pools used by [`Augmenter`].
#[derive(Debug, Clone)]
pub struct Sources {
    pub noise: Vec<Vec<f32>>,
    pub music: Vec<Vec<f32>>,
    pub babble: Vec<Vec<f32>>,
    pub rir: Vec<Vec<f32>>,
}

fn wavs_in(dir: &Path) -> Result<Vec<Vec<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("{}: no .wav files to use as augmentation sources", dir.display())));
    }
    paths.iter().map(|p| read_wav(p).map(|w| w.samples)).collect()
}

impl Sources {
    /// Synthetic pools: white and brown noise, tone mixtures, overlapping
    /// harmonic voices, and exponentially decaying noise impulse responses.
    pub fn synthetic(rng: &mut ChaCha8Rng) -> Self {
        let sr = SAMPLE_RATE as f64;
        let len = 3 * SAMPLE_RATE as usize;
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let mut noise = Vec::new();
        for kind in 0..4 {
            let mut acc = 0.0;
            let v: Vec<f32> = (0..len)
                .map(|_| {
                    let w = gauss(rng);
                    if kind % 2 == 0 {
                        w as f32
                    } else {
                        acc = 0.98 * acc + w;
                        acc as f32
                    }
                })
                .collect();
            noise.push(v);
        }
        let music = (0..4)
            .map(|_| {
                let notes: Vec<(f64, f64)> = (0..6)
                    .map(|_| (110.0 * 2f64.powf(rng.random_range(0..36) as f64 / 12.0), rng.random_range(0.2..1.0)))
                    .collect();
                let note_len = rng.random_range(0.15..0.5);
                (0..len)
                    .map(|i| {
                        let t = i as f64 / sr;
                        let step = (t / note_len) as usize;
                        let (f, a) = notes[step % notes.len()];
                        let env = (-(t % note_len) * 4.0).exp();
                        (a * env * ((2.0 * std::f64::consts::PI * f * t).sin() + 0.3 * (4.0 * std::f64::consts::PI * f * t).sin())) as f32
                    })
                    .collect()
            })
            .collect();
        let babble = (0..4)
            .map(|_| {
                let voices: Vec<(f64, f64)> =
                    (0..rng.random_range(3..7)).map(|_| (rng.random_range(90.0..260.0), rng.random_range(0.0..std::f64::consts::TAU))).collect();
                (0..len)
                    .map(|i| {
                        let t = i as f64 / sr;
                        let mut s = 0.0;
                        for (vi, &(f0, ph)) in voices.iter().enumerate() {
                            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (3.0 + vi as f64) * t + ph).sin();
                            for k in 1..=20 {
                                let f = f0 * k as f64;
                                if f > 4000.0 {
                                    break;
                                }
                                s += env * (2.0 * std::f64::consts::PI * f * t + ph * k as f64).sin() / k as f64;
                            }
                        }
                        s as f32
                    })
                    .collect()
            })
            .collect();
        let rir = (0..4)
            .map(|_| {
                let rt60 = rng.random_range(0.2..0.8);
                let n = (0.3 * sr) as usize;
                let mut h: Vec<f32> = (0..n)
                    .map(|i| (gauss(rng) * (-6.9 * i as f64 / (rt60 * sr)).exp()) as f32)
                    .collect();
                h[0] = 1.0;
                h
            })
            .collect();
        Sources { noise, music, babble, rir }
    }

    /// Synthetic pools, with directory contents substituted where configured.
    pub fn from_config(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut s = Self::synthetic(rng);
        if let Some(dir) = &cfg.noise_dir {
            let files = wavs_in(dir)?;
            s.noise = files.clone();
            s.music = files.clone();
            s.babble = files;
        }
        if let Some(dir) = &cfg.rir_dir {
            s.rir = wavs_in(dir)?;
        }
        Ok(s)
    }

    fn pool(&self, kind: AugKind) -> &[Vec<f32>] {
        match kind {
            AugKind::Noise => &self.noise,
            AugKind::Music => &self.music,
            AugKind::Babble => &self.babble,
            AugKind::Reverb => &self.rir,
        }
    }
}

/// Applies one augmentation of `kind` with a randomly chosen source.
pub fn augment(wave: &[f32], sources: &Sources, kind: AugKind, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let pool = sources.pool(kind);
    if pool.is_empty() {
        return Err(Error::Config(format!("no sources for {kind:?} augmentation")));
    }
    let src = &pool[rng.random_range(0..pool.len())];
    match kind {
        AugKind::Reverb => reverberate(wave, src),
        _ => {
            let offset = if src.is_empty() { 0 } else { rng.random_range(0..src.len()) };
            mix_at_snr(wave, src, snr_db, offset)
        }
    }
}

/// Random augmentation chain of the training recipe.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub sources: Sources,
}

impl Augmenter {
    pub fn new(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Augmenter { cfg: cfg.clone(), sources: Sources::from_config(cfg, rng)? })
    }

    /// Reverb, then each additive kind, each with its own probability.
    pub fn apply(&self, wave: Vec<f32>, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        if !self.cfg.enabled {
            return Ok(wave);
        }
        let c = &self.cfg;
        let mut w = wave;
        if rng.random_bool(c.reverb_prob) {
            w = augment(&w, &self.sources, AugKind::Reverb, f64::INFINITY, rng)?;
        }
        for (kind, p, [lo, hi]) in [
            (AugKind::Noise, c.noise_prob, c.noise_snr),
            (AugKind::Music, c.music_prob, c.music_snr),
            (AugKind::Babble, c.babble_prob, c.babble_snr),
        ] {
            if rng.random_bool(p) {
                let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
                w = augment(&w, &self.sources, kind, snr, rng)?;
            }
        }
        Ok(w)
    }
}
