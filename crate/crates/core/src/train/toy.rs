//! Synthetic speakers: harmonic sources shaped by a per-speaker spectral
//! envelope, for desk-scale training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;
use crate::error::{Error, Result};

const MAX_HZ: f64 = 7600.0;

/// Generative signature of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub f0: f64,
    /// Amplitude of harmonic `k + 1`, spectral tilt and formants included.
    pub harmonics: Vec<f64>,
}

impl SpeakerProfile {
    /// Draws formants, tilt and a per-harmonic profile around the given `f0`.
    pub fn with_f0(f0: f64, rng: &mut ChaCha8Rng) -> Self {
        let tilt = rng.random_range(0.6..1.4);
        let formants = [
            (rng.random_range(300.0..900.0), rng.random_range(80.0..200.0)),
            (rng.random_range(900.0..2400.0), rng.random_range(100.0..250.0)),
            (rng.random_range(2400.0..3600.0), rng.random_range(150.0..350.0)),
        ];
        let n = (MAX_HZ / f0).floor() as usize;
        let harmonics = (1..=n)
            .map(|k| {
                let f = k as f64 * f0;
                let resonance: f64 = formants.iter().map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp()).sum();
                let jitter = rng.random_range(0.5..1.5);
                jitter * (0.05 + resonance) / (k as f64).powf(tilt)
            })
            .collect();
        SpeakerProfile { f0, harmonics }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let f0 = rng.random_range(90.0..260.0);
        Self::with_f0(f0, rng)
    }

    /// One utterance: small f0 offset and vibrato, random harmonic phases,
    /// a syllable-rate envelope and white noise 20 dB below the voice.
    pub fn synthesize(&self, seconds: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let sr = SAMPLE_RATE as f64;
        let len = (seconds * sr).round() as usize;
        let f0 = self.f0 * (1.0 + rng.random_range(-0.02..0.02));
        let (vib_rate, vib_phase) = (rng.random_range(4.0..6.0), rng.random_range(0.0..std::f64::consts::TAU));
        let (env_rate, env_phase) = (rng.random_range(2.0..5.0), rng.random_range(0.0..std::f64::consts::TAU));
        let phases: Vec<(f64, f64)> = self
            .harmonics
            .iter()
            .map(|_| {
                let p: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (p.cos(), p.sin())
            })
            .collect();
        let mut theta = 0.0f64;
        let mut voice = Vec::with_capacity(len);
        for i in 0..len {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + 0.01 * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin());
            theta = (theta + std::f64::consts::TAU * inst / sr) % std::f64::consts::TAU;
            let (z_re, z_im) = (theta.cos(), theta.sin());
            let (mut re, mut im) = (1.0f64, 0.0f64);
            let mut s = 0.0;
            for (k, &a) in self.harmonics.iter().enumerate() {
                (re, im) = (re * z_re - im * z_im, re * z_im + im * z_re);
                if (k + 1) as f64 * inst >= MAX_HZ {
                    break;
                }
                let (c, sn) = phases[k];
                s += a * (im * c + re * sn);
            }
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
            voice.push(s * env);
        }
        let p = voice.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
        let gain = if p > 0.0 { 0.1 / p.sqrt() } else { 0.0 };
        let noise_sd = 0.1 * 10f64.powf(-20.0 / 20.0);
        voice
            .iter()
            .map(|&v| {
                let n: f64 = StandardNormal.sample(rng);
                (v * gain + noise_sd * n) as f32
            })
            .collect()
    }
}

/// Sizes of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub speakers: usize,
    pub utterances: usize,
    pub seconds: f64,
    /// Utterances per speaker kept out of training for verification trials.
    pub held_out: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { speakers: 20, utterances: 10, seconds: 3.0, held_out: 3 }
    }
}

/// Synthetic speakers and their utterances, speaker-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub profiles: Vec<SpeakerProfile>,
    pub utterances: usize,
    pub waves: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

/// Builds a corpus deterministically from `seed`.
pub fn make_toy_corpus(n_speakers: usize, utts: usize, seconds: f64, seed: u64) -> Result<ToyCorpus> {
    if n_speakers < 2 {
        return Err(Error::Config(format!("a toy corpus needs at least 2 speakers, got {n_speakers}")));
    }
    if utts == 0 || !(seconds > 0.0) {
        return Err(Error::Config("toy corpus needs utterances > 0 and seconds > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles: Vec<SpeakerProfile> = (0..n_speakers).map(|_| SpeakerProfile::random(&mut rng)).collect();
    let mut waves = Vec::with_capacity(n_speakers * utts);
    let mut labels = Vec::with_capacity(n_speakers * utts);
    for (s, p) in profiles.iter().enumerate() {
        for _ in 0..utts {
            waves.push(p.synthesize(seconds, &mut rng));
            labels.push(s);
        }
    }
    Ok(ToyCorpus { profiles, utterances: utts, waves, labels })
}

impl ToyCorpus {
    pub fn n_speakers(&self) -> usize {
        self.profiles.len()
    }

    /// Utterance id `spkNNN-uttNNN`.
    pub fn id(&self, index: usize) -> String {
        format!("spk{:03}-utt{:03}", self.labels[index], index % self.utterances)
    }

    /// Indices of training and held-out utterances; the last `held_out`
    /// utterances of every speaker are held out.
    pub fn split(&self, held_out: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if held_out >= self.utterances {
            return Err(Error::Config(format!(
                "cannot hold out {held_out} of {} utterances per speaker",
                self.utterances
            )));
        }
        let keep = self.utterances - held_out;
        Ok((0..self.waves.len()).partition(|&i| i % self.utterances < keep))
    }
}
