//! Two-stage training: pretraining with a rising margin, then large-margin
//! finetuning on longer crops.

mod augment;
mod optim;
mod toy;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, FeatureExtractor, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::loss::{ClassifierHead, Stage};
use crate::metrics::{cosine_score, eer, ScoreSet};
use crate::model::Model;
use crate::nn::{Mode, Module, Param};
use crate::tensor::{Float, Tensor};

pub use augment::{
    augment, mix_at_snr, resample_linear, reverberate, snr_scale, speed_perturb, AugKind, AugmentConfig, Augmenter,
    Sources, SPEED_FACTORS,
};
pub use optim::{lr_schedule, Sgd};
pub use toy::{make_toy_corpus, SpeakerProfile, ToyConfig, ToyCorpus};

/// Optimizer, schedule and data settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Crop length; 2 s for pretraining and 6 s for finetuning when unset.
    pub crop_seconds: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adds 0.9x and 1.1x resampled copies as new speakers (pretraining only).
    pub speed_perturb: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub toy: ToyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            crop_seconds: None,
            epochs: 60,
            batch_size: 32,
            lr_max: 0.1,
            lr_min: 1e-5,
            warmup_epochs: 6.0,
            momentum: 0.9,
            weight_decay: 2e-5,
            speed_perturb: true,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            toy: ToyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn crop(&self) -> f64 {
        self.crop_seconds.unwrap_or(match self.stage {
            Stage::Pretrain => 2.0,
            Stage::Lm => 6.0,
        })
    }

    /// Speed perturbation is never used in the finetuning stage.
    pub fn uses_speed_perturb(&self) -> bool {
        self.speed_perturb && self.stage == Stage::Pretrain
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!("train.warmup_epochs ({}) must be below train.epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.crop() > 0.0) {
            return bad(format!("train.crop_seconds must be positive, got {}", self.crop()));
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2 for batch statistics".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 <= train.lr_min <= train.lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("train.momentum must lie in [0, 1) and train.weight_decay be >= 0".into());
        }
        self.augment.validate()
    }
}

/// Labelled waveforms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub waves: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_speakers: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    /// The given utterances of a toy corpus.
    pub fn from_toy(corpus: &ToyCorpus, indices: &[usize]) -> Self {
        Dataset {
            ids: indices.iter().map(|&i| corpus.id(i)).collect(),
            waves: indices.iter().map(|&i| corpus.waves[i].clone()).collect(),
            labels: indices.iter().map(|&i| corpus.labels[i]).collect(),
            n_speakers: corpus.n_speakers(),
        }
    }

    /// One subdirectory per speaker holding `.wav` files; both sorted by name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let list = |d: &Path| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = std::fs::read_dir(d)
                .map_err(|e| Error::Input(format!("{}: {e}", d.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            v.sort();
            Ok(v)
        };
        let mut data = Dataset::default();
        for spk in list(dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = spk.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let files: Vec<PathBuf> =
                list(&spk)?.into_iter().filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))).collect();
            if files.is_empty() {
                continue;
            }
            for f in files {
                let stem = f.file_stem().unwrap_or_default().to_string_lossy();
                data.ids.push(format!("{name}/{stem}"));
                data.waves.push(read_wav(&f)?.samples);
                data.labels.push(data.n_speakers);
            }
            data.n_speakers += 1;
        }
        if data.n_speakers < 2 {
            return Err(Error::Input(format!("{}: need at least 2 speaker directories with .wav files", dir.display())));
        }
        Ok(data)
    }

    /// Number of classifier classes the training stage needs.
    pub fn classes(&self, cfg: &TrainConfig) -> usize {
        if cfg.uses_speed_perturb() {
            3 * self.n_speakers
        } else {
            self.n_speakers
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { epoch: usize, step: usize, loss: f64, lr: f64, margin: f64 },
    Epoch { epoch: usize, steps: usize, loss: f64, lr: f64, margin: f64 },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Per-epoch mean losses of a finished run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Independent random streams of one run.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Stream ids; model and classifier initialization use the seed directly.
const STREAM_ORDER: u64 = 1;
const STREAM_CROP: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// `len` samples starting at `start`, looping the wave when it is shorter.
fn crop(wave: &[f32], len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if wave.len() >= len {
        let start = rng.random_range(0..=wave.len() - len);
        wave[start..start + len].to_vec()
    } else {
        wave.iter().cycle().take(len).copied().collect()
    }
}

/// Trainable parameters of the model followed by those of the head.
pub fn trainable_params<'a, T: Float>(model: &'a Model<T>, head: &'a ClassifierHead<T>) -> Vec<&'a Param<T>> {
    model
        .named_params()
        .into_iter()
        .chain(head.named_params())
        .filter(|(_, p)| p.is_trainable())
        .map(|(_, p)| p)
        .collect()
}

/// Runs one training stage in place.
///
/// `on_record` sees every step and epoch record as it is produced; an error
/// from it stops training.
pub fn train<T: Float>(
    model: &Model<T>,
    head: &ClassifierHead<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    features: &FeatureExtractor,
    on_record: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!("{} training utterances for a batch size of {}", data.len(), cfg.batch_size)));
    }
    let classes = data.classes(cfg);
    if head.n_classes < classes {
        return Err(Error::Config(format!("classifier has {} classes, the data needs {classes}", head.n_classes)));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= data.n_speakers) {
        return Err(Error::Input(format!("label {bad} out of range for {} speakers", data.n_speakers)));
    }
    let crop_len = (cfg.crop() * SAMPLE_RATE as f64).round() as usize;
    let (mut order_rng, mut crop_rng, mut aug_rng) =
        (stream(cfg.seed, STREAM_ORDER), stream(cfg.seed, STREAM_CROP), stream(cfg.seed, STREAM_AUGMENT));
    let augmenter = Augmenter::new(&cfg.augment, &mut aug_rng)?;
    let schedule = head.cfg.schedule();
    let params = trainable_params(model, head);
    let mut opt = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let steps = data.len() / cfg.batch_size;
    let n_mels = features.config().n_mels;
    let mut summary = TrainSummary::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let (mut lr, mut margin) = (0.0, 0.0);
        for step in 0..steps {
            let at = epoch as f64 + step as f64 / steps as f64;
            lr = lr_schedule(at, cfg.lr_min, cfg.lr_max, cfg.warmup_epochs, cfg.epochs as f64);
            margin = schedule.at(at, cfg.stage);
            let batch = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let mut feats = Vec::new();
            let mut labels = Vec::with_capacity(batch.len());
            let mut frames = 0;
            for &i in batch {
                let mut wave = data.waves[i].as_slice();
                let mut label = data.labels[i];
                let perturbed;
                if cfg.uses_speed_perturb() {
                    let pick = crop_rng.random_range(0..3);
                    if pick > 0 {
                        let (w, off) = speed_perturb(wave, SPEED_FACTORS[pick - 1], data.n_speakers)?;
                        perturbed = w;
                        wave = &perturbed;
                        label += off;
                    }
                }
                let w = augmenter.apply(crop(wave, crop_len, &mut crop_rng), &mut aug_rng)?;
                let f = features.features(&w)?;
                frames = f.dim(1);
                feats.extend(f.data().iter().map(|&v| T::of(v as f64)));
                labels.push(label);
            }
            let x = Tensor::new(feats, &[batch.len(), n_mels, frames])?;
            let emb = model.forward(&x, Mode::Train)?;
            let loss = head.loss(&emb, &labels, margin)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {}, batch {}, lr {lr:e}",
                    epoch + 1,
                    step + 1
                )));
            }
            loss.backward()?;
            opt.step(&params, lr)?;
            total += value;
            summary.step_losses.push(value);
            on_record(&LogRecord::Step { epoch: epoch + 1, step: step + 1, loss: value, lr, margin })?;
        }
        let mean = total / steps as f64;
        summary.epoch_losses.push(mean);
        on_record(&LogRecord::Epoch { epoch: epoch + 1, steps, loss: mean, lr, margin })?;
    }
    Ok(summary)
}

/// Full-length eval-mode embeddings of the given waves.
pub fn embed_waves<T: Float>(model: &Model<T>, features: &FeatureExtractor, waves: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    waves
        .iter()
        .map(|w| {
            let f = features.features(w)?;
            let x = Tensor::new(f.data().iter().map(|&v| T::of(v as f64)).collect(), f.shape())?;
            Ok(model.embed(&x)?.into_iter().map(|v| v.as_f64() as f32).collect())
        })
        .collect()
}

/// Verification quality over all pairs of a labelled embedding set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairReport {
    pub eer: f64,
    pub mean_intra: f64,
    pub mean_inter: f64,
    pub trials: usize,
}

pub fn pair_report(embeddings: &[Vec<f32>], labels: &[usize]) -> Result<PairReport> {
    let mut set = ScoreSet::default();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            set.labels.push(labels[i] == labels[j]);
            set.scores.push(cosine_score(&embeddings[i], &embeddings[j])?);
        }
    }
    let mean = |target: bool| {
        let v: Vec<f64> = set.labels.iter().zip(&set.scores).filter(|(&l, _)| l == target).map(|(_, &s)| s).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(PairReport { eer: eer(&set)?, mean_intra: mean(true), mean_inter: mean(false), trials: set.labels.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureConfig;
    use crate::loss::LossConfig;
    use crate::model::{ModelConfig, StageConfig};
    use crate::nn::{Block1dKind, Block2dKind};

    fn small() -> ModelConfig {
        let st = |sf, mult| StageConfig { sf, mult, n2d: 1, kind2d: Block2dKind::ConvNeXt2d, kind1d: Block1dKind::Conv1d };
        ModelConfig { c: 2, f: 72, embedding_dim: 8, reduction: 8, heads: 1, attn_hidden: 8, stages: vec![st(1, 1), st(2, 2)] }
    }

    fn setup(cfg: &TrainConfig) -> (Model<f32>, ClassifierHead<f32>, Dataset, FeatureExtractor) {
        let corpus = make_toy_corpus(3, 4, 0.5, 1).unwrap();
        let data = Dataset::from_toy(&corpus, &(0..12).collect::<Vec<_>>());
        let model = Model::build(&small(), cfg.seed).unwrap();
        let head = ClassifierHead::new(&LossConfig::default(), data.classes(cfg), 8, cfg.seed + 1).unwrap();
        (model, head, data, FeatureExtractor::new(FeatureConfig::default()).unwrap())
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, warmup_epochs: 1.0, crop_seconds: Some(0.3), ..Default::default() }
    }

    fn run(cfg: &TrainConfig) -> (Vec<String>, Vec<Vec<f32>>) {
        let (model, head, data, fx) = setup(cfg);
        let mut log = Vec::new();
        train(&model, &head, &data, cfg, &fx, &mut |r| {
            log.push(r.to_json_line());
            Ok(())
        })
        .unwrap();
        let params = model.named_params().iter().map(|(_, p)| p.get().to_vec()).collect();
        (log, params)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = TrainConfig { lr_max: 0.0, lr_min: 0.0, ..quick() };
        let (model, head, data, fx) = setup(&cfg);
        let before: Vec<Vec<f32>> = trainable_params(&model, &head).iter().map(|p| p.get().to_vec()).collect();
        train(&model, &head, &data, &cfg, &fx, &mut |_| Ok(())).unwrap();
        let after: Vec<Vec<f32>> = trainable_params(&model, &head).iter().map(|p| p.get().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = run(&quick());
        assert_eq!(a, run(&quick()));
        assert_eq!(a.0.len(), 2 * 3 + 2);
        assert_ne!(a, run(&TrainConfig { seed: 1, ..quick() }));
    }

    #[test]
    fn lm_stage_logs_constant_margin() {
        let cfg = TrainConfig { stage: Stage::Lm, ..quick() };
        assert!(!cfg.uses_speed_perturb());
        assert_eq!(TrainConfig { stage: Stage::Lm, ..Default::default() }.crop(), 6.0);
        let (log, _) = run(&cfg);
        for line in log {
            let r: LogRecord = serde_json::from_str(&line).unwrap();
            let (LogRecord::Step { margin, .. } | LogRecord::Epoch { margin, .. }) = r;
            assert_eq!(margin, 0.5);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        // a diverging step size drives the weights to infinity
        let cfg = TrainConfig { lr_max: 1e38, lr_min: 1e38, warmup_epochs: 0.0, ..quick() };
        let (model, head, data, fx) = setup(&cfg);
        let e = train(&model, &head, &data, &cfg, &fx, &mut |_| Ok(())).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Numeric(_)), "{msg}");
        assert!(msg.contains("epoch 1") && msg.contains("batch") && msg.contains("lr 1e38"), "{msg}");
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { warmup_epochs: 2.0, epochs: 2, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop_seconds: Some(0.0), ..Default::default() }.validate().is_err());
        let cfg = quick();
        let (model, _, data, fx) = setup(&cfg);
        let small_head = ClassifierHead::new(&LossConfig::default(), 3, 8, 0).unwrap();
        assert!(train(&model, &small_head, &data, &cfg, &fx, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn dataset_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (s, name) in ["bob", "alice"].iter().enumerate() {
            std::fs::create_dir(dir.path().join(name)).unwrap();
            for u in 0..2 {
                let w = crate::audio::Waveform::new(vec![0.1 * (s + u) as f32; 1600], 16000).unwrap();
                crate::audio::write_wav(&dir.path().join(name).join(format!("u{u}.wav")), &w, crate::audio::WavEncoding::Pcm16)
                    .unwrap();
            }
        }
        let d = Dataset::from_dir(dir.path()).unwrap();
        assert_eq!(d.n_speakers, 2);
        assert_eq!(d.ids[0], "alice/u0");
        assert_eq!(d.labels, vec![0, 0, 1, 1]);
    }
}
