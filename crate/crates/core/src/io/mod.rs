//! Persisted binary formats: model checkpoints and embedding stores.

pub mod container;
mod embeddings;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::error::{Error, Result};
use crate::loss::{ClassifierHead, LossConfig, Stage};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};
use container::{ManifestEntry, Record};

pub use embeddings::EmbeddingStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDNC";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"RDNE";

/// Prefix of the classifier-head records inside a checkpoint.
pub const CLASSIFIER_PREFIX: &str = "classifier";

/// Classifier head description stored next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub loss: LossConfig,
    pub classes: usize,
}

/// Where training stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub stage: Stage,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub classifier: Option<ClassifierMeta>,
    pub training: Option<TrainState>,
    pub tensors: Vec<ManifestEntry>,
}

/// Named model weights plus the configuration needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

fn records_of<T: Float, M: Module<T>>(m: &M, prefix: &str) -> Vec<Record> {
    m.named_params()
        .into_iter()
        .map(|(name, p)| {
            let t = p.get();
            let name = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
            Record::from_values(name, t.shape(), t.data())
        })
        .collect()
}

fn load_into<T: Float, M: Module<T>>(m: &M, prefix: &str, records: &[&Record]) -> Result<()> {
    let params = m.named_params();
    if params.len() != records.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} {} tensors, the model has {}",
            records.len(),
            if prefix.is_empty() { "model" } else { prefix },
            params.len()
        )));
    }
    for ((name, p), r) in params.iter().zip(records) {
        let want = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
        if r.name != want || r.shape != p.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {:?} {:?} does not match model tensor {want:?} {:?}",
                r.name,
                r.shape,
                p.shape()
            )));
        }
        p.set(Tensor::new(r.values(), &r.shape)?.with_requires_grad(p.is_trainable()))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn new<T: Float>(
        model: &Model<T>,
        features: &FeatureConfig,
        head: Option<&ClassifierHead<T>>,
        training: Option<TrainState>,
    ) -> Self {
        let mut records = records_of(model, "");
        let classifier = head.map(|h| {
            records.extend(records_of(h, CLASSIFIER_PREFIX));
            ClassifierMeta { loss: h.cfg.clone(), classes: h.n_classes }
        });
        let tensors = records.iter().map(Record::manifest).collect();
        Checkpoint {
            meta: CheckpointMeta { model: model.config().clone(), features: features.clone(), classifier, training, tensors },
            records,
        }
    }

    fn split(&self) -> (Vec<&Record>, Vec<&Record>) {
        let head_prefix = format!("{CLASSIFIER_PREFIX}.");
        self.records.iter().partition(|r| !r.name.starts_with(&head_prefix))
    }

    /// Rebuilds the model and loads its weights.
    pub fn model<T: Float>(&self) -> Result<Model<T>> {
        let model = Model::build(&self.meta.model, 0)?;
        load_into(&model, "", &self.split().0)?;
        Ok(model)
    }

    /// Rebuilds the classifier head, if the checkpoint has one.
    pub fn classifier<T: Float>(&self) -> Result<Option<ClassifierHead<T>>> {
        let Some(meta) = &self.meta.classifier else { return Ok(None) };
        let dim = self.meta.model.embedding_dim;
        let head = ClassifierHead::new(&meta.loss, meta.classes, dim, 0)?;
        load_into(&head, CLASSIFIER_PREFIX, &self.split().1)?;
        Ok(Some(head))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        Ok(container::encode(CHECKPOINT_MAGIC, &meta, &self.records))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, records) = container::decode(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        container::check_manifest("checkpoint", &meta.tensors, &records)?;
        meta.model.validate()?;
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::model::StageConfig;
    use crate::nn::{Block1dKind, Block2dKind};

    fn tiny() -> ModelConfig {
        let st = |sf, mult| StageConfig { sf, mult, n2d: 1, kind2d: Block2dKind::ResNetBasic2d, kind1d: Block1dKind::Mha };
        ModelConfig {
            c: 2,
            f: 8,
            embedding_dim: 6,
            reduction: 4,
            heads: 2,
            attn_hidden: 4,
            stages: vec![st(1, 1), st(2, 2)],
        }
    }

    fn checkpoint() -> Checkpoint {
        let model = Model::<f32>::build(&tiny(), 3).unwrap();
        let loss = LossConfig { kind: LossKind::Sf2C, ..LossConfig::default() };
        let head = ClassifierHead::new(&loss, 5, 6, 4).unwrap();
        let state = TrainState { stage: Stage::Pretrain, epochs: 2, seed: 9 };
        Checkpoint::new(&model, &FeatureConfig::default(), Some(&head), Some(state))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RDNC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let model: Model<f32> = back.model().unwrap();
        let again = Checkpoint::new(&model, &back.meta.features, back.classifier().unwrap().as_ref(), back.meta.training.clone());
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn newer_version_and_corruption_are_rejected() {
        let bytes = checkpoint().to_bytes().unwrap();
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&newer).unwrap_err();
        assert!(matches!(&e, Error::Format(m) if m.contains("version 2")), "{e}");

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn loaded_model_matches_original() {
        let ck = checkpoint();
        let a: Model<f32> = Model::build(&tiny(), 3).unwrap();
        let b: Model<f32> = ck.model().unwrap();
        let x = Tensor::<f32>::from_f64(&(0..8 * 20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), &[8, 20]).unwrap();
        assert_eq!(a.embed(&x).unwrap(), b.embed(&x).unwrap());
        let wide: Model<f64> = ck.model().unwrap();
        assert_eq!(wide.param_count(), a.param_count());
    }
}
