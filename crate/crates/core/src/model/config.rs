use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block1d, Block1dKind, Block2dKind};

/// One stage of the schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Frequency stride of this stage's downsampling head.
    pub sf: usize,
    /// Channel multiplier relative to `c`, cumulative over stages.
    pub mult: usize,
    /// Number of 2D residual sub-blocks.
    pub n2d: usize,
    pub kind2d: Block2dKind,
    pub kind1d: Block1dKind,
}

fn default_embedding_dim() -> usize {
    192
}
fn default_reduction() -> usize {
    8
}
fn default_heads() -> usize {
    4
}
fn default_attn_hidden() -> usize {
    128
}

/// Architecture description of a ReDimNet model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub c: usize,
    pub f: usize,
    pub embedding_dim: usize,
    /// Block-1D width reduction `D / D_r`.
    pub reduction: usize,
    pub heads: usize,
    /// Hidden size of the pooling attention.
    pub attn_hidden: usize,
    pub stages: Vec<StageConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    c: usize,
    f: usize,
    #[serde(default = "default_embedding_dim")]
    embedding_dim: usize,
    #[serde(default = "default_reduction")]
    reduction: usize,
    #[serde(default = "default_heads")]
    heads: usize,
    #[serde(default = "default_attn_hidden")]
    attn_hidden: usize,
    stages: Vec<toml::Value>,
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawModel::deserialize(d)?;
        let stages = raw
            .stages
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                StageConfig::deserialize(v).map_err(|e| serde::de::Error::custom(format!("model.stages[{i}]: {}", e.message())))
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(ModelConfig {
            c: raw.c,
            f: raw.f,
            embedding_dim: raw.embedding_dim,
            reduction: raw.reduction,
            heads: raw.heads,
            attn_hidden: raw.attn_hidden,
            stages,
        })
    }
}

/// Shapes of one stage in units of the base channels `C` and bins `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageShapeRow {
    /// 1-based stage number.
    pub stage: usize,
    pub in_channels: usize,
    pub in_freq: usize,
    pub sf: usize,
    pub out_channels: usize,
    pub out_freq: usize,
    /// Channel and frequency divisors relative to `(C, F)`.
    pub in_mult: usize,
    pub out_mult: usize,
}

impl StageShapeRow {
    /// `C_i * F_i * T`, identical for every row of a valid schedule.
    pub fn volume(&self, t: usize) -> usize {
        self.out_channels * self.out_freq * t
    }

    pub fn in_volume(&self, t: usize) -> usize {
        self.in_channels * self.in_freq * t
    }
}

impl ModelConfig {
    /// The five-stage schedule with strides `[1, 2, 2, 2, 1]`.
    pub fn default_schedule(c: usize, n2d: [usize; 5], kind2d: Block2dKind, kind1d: Block1dKind) -> Self {
        let sfs = [1, 2, 2, 2, 1];
        let mut mult = 1;
        let stages = sfs
            .iter()
            .zip(n2d)
            .map(|(&sf, n)| {
                mult *= sf;
                StageConfig { sf, mult, n2d: n, kind2d, kind1d }
            })
            .collect();
        ModelConfig {
            c,
            f: 72,
            embedding_dim: default_embedding_dim(),
            reduction: default_reduction(),
            heads: default_heads(),
            attn_hidden: default_attn_hidden(),
            stages,
        }
    }

    /// Width of the 1D accumulator, `C * F`.
    pub fn width(&self) -> usize {
        self.c * self.f
    }

    /// Checks the volume constraint and all divisibility requirements,
    /// naming the first offending stage.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("f", self.f), ("embedding_dim", self.embedding_dim), ("reduction", self.reduction), ("attn_hidden", self.attn_hidden)] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::Config("model.stages must list at least one stage".into()));
        }
        let mut stride = 1;
        for (i, s) in self.stages.iter().enumerate() {
            let at = format!("model.stages[{i}] (stage {})", i + 1);
            if s.sf == 0 {
                return Err(Error::Config(format!("{at}: sf must be positive")));
            }
            stride *= s.sf;
            if !self.f.is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "{at}: F = {} is not divisible by the cumulative frequency stride {stride}",
                    self.f
                )));
            }
            if s.mult != stride {
                return Err(Error::Config(format!(
                    "{at}: channel multiplier {} differs from the cumulative frequency stride {stride}, so C*F would not stay constant",
                    s.mult
                )));
            }
            if matches!(s.kind1d, Block1dKind::Mha | Block1dKind::Conv1dMha) {
                let dr = Block1d::<f32>::reduced_width(self.width(), self.reduction);
                if self.heads == 0 || !dr.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!(
                        "{at}: reduced 1D width {dr} is not divisible by {} attention heads",
                        self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stage-by-stage shape table.
    pub fn stage_shapes(&self) -> Result<Vec<StageShapeRow>> {
        self.validate()?;
        let mut rows = Vec::with_capacity(self.stages.len());
        let mut prev = 1;
        for (i, s) in self.stages.iter().enumerate() {
            rows.push(StageShapeRow {
                stage: i + 1,
                in_channels: self.c * prev,
                in_freq: self.f / prev,
                sf: s.sf,
                out_channels: self.c * s.mult,
                out_freq: self.f / s.mult,
                in_mult: prev,
                out_mult: s.mult,
            });
            prev = s.mult;
        }
        Ok(rows)
    }
}
