use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, Cost, Init, LayerNorm, Linear, Module, Param};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block1dKind {
    #[serde(rename = "skip")]
    Skip,
    #[serde(rename = "fc")]
    Fc,
    #[serde(rename = "conv1d")]
    Conv1d,
    #[serde(rename = "mha")]
    Mha,
    #[serde(rename = "conv1d+mha")]
    Conv1dMha,
}

impl Block1dKind {
    pub const ALL: [Block1dKind; 5] =
        [Block1dKind::Skip, Block1dKind::Fc, Block1dKind::Conv1d, Block1dKind::Mha, Block1dKind::Conv1dMha];

    pub fn name(self) -> &'static str {
        match self {
            Block1dKind::Skip => "skip",
            Block1dKind::Fc => "fc",
            Block1dKind::Conv1d => "conv1d",
            Block1dKind::Mha => "mha",
            Block1dKind::Conv1dMha => "conv1d+mha",
        }
    }

    fn uses_attention(self) -> bool {
        matches!(self, Block1dKind::Mha | Block1dKind::Conv1dMha)
    }
}

impl fmt::Display for Block1dKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block1dKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown 1D block kind {s:?}; expected one of skip, fc, conv1d, mha, conv1d+mha"))
        })
    }
}

const EXPANSION: usize = 4;

/// Per-frame MLP with a residual connection; no context across time.
#[derive(Debug)]
pub struct FcBlock<T: Float> {
    pub norm: LayerNorm<T>,
    pub pw1: Conv1d<T>,
    pub pw2: Conv1d<T>,
}

impl<T: Float> FcBlock<T> {
    pub fn new(init: &mut Init, d: usize) -> Self {
        FcBlock {
            norm: LayerNorm::new(d),
            pw1: Conv1d::pointwise(init, d, EXPANSION * d),
            pw2: Conv1d::pointwise(init, EXPANSION * d, d).zero_init(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.pw1.forward(&self.norm.forward(x)?)?.gelu();
        x.add(&self.pw2.forward(&h)?)
    }

    pub fn cost(d: usize, t: usize) -> Cost {
        Cost::norm(d) + Cost::conv(d, EXPANSION * d, 1, 1, t, true) + Cost::conv(EXPANSION * d, d, 1, 1, t, true)
    }
}

impl<T: Float> Module<T> for FcBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
    }
}

/// ConvNeXt block over time: depthwise kernel 7, layer norm, pointwise MLP, residual.
#[derive(Debug)]
pub struct ConvNeXt1d<T: Float> {
    pub dw: Conv1d<T>,
    pub norm: LayerNorm<T>,
    pub pw1: Conv1d<T>,
    pub pw2: Conv1d<T>,
}

impl<T: Float> ConvNeXt1d<T> {
    pub const KERNEL: usize = 7;

    pub fn new(init: &mut Init, d: usize) -> Self {
        ConvNeXt1d {
            dw: Conv1d::new(init, d, d, Self::KERNEL, d, true),
            norm: LayerNorm::new(d),
            pw1: Conv1d::pointwise(init, d, EXPANSION * d),
            pw2: Conv1d::pointwise(init, EXPANSION * d, d).zero_init(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(&self.dw.forward(x)?)?;
        let h = self.pw1.forward(&h)?.gelu();
        x.add(&self.pw2.forward(&h)?)
    }

    pub fn cost(d: usize, t: usize) -> Cost {
        Cost::conv(d, d, Self::KERNEL, d, t, true) + FcBlock::<T>::cost(d, t)
    }
}

impl<T: Float> Module<T> for ConvNeXt1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.dw.visit(&join(prefix, "dw"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
    }
}

/// Multi-head self-attention over time, without positional encoding.
///
/// The key projection has no bias: a key bias only adds a per-query constant
/// to the scores, which the softmax discards.
#[derive(Debug)]
pub struct MultiHeadAttention<T: Float> {
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Float> MultiHeadAttention<T> {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {d} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            heads,
            wq: Linear::new(init, d, d, true),
            wk: Linear::new(init, d, d, false),
            wv: Linear::new(init, d, d, true),
            wo: Linear::new(init, d, d, true).zero_init(),
        })
    }

    /// `(N, T, D)` to `(N*h, T, D/h)`.
    fn split(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let dh = d / self.heads;
        x.reshape(&[n, t, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * self.heads, t, dh])
    }

    /// Attention weights `(N, h, T_query, T_key)` and the attended values `(N, T, D)`,
    /// for input `(N, T, D)`.
    pub fn attend(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let dh = d / self.heads;
        let q = self.split(&self.wq.forward(x)?)?;
        let k = self.split(&self.wk.forward(x)?)?;
        let v = self.split(&self.wv.forward(x)?)?;
        let scores = q.matmul(&k.transpose(1, 2)?)?.mul_scalar(T::of(1.0 / (dh as f64).sqrt()));
        let att = scores.softmax(2)?;
        let o = att.matmul(&v)?.reshape(&[n, self.heads, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
        Ok((att.reshape(&[n, self.heads, t, t])?, o))
    }

    /// `(N, T, D)` to `(N, T, D)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, o) = self.attend(x)?;
        self.wo.forward(&o)
    }

    pub fn cost(d: usize, t: usize) -> Cost {
        let proj = Cost::linear(d, d, t, true);
        proj + Cost::linear(d, d, t, false) + proj + proj + Cost::new(0, 2 * t * t * d)
    }
}

impl<T: Float> Module<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
}

/// Pre-norm transformer encoder block on `(N, D, T)` maps.
#[derive(Debug)]
pub struct TransformerBlock<T: Float> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ff1: Conv1d<T>,
    pub ff2: Conv1d<T>,
}

impl<T: Float> TransformerBlock<T> {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(init, d, heads)?,
            norm2: LayerNorm::new(d),
            ff1: Conv1d::pointwise(init, d, EXPANSION * d),
            ff2: Conv1d::pointwise(init, EXPANSION * d, d).zero_init(),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward(x)?.transpose(1, 2)?;
        let x = x.add(&self.attn.forward(&h)?.transpose(1, 2)?)?;
        let h = self.ff1.forward(&self.norm2.forward(&x)?)?.gelu();
        x.add(&self.ff2.forward(&h)?)
    }

    pub fn cost(d: usize, t: usize) -> Cost {
        Cost::norm(d)
            + MultiHeadAttention::<T>::cost(d, t)
            + Cost::norm(d)
            + Cost::conv(d, EXPANSION * d, 1, 1, t, true)
            + Cost::conv(EXPANSION * d, d, 1, 1, t, true)
    }
}

impl<T: Float> Module<T> for TransformerBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }
}

/// Time-context component applied at the reduced width.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)] // one per stage, never moved in bulk
pub enum Temporal<T: Float> {
    Fc(FcBlock<T>),
    Conv(ConvNeXt1d<T>),
    Mha(TransformerBlock<T>),
    ConvMha(ConvNeXt1d<T>, TransformerBlock<T>),
}

impl<T: Float> Temporal<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Temporal::Fc(b) => b.forward(x),
            Temporal::Conv(b) => b.forward(x),
            Temporal::Mha(b) => b.forward(x),
            Temporal::ConvMha(c, m) => m.forward(&c.forward(x)?),
        }
    }
}

impl<T: Float> Module<T> for Temporal<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match self {
            Temporal::Fc(b) => b.visit(&join(prefix, "fc"), f),
            Temporal::Conv(b) => b.visit(&join(prefix, "conv"), f),
            Temporal::Mha(b) => b.visit(&join(prefix, "mha"), f),
            Temporal::ConvMha(c, m) => {
                c.visit(&join(prefix, "conv"), f);
                m.visit(&join(prefix, "mha"), f);
            }
        }
    }
}

/// `y = x + Expand(Temporal(Norm(Reduce(x))))` on `(N, D, T)` maps;
/// the `skip` kind is the identity.
#[derive(Debug)]
pub struct Block1d<T: Float> {
    pub kind: Block1dKind,
    pub width: usize,
    pub reduce: Option<Conv1d<T>>,
    pub norm: Option<LayerNorm<T>>,
    pub temporal: Option<Temporal<T>>,
    pub expand: Option<Conv1d<T>>,
}

impl<T: Float> Block1d<T> {
    pub fn reduced_width(d: usize, reduction: usize) -> usize {
        (d / reduction.max(1)).max(1)
    }

    pub fn new(init: &mut Init, kind: Block1dKind, d: usize, reduction: usize, heads: usize) -> Result<Self> {
        if kind == Block1dKind::Skip {
            return Ok(Block1d { kind, width: d, reduce: None, norm: None, temporal: None, expand: None });
        }
        let dr = Self::reduced_width(d, reduction);
        if kind.uses_attention() && (heads == 0 || dr % heads != 0) {
            return Err(Error::Config(format!(
                "reduced 1D width {dr} (= {d} / {reduction}) is not divisible by {heads} attention heads"
            )));
        }
        let reduce = Conv1d::pointwise(init, d, dr);
        let temporal = match kind {
            Block1dKind::Fc => Temporal::Fc(FcBlock::new(init, dr)),
            Block1dKind::Conv1d => Temporal::Conv(ConvNeXt1d::new(init, dr)),
            Block1dKind::Mha => Temporal::Mha(TransformerBlock::new(init, dr, heads)?),
            Block1dKind::Conv1dMha => {
                Temporal::ConvMha(ConvNeXt1d::new(init, dr), TransformerBlock::new(init, dr, heads)?)
            }
            Block1dKind::Skip => unreachable!(),
        };
        let expand = Conv1d::pointwise(init, dr, d).zero_init();
        Ok(Block1d {
            kind,
            width: d,
            reduce: Some(reduce),
            norm: Some(LayerNorm::new(dr)),
            temporal: Some(temporal),
            expand: Some(expand),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 3 || x.dim(1) != self.width {
            return Err(Error::Input(format!("1D block of width {} got input {:?}", self.width, x.shape())));
        }
        let (Some(reduce), Some(norm), Some(temporal), Some(expand)) =
            (&self.reduce, &self.norm, &self.temporal, &self.expand)
        else {
            return Ok(x.clone());
        };
        let h = temporal.forward(&norm.forward(&reduce.forward(x)?)?)?;
        x.add(&expand.forward(&h)?)
    }

    pub fn cost(kind: Block1dKind, d: usize, reduction: usize, t: usize) -> Cost {
        let dr = Self::reduced_width(d, reduction);
        let temporal = match kind {
            Block1dKind::Skip => return Cost::default(),
            Block1dKind::Fc => FcBlock::<T>::cost(dr, t),
            Block1dKind::Conv1d => ConvNeXt1d::<T>::cost(dr, t),
            Block1dKind::Mha => TransformerBlock::<T>::cost(dr, t),
            Block1dKind::Conv1dMha => ConvNeXt1d::<T>::cost(dr, t) + TransformerBlock::<T>::cost(dr, t),
        };
        Cost::conv(d, dr, 1, 1, t, true) + Cost::norm(dr) + temporal + Cost::conv(dr, d, 1, 1, t, true)
    }
}

impl<T: Float> Module<T> for Block1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }
}
