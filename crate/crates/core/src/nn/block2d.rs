use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Cost, Init, LayerNorm, Linear, Mode, Module, Param};
use crate::tensor::{ConvSpec, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block2dKind {
    #[serde(rename = "convnext2d")]
    ConvNeXt2d,
    #[serde(rename = "resnet_basic2d")]
    ResNetBasic2d,
    #[serde(rename = "fwse_resnet2d")]
    FwseResNet2d,
}

impl Block2dKind {
    pub const ALL: [Block2dKind; 3] = [Block2dKind::ConvNeXt2d, Block2dKind::ResNetBasic2d, Block2dKind::FwseResNet2d];

    pub fn name(self) -> &'static str {
        match self {
            Block2dKind::ConvNeXt2d => "convnext2d",
            Block2dKind::ResNetBasic2d => "resnet_basic2d",
            Block2dKind::FwseResNet2d => "fwse_resnet2d",
        }
    }
}

impl fmt::Display for Block2dKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block2dKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown 2D block kind {s:?}; expected one of convnext2d, resnet_basic2d, fwse_resnet2d"))
        })
    }
}

/// Depthwise 3x3, channel layer norm, 4x pointwise expansion with GELU,
/// pointwise projection, residual.
#[derive(Debug)]
pub struct ConvNeXt2d<T: Float> {
    pub dw: Conv2d<T>,
    pub norm: LayerNorm<T>,
    pub pw1: Conv2d<T>,
    pub pw2: Conv2d<T>,
}

impl<T: Float> ConvNeXt2d<T> {
    pub const EXPANSION: usize = 4;

    pub fn new(init: &mut Init, c: usize) -> Self {
        let h = Self::EXPANSION * c;
        ConvNeXt2d {
            dw: Conv2d::same(init, c, c, 3, c, true),
            norm: LayerNorm::new(c),
            pw1: Conv2d::same(init, c, h, 1, 1, true),
            pw2: Conv2d::same(init, h, c, 1, 1, true).zero_init(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(&self.dw.forward(x)?)?;
        let h = self.pw2.forward(&self.pw1.forward(&h)?.gelu())?;
        x.add(&h)
    }

    pub fn cost(c: usize, f: usize, t: usize) -> Cost {
        let pos = f * t;
        let h = Self::EXPANSION * c;
        Cost::conv(c, c, 9, c, pos, true) + Cost::norm(c) + Cost::conv(c, h, 1, 1, pos, true) + Cost::conv(h, c, 1, 1, pos, true)
    }
}

impl<T: Float> Module<T> for ConvNeXt2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.dw.visit(&join(prefix, "dw"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
    }
}

/// Frequency-wise squeeze-excitation: one sigmoid gate per frequency bin,
/// computed from the channel/time mean.
#[derive(Debug)]
pub struct Fwse<T: Float> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Float> Fwse<T> {
    pub fn hidden(f: usize) -> usize {
        (f / 4).max(1)
    }

    pub fn new(init: &mut Init, f: usize) -> Self {
        let h = Self::hidden(f);
        Fwse { fc1: Linear::new(init, f, h, true), fc2: Linear::new(init, h, f, true) }
    }

    /// Gates `(N, F)` in `(0, 1)`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = x.mean_axes(&[1, 3], false)?;
        Ok(self.fc2.forward(&self.fc1.forward(&z)?.relu())?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.weights(x)?;
        x.mul(&w.reshape(&[x.dim(0), 1, x.dim(2), 1])?)
    }

    pub fn cost(f: usize) -> Cost {
        let h = Self::hidden(f);
        Cost::linear(f, h, 1, true) + Cost::linear(h, f, 1, true)
    }
}

impl<T: Float> Module<T> for Fwse<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// conv3x3-BN-ReLU-conv3x3-BN, optionally gated by fwSE, plus the input.
/// The second BN starts with zero gain, so the block is the identity at init.
#[derive(Debug)]
pub struct ResNetBasic2d<T: Float> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub fwse: Option<Fwse<T>>,
}

impl<T: Float> ResNetBasic2d<T> {
    pub fn new(init: &mut Init, c: usize, f: usize, fwse: bool) -> Self {
        ResNetBasic2d {
            conv1: Conv2d::same(init, c, c, 3, 1, false),
            bn1: BatchNorm::new(c),
            conv2: Conv2d::same(init, c, c, 3, 1, false),
            bn2: BatchNorm::new(c).zero_init(),
            fwse: fwse.then(|| Fwse::new(init, f)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let mut h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        if let Some(se) = &self.fwse {
            h = se.forward(&h)?;
        }
        x.add(&h)
    }

    pub fn cost(c: usize, f: usize, t: usize, fwse: bool) -> Cost {
        let conv = Cost::conv(c, c, 9, 1, f * t, false) + Cost::norm(c);
        conv + conv + if fwse { Fwse::<T>::cost(f) } else { Cost::default() }
    }
}

impl<T: Float> Module<T> for ResNetBasic2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.fwse.visit(&join(prefix, "fwse"), f);
    }
}

#[derive(Debug)]
pub enum SubBlock2d<T: Float> {
    ConvNeXt(ConvNeXt2d<T>),
    ResNet(ResNetBasic2d<T>),
}

impl<T: Float> SubBlock2d<T> {
    pub fn new(init: &mut Init, kind: Block2dKind, c: usize, f: usize) -> Self {
        match kind {
            Block2dKind::ConvNeXt2d => SubBlock2d::ConvNeXt(ConvNeXt2d::new(init, c)),
            Block2dKind::ResNetBasic2d => SubBlock2d::ResNet(ResNetBasic2d::new(init, c, f, false)),
            Block2dKind::FwseResNet2d => SubBlock2d::ResNet(ResNetBasic2d::new(init, c, f, true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            SubBlock2d::ConvNeXt(b) => b.forward(x),
            SubBlock2d::ResNet(b) => b.forward(x, mode),
        }
    }

    pub fn cost(kind: Block2dKind, c: usize, f: usize, t: usize) -> Cost {
        match kind {
            Block2dKind::ConvNeXt2d => ConvNeXt2d::<T>::cost(c, f, t),
            Block2dKind::ResNetBasic2d => ResNetBasic2d::<T>::cost(c, f, t, false),
            Block2dKind::FwseResNet2d => ResNetBasic2d::<T>::cost(c, f, t, true),
        }
    }
}

impl<T: Float> Module<T> for SubBlock2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match self {
            SubBlock2d::ConvNeXt(b) => b.visit(prefix, f),
            SubBlock2d::ResNet(b) => b.visit(prefix, f),
        }
    }
}

/// Strided 3x3 convolution over frequency plus batch norm, changing
/// `(C_in, F_in)` into `(C_out, F_in / S_f)`.
#[derive(Debug)]
pub struct DownsampleHead<T: Float> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Float> DownsampleHead<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, sf: usize) -> Self {
        DownsampleHead {
            conv: Conv2d::new(init, cin, cout, (3, 3), ConvSpec::new((sf, 1), (1, 1), 1), false),
            bn: BatchNorm::new(cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }

    pub fn cost(cin: usize, cout: usize, fout: usize, t: usize) -> Cost {
        Cost::conv(cin, cout, 9, 1, fout * t, false) + Cost::norm(cout)
    }
}

impl<T: Float> Module<T> for DownsampleHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// The 2D part of one stage: optional downsampling head, then residual sub-blocks.
#[derive(Debug)]
pub struct Stage2d<T: Float> {
    pub head: Option<DownsampleHead<T>>,
    pub blocks: Vec<SubBlock2d<T>>,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

impl<T: Float> Stage2d<T> {
    pub fn new(init: &mut Init, input: (usize, usize), sf: usize, cout: usize, n: usize, kind: Block2dKind) -> Result<Self> {
        let (cin, fin) = input;
        if sf == 0 || fin % sf != 0 {
            return Err(Error::Config(format!("frequency extent {fin} is not divisible by stride {sf}")));
        }
        let fout = fin / sf;
        let head = (sf > 1 || cin != cout).then(|| DownsampleHead::new(init, cin, cout, sf));
        let blocks = (0..n).map(|_| SubBlock2d::new(init, kind, cout, fout)).collect();
        Ok(Stage2d { head, blocks, input, output: (cout, fout) })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = match &self.head {
            Some(head) => head.forward(x, mode)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn cost(input: (usize, usize), sf: usize, cout: usize, n: usize, kind: Block2dKind, t: usize) -> Cost {
        let fout = input.1 / sf;
        let head = if sf > 1 || input.0 != cout { DownsampleHead::<T>::cost(input.0, cout, fout, t) } else { Cost::default() };
        head + (0..n).map(|_| SubBlock2d::<T>::cost(kind, cout, fout, t)).sum::<Cost>()
    }
}

impl<T: Float> Module<T> for Stage2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.head.visit(&join(prefix, "head"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{check_module, jitter};
    use crate::tensor::macs;
    use crate::tensor::ops::test_util::randn;

    #[test]
    fn kinds_parse_by_name() {
        for k in Block2dKind::ALL {
            assert_eq!(k.name().parse::<Block2dKind>().unwrap(), k);
        }
        assert!(matches!("resnet".parse::<Block2dKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn identity_at_init_without_stride() {
        let x = randn(&[2, 4, 8, 6], 3);
        for kind in Block2dKind::ALL {
            let stage = Stage2d::<f64>::new(&mut Init::new(1), (4, 8), 1, 4, 2, kind).unwrap();
            assert!(stage.head.is_none());
            for mode in [Mode::Train, Mode::Eval] {
                let y = stage.forward(&x, mode).unwrap();
                assert_eq!(y.data(), x.data(), "{kind} {mode:?}");
            }
        }
    }

    #[test]
    fn strided_stage_shape() {
        let c = 3;
        let stage = Stage2d::<f64>::new(&mut Init::new(0), (2 * c, 18), 2, 4 * c, 1, Block2dKind::ConvNeXt2d).unwrap();
        let y = stage.forward(&randn(&[1, 2 * c, 18, 132], 0), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 4 * c, 9, 132]);
        assert_eq!(y.dim(1) * y.dim(2), 2 * c * 18 * 2 / 2);
        assert!(matches!(
            Stage2d::<f64>::new(&mut Init::new(0), (4, 9), 2, 8, 1, Block2dKind::ConvNeXt2d),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fwse_limits() {
        let x = randn(&[2, 3, 8, 5], 0);
        let se = Fwse::<f64>::new(&mut Init::new(0), 8);
        se.fc2.weight.fill(0.0);
        let y = se.forward(&x).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b / 2.0).abs() < 1e-15));
        se.fc2.bias.as_ref().unwrap().fill(50.0);
        let y = se.forward(&x).unwrap();
        let worst = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3);
        jitter(&se, 4, 1.0);
        let w = se.weights(&x).unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(se.forward(&randn(&[1, 5, 8, 2], 1)).unwrap().shape(), &[1, 5, 8, 2]);
    }

    #[test]
    fn analytic_cost_matches_instance() {
        for kind in Block2dKind::ALL {
            let (c, f, t) = (3, 8, 7);
            let stage = Stage2d::<f64>::new(&mut Init::new(0), (c, 2 * f), 2, 2 * c, 2, kind).unwrap();
            let (_, counted) = macs::count(|| stage.forward(&randn(&[1, c, 2 * f, t], 0), Mode::Eval).unwrap());
            let cost = Stage2d::<f64>::cost((c, 2 * f), 2, 2 * c, 2, kind, t);
            assert_eq!(cost.macs, counted, "{kind}");
            assert_eq!(cost.params as usize, stage.param_count(), "{kind}");
        }
    }

    /// Smallest |pre-activation| seen by the ReLU of the first ResNet sub-block.
    fn relu_margin(stage: &Stage2d<f64>, x: &Tensor<f64>) -> f64 {
        let h = stage.head.as_ref().map_or(x.clone(), |hd| hd.forward(x, Mode::Train).unwrap());
        match &stage.blocks[0] {
            SubBlock2d::ResNet(b) => {
                let a = b.bn1.forward(&b.conv1.forward(&h).unwrap(), Mode::Train).unwrap();
                a.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
            }
            SubBlock2d::ConvNeXt(_) => f64::INFINITY,
        }
    }

    #[test]
    fn block_gradients() {
        for kind in Block2dKind::ALL {
            for seed in 0..10 {
                let stage = Stage2d::<f64>::new(&mut Init::new(seed), (2, 8), 2, 4, 1, kind).unwrap();
                jitter(&stage, seed + 100, 0.5);
                // keep ReLU inputs away from the kink, as for the bare op
                let x = (0..)
                    .map(|k| randn(&[2, 2, 8, 6], seed + 1000 * k))
                    .find(|x| relu_margin(&stage, x) > 1e-3)
                    .unwrap();
                let r = check_module(&stage, &x, |m, x| m.forward(x, Mode::Train), seed);
                assert!(r.max_rel_error < 1e-5, "{kind} seed {seed}: {r:?}");
            }
        }
    }
}
