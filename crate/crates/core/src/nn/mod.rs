//! Layers and blocks of the ReDimNet family.

mod block1d;
mod block2d;
mod layers;
mod pooling;
mod reshape;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use block1d::{Block1d, Block1dKind, FcBlock, ConvNeXt1d, MultiHeadAttention, Temporal, TransformerBlock};
pub use block2d::{Block2dKind, ConvNeXt2d, DownsampleHead, Fwse, ResNetBasic2d, Stage2d, SubBlock2d};
pub use layers::{BatchNorm, Conv1d, Conv2d, LayerNorm, Linear};
pub use pooling::{AttentiveStatsPool, POOL_EPS};
pub use reshape::{to_1d, to_2d};


/// Whether batch normalization uses batch statistics or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named weight: trainable, or a buffer such as running statistics.
#[derive(Debug)]
pub struct Param<T: Float> {
    value: RefCell<Tensor<T>>,
    trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn trainable(t: Tensor<T>) -> Self {
        Param { value: RefCell::new(t.with_requires_grad(true)), trainable: true }
    }

    pub fn buffer(t: Tensor<T>) -> Self {
        Param { value: RefCell::new(t.detach()), trainable: false }
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Replaces the stored tensor as is; the shape must not change.
    pub fn set(&self, t: Tensor<T>) -> Result<()> {
        let current = self.shape();
        if t.shape() != current.as_slice() {
            return Err(Error::Config(format!(
                "parameter of shape {current:?} cannot take a tensor of shape {:?}",
                t.shape()
            )));
        }
        *self.value.borrow_mut() = t;
        Ok(())
    }

    /// Replaces the values, keeping the shape and the trainable flag.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        let t = Tensor::new(data, &shape)?;
        self.set(t.with_requires_grad(self.trainable))
    }

    pub fn fill(&self, value: T) {
        let n = self.numel();
        self.set_data(vec![value; n]).expect("same length");
    }
}

/// Anything holding named parameters.
pub trait Module<T: Float> {
    /// Calls `f` on every parameter with its dotted name, in a fixed order.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel() * usize::from(p.is_trainable()));
        n
    }

    fn buffer_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel() * usize::from(!p.is_trainable()));
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Deterministic weight initializer.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming<T: Float>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        Tensor::new(data, shape).expect("shape matches")
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::Module;
    use crate::error::Result;
    use crate::tensor::{grad_check, GradCheckReport, Tensor};

    /// Overwrites every trainable parameter with N(0, scale^2) values.
    pub fn jitter<M: Module<f64>>(m: &M, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in m.named_params() {
            if p.is_trainable() {
                let data = (0..p.numel())
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        scale * v
                    })
                    .collect();
                p.set_data(data).unwrap();
            }
        }
    }

    /// Gradient check over the input and all trainable parameters of `m`.
    ///
    /// The loss is `sum(w * (y - y0))` with `y0` the detached output at the
    /// base point: same gradient as `sum(w * y)`, but the finite differences
    /// no longer carry the round-off of a large constant term.
    pub fn check_module<M: Module<f64>>(
        m: &M,
        x: &Tensor<f64>,
        forward: impl Fn(&M, &Tensor<f64>) -> Result<Tensor<f64>>,
        seed: u64,
    ) -> GradCheckReport {
        let params: Vec<_> = m.named_params().into_iter().filter(|(_, p)| p.is_trainable()).collect();
        let mut inputs = vec![x.clone()];
        inputs.extend(params.iter().map(|(_, p)| p.get().detach()));
        let base = crate::tensor::no_grad(|| forward(m, x)).unwrap().detach();
        grad_check(
            |xs| {
                for ((_, p), t) in params.iter().zip(&xs[1..]) {
                    p.set(t.clone())?;
                }
                let y = forward(m, &xs[0])?.sub(&base)?;
                crate::tensor::ops::test_util::weighted_sum(&y, seed)
            },
            &inputs,
            1e-4,
        )
        .unwrap()
    }
}

/// Closed-form parameter and multiply-accumulate totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    pub fn new(params: usize, macs: usize) -> Self {
        Cost { params: params as u64, macs: macs as u64 }
    }

    /// Convolution producing `positions` outputs per channel for a batch of one.
    pub fn conv(cin: usize, cout: usize, taps: usize, groups: usize, positions: usize, bias: bool) -> Self {
        let w = cout * (cin / groups) * taps;
        Cost::new(w + if bias { cout } else { 0 }, w * positions)
    }

    pub fn linear(din: usize, dout: usize, rows: usize, bias: bool) -> Self {
        Cost::conv(din, dout, 1, 1, rows, bias)
    }

    pub fn norm(channels: usize) -> Self {
        Cost::new(2 * channels, 0)
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { params: self.params + o.params, macs: self.macs + o.macs }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}
