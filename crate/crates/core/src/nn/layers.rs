use crate::error::{Error, Result};
use crate::nn::{join, Init, Mode, Module, Param};
use crate::tensor::{normalize, ConvSpec, Float, NormMode, RunningStats, Tensor, BN_EPS, BN_MOMENTUM, LN_EPS};

/// 2D convolution over `(N, C, H, W)`.
#[derive(Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
}

impl<T: Float> Conv2d<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: (usize, usize), spec: ConvSpec, bias: bool) -> Self {
        let fan_in = cin / spec.groups * kernel.0 * kernel.1;
        Conv2d {
            weight: Param::trainable(init.kaiming(&[cout, cin / spec.groups, kernel.0, kernel.1], fan_in)),
            bias: bias.then(|| Param::trainable(Tensor::zeros(&[cout]))),
            spec,
        }
    }

    /// Same-size convolution with an odd square kernel.
    pub fn same(init: &mut Init, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> Self {
        Self::new(init, cin, cout, (k, k), ConvSpec::new((1, 1), (k / 2, k / 2), groups), bias)
    }

    pub fn zero_init(self) -> Self {
        self.weight.fill(T::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(Param::get);
        x.conv2d(&self.weight.get(), b.as_ref(), self.spec)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// 1D convolution over `(N, C, L)`.
#[derive(Debug)]
pub struct Conv1d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Float> Conv1d<T> {
    /// Stride-1 convolution with `padding = k / 2`.
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> Self {
        Conv1d {
            weight: Param::trainable(init.kaiming(&[cout, cin / groups, k], cin / groups * k)),
            bias: bias.then(|| Param::trainable(Tensor::zeros(&[cout]))),
            padding: k / 2,
            groups,
        }
    }

    pub fn pointwise(init: &mut Init, cin: usize, cout: usize) -> Self {
        Self::new(init, cin, cout, 1, 1, true)
    }

    pub fn zero_init(self) -> Self {
        self.weight.fill(T::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(Param::get);
        x.conv1d(&self.weight.get(), b.as_ref(), 1, self.padding, self.groups)
    }
}

impl<T: Float> Module<T> for Conv1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Affine map over the trailing axis.
#[derive(Debug)]
pub struct Linear<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(init: &mut Init, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: Param::trainable(init.kaiming(&[dout, din], din)),
            bias: bias.then(|| Param::trainable(Tensor::zeros(&[dout]))),
        }
    }

    pub fn zero_init(self) -> Self {
        self.weight.fill(T::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(Param::get);
        x.linear(&self.weight.get(), b.as_ref())
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization over every axis except axis 1.
#[derive(Debug)]
pub struct BatchNorm<T: Float> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::trainable(Tensor::full(&[channels], T::one())),
            beta: Param::trainable(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
        }
    }

    /// Starts with `gamma = 0`, so the layer outputs `beta` (zero) at init.
    pub fn zero_init(self) -> Self {
        self.gamma.fill(T::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let channels = self.gamma.numel();
        if x.rank() < 2 || x.dim(1) != channels {
            return Err(Error::Config(format!(
                "batch norm over {channels} channels got input {:?}",
                x.shape()
            )));
        }
        let axes: Vec<usize> = (0..x.rank()).filter(|&a| a != 1).collect();
        let mut stats = RunningStats {
            mean: self.running_mean.get().to_vec(),
            var: self.running_var.get().to_vec(),
            initialized: true,
            momentum: T::of(BN_MOMENTUM),
        };
        let (g, b) = (self.gamma.get(), self.beta.get());
        match mode {
            Mode::Train => {
                let y = normalize(x, NormMode::BatchTrain(&mut stats), &axes, Some(&g), Some(&b), T::of(BN_EPS))?;
                self.running_mean.set_data(stats.mean)?;
                self.running_var.set_data(stats.var)?;
                Ok(y)
            }
            Mode::Eval => normalize(x, NormMode::BatchEval(&stats), &axes, Some(&g), Some(&b), T::of(BN_EPS)),
        }
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }
}

/// Layer normalization across the channel axis (axis 1) at every position.
#[derive(Debug)]
pub struct LayerNorm<T: Float> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Param::trainable(Tensor::full(&[channels], T::one())),
            beta: Param::trainable(Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, b) = (self.gamma.get(), self.beta.get());
        normalize(x, NormMode::Layer, &[1], Some(&g), Some(&b), T::of(LN_EPS))
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{check_module, jitter};
    use crate::tensor::ops::test_util::randn;

    #[test]
    fn parameter_names_and_counts() {
        let mut init = Init::new(0);
        let lin = Linear::<f32>::new(&mut init, 16, 8, true);
        assert_eq!(lin.param_count(), 136);
        let names: Vec<String> = lin.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        let bn = BatchNorm::<f32>::new(4);
        assert_eq!((bn.param_count(), bn.buffer_count()), (8, 8));
    }

    #[test]
    fn kaiming_bound_and_determinism() {
        let a: Tensor<f64> = Init::new(7).kaiming(&[64, 6], 6);
        let b: Tensor<f64> = Init::new(7).kaiming(&[64, 6], 6);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.data().iter().any(|v| v.abs() > 0.9));
    }

    #[test]
    fn batch_norm_train_updates_buffers_and_eval_uses_them() {
        let bn = BatchNorm::<f64>::new(3);
        let x = randn(&[4, 3, 5], 1).add_scalar(2.0);
        bn.forward(&x, Mode::Train).unwrap();
        assert!(bn.running_mean.get().data().iter().all(|&m| (m - 0.2).abs() < 0.1));
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let m = bn.running_mean.get().to_vec();
        let v = bn.running_var.get().to_vec();
        let c = 1;
        let idx = c * 5 + 2;
        let expect = (x.data()[idx] - m[c]) / (v[c] + 1e-5).sqrt();
        assert!((y.data()[idx] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_gradients() {
        for seed in 0..10 {
            let mut init = Init::new(seed);
            let conv = Conv2d::<f64>::new(&mut init, 2, 3, (3, 3), ConvSpec::new((2, 1), (1, 1), 1), true);
            let r = check_module(&conv, &randn(&[2, 2, 6, 5], seed), |m, x| m.forward(x), seed);
            assert!(r.max_rel_error < 1e-6, "conv seed {seed}: {r:?}");

            let bn = BatchNorm::<f64>::new(3);
            jitter(&bn, seed, 1.0);
            let r = check_module(&bn, &randn(&[2, 3, 4, 5], seed), |m, x| m.forward(x, Mode::Train), seed);
            assert!(r.max_rel_error < 1e-5, "bn seed {seed}: {r:?}");

            let ln = LayerNorm::<f64>::new(4);
            jitter(&ln, seed, 1.0);
            let r = check_module(&ln, &randn(&[2, 4, 3, 5], seed), |m, x| m.forward(x), seed);
            assert!(r.max_rel_error < 1e-5, "ln seed {seed}: {r:?}");
        }
    }
}
