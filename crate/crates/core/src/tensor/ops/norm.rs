use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Running mean/variance of a batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Float> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
    pub momentum: T,
}

impl<T: Float> RunningStats<T> {
    /// Stats starting at mean 0, variance 1.
    pub fn new(len: usize) -> Self {
        RunningStats { mean: vec![T::zero(); len], var: vec![T::one(); len], initialized: true, momentum: T::of(BN_MOMENTUM) }
    }

    /// Stats that must see a training batch before evaluation.
    pub fn uninitialized(len: usize) -> Self {
        RunningStats { initialized: false, ..Self::new(len) }
    }

    fn update(&mut self, mean: &[T], var_unbiased: &[T]) {
        if !self.initialized {
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var_unbiased);
            self.initialized = true;
            return;
        }
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Which statistics [`normalize`] uses.
pub enum NormMode<'a, T: Float> {
    /// Per-sample statistics over the given axes.
    Layer,
    /// Minibatch statistics; updates the running stats.
    BatchTrain(&'a mut RunningStats<T>),
    /// Stored running statistics.
    BatchEval(&'a RunningStats<T>),
}

/// Normalizes `x` over `axes`, then applies the optional affine `gamma`/`beta`.
///
/// In layer mode the affine parameters span the normalized axes; in batch
/// modes they span the remaining (channel) axes.
pub fn normalize<T: Float>(
    x: &Tensor<T>,
    mode: NormMode<'_, T>,
    axes: &[usize],
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("normalize: eps must be positive".into()));
    }
    let shape = x.shape().to_vec();
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::Config(format!("normalize: axes {axes:?} out of range for {shape:?}")));
    }
    let layer = matches!(mode, NormMode::Layer);
    let affine_axes: Vec<usize> = (0..shape.len()).filter(|a| axes.contains(a) == layer).collect();
    let affine_extents: Vec<usize> = affine_axes.iter().map(|&a| shape[a]).collect();
    let affine_shape: Vec<usize> = (0..shape.len()).map(|a| if affine_axes.contains(&a) { shape[a] } else { 1 }).collect();
    let stat_shape: Vec<usize> = (0..shape.len()).map(|a| if axes.contains(&a) { 1 } else { shape[a] }).collect();

    let normed = match mode {
        NormMode::Layer | NormMode::BatchTrain(_) => {
            let mean = x.mean_axes(axes, true)?;
            let centered = x.sub(&mean)?;
            let var = centered.square().mean_axes(axes, true)?;
            let y = centered.div(&var.add_scalar(eps).sqrt())?;
            if let NormMode::BatchTrain(stats) = mode {
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                if stats.mean.len() != mean.numel() {
                    return Err(Error::Config(format!(
                        "normalize: running stats of length {} for {} channels",
                        stats.mean.len(),
                        mean.numel()
                    )));
                }
                let correction = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
                let unbiased: Vec<T> = var.data().iter().map(|&v| v * correction).collect();
                stats.update(mean.data(), &unbiased);
            }
            y
        }
        NormMode::BatchEval(stats) => {
            if !stats.initialized {
                return Err(Error::State("batch-eval normalization before running stats were initialized".into()));
            }
            let n: usize = stat_shape.iter().product();
            if stats.mean.len() != n {
                return Err(Error::Config(format!(
                    "normalize: running stats of length {} for {n} channels",
                    stats.mean.len()
                )));
            }
            let mean = Tensor::new(stats.mean.clone(), &stat_shape)?;
            let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            x.sub(&mean)?.mul(&Tensor::new(inv_std, &stat_shape)?)?
        }
    };
    let mut y = normed;
    for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
        let Some(p) = p else { continue };
        if p.shape() != affine_extents.as_slice() {
            return Err(Error::Config(format!(
                "normalize: {name} shape {:?}, expected {affine_extents:?}",
                p.shape()
            )));
        }
        let p = p.reshape(&affine_shape)?;
        y = if name == "gamma" { y.mul(&p)? } else { y.add(&p)? };
    }
    Ok(y)
}
