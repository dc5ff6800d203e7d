use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Float, Tensor};

/// SGD with Nesterov momentum and L2 weight decay.
///
/// Per parameter: `g = grad + wd * p`, `v = mu * v + g`, `p -= lr * (g + mu * v)`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one update to raw slices; `velocity` starts at zero.
    pub fn update(&self, p: &mut [T], grad: &[T], velocity: &mut [T], lr: f64) -> Result<()> {
        if p.len() != grad.len() || p.len() != velocity.len() {
            return Err(Error::State(format!(
                "optimizer: parameter of {} values with gradient of {} and velocity of {}",
                p.len(),
                grad.len(),
                velocity.len()
            )));
        }
        let (lr, mu, wd) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((p, &g), v) in p.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
        Ok(())
    }

    /// Updates every trainable parameter from its accumulated gradient.
    ///
    /// Parameters without a gradient are treated as having a zero one. The
    /// list must be the same, in the same order, at every call.
    pub fn step(&mut self, params: &[&Param<T>], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let mut velocity = std::mem::take(&mut self.velocity);
        let result = params.iter().zip(velocity.iter_mut()).try_for_each(|(p, v)| -> Result<()> {
            let t = p.get();
            let mut data = t.to_vec();
            let zeros;
            let grad = t.grad();
            let g: &[T] = match &grad {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); data.len()];
                    &zeros
                }
            };
            self.update(&mut data, g, v, lr)?;
            drop(grad);
            p.set(Tensor::new(data, t.shape())?.with_requires_grad(true))
        });
        self.velocity = velocity;
        result
    }
}

/// Learning rate at a (fractional) epoch: linear warmup from `lr_min` to
/// `lr_max`, then exponential decay reaching `lr_min` at the final epoch.
pub fn lr_schedule(epoch: f64, lr_min: f64, lr_max: f64, warmup: f64, epochs: f64) -> f64 {
    if epoch < warmup {
        return lr_min + (lr_max - lr_min) * epoch / warmup;
    }
    if lr_max == lr_min || epochs <= warmup {
        return lr_max;
    }
    let u = ((epoch - warmup) / (epochs - warmup)).min(1.0);
    lr_max * (lr_min / lr_max).powf(u)
}
