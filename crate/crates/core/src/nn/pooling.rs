use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, Cost, Init, Module, Param};
use crate::tensor::{Float, Tensor};

/// Variance floor of the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-7;

/// Attentive statistics pooling with global context: frame scores from
/// `[h_t; mean(h); std(h)]`, softmax over time, then weighted mean and std.
#[derive(Debug)]
pub struct AttentiveStatsPool<T: Float> {
    pub attn: Conv1d<T>,
    /// Scalar score per frame. No bias: a shared offset cancels in the softmax.
    pub score: Conv1d<T>,
}

impl<T: Float> AttentiveStatsPool<T> {
    pub fn new(init: &mut Init, d: usize, hidden: usize) -> Self {
        AttentiveStatsPool { attn: Conv1d::pointwise(init, 3 * d, hidden), score: Conv1d::new(init, hidden, 1, 1, 1, false) }
    }

    fn stats(h: &Tensor<T>, w: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mean, second) = match w {
            Some(w) => (h.mul(w)?.sum_axes(&[2], true)?, h.square().mul(w)?.sum_axes(&[2], true)?),
            None => (h.mean_axes(&[2], true)?, h.square().mean_axes(&[2], true)?),
        };
        let std = second.sub(&mean.square())?.clamp_min(T::of(POOL_EPS)).sqrt();
        Ok((mean, std))
    }

    /// Frame weights `(N, 1, T)` summing to one over time.
    pub fn weights(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.rank() != 3 || h.dim(2) == 0 {
            return Err(Error::Input(format!("pooling expects (N, D, T) with T >= 1, got {:?}", h.shape())));
        }
        let t = h.dim(2);
        let (mean, std) = Self::stats(h, None)?;
        let ctx_shape = [h.dim(0), h.dim(1), t];
        let ctx = Tensor::concat(&[h, &mean.broadcast_to(&ctx_shape)?, &std.broadcast_to(&ctx_shape)?], 1)?;
        let e = self.score.forward(&self.attn.forward(&ctx)?.tanh())?;
        e.softmax(2)
    }

    /// `(N, D, T)` to `(N, 2D)`: weighted mean then weighted std.
    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let alpha = self.weights(h)?;
        let (mu, sigma) = Self::stats(h, Some(&alpha))?;
        let (n, d) = (h.dim(0), h.dim(1));
        Tensor::concat(&[&mu.reshape(&[n, d])?, &sigma.reshape(&[n, d])?], 1)
    }

    pub fn cost(d: usize, hidden: usize, t: usize) -> Cost {
        Cost::conv(3 * d, hidden, 1, 1, t, true) + Cost::conv(hidden, 1, 1, 1, t, false)
    }
}

impl<T: Float> Module<T> for AttentiveStatsPool<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.score.visit(&join(prefix, "score"), f);
    }
}
