use serde::{Deserialize, Serialize};

use super::elementwise::sigmoid;
use crate::tensor::{Float, Tensor};

/// Pointwise nonlinearities used by the network blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    Sigmoid,
    Tanh,
}

fn gaussian_cdf<T: Float>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

fn gaussian_pdf<T: Float>(x: T) -> T {
    // 1/sqrt(2*pi)
    T::of(0.398_942_280_401_432_7) * (T::of(-0.5) * x * x).exp()
}

impl<T: Float> Tensor<T> {
    pub fn activate(&self, kind: Activation) -> Tensor<T> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Gelu => self.gelu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
        }
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.unary("gelu", |x| x * gaussian_cdf(x), |x, _| gaussian_cdf(x) + x * gaussian_pdf(x))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }
}
