use std::rc::Rc;

use crate::error::Result;
use crate::tensor::shape::{broadcast_shape, broadcast_strides, for_each_index2};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Float>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    let same = a.shape() == b.shape();
    let data: Vec<T> = if same {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| op.apply(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_index2(&out_shape, &sa, &sb, |o, ia, ib| out[o] = op.apply(ad[ia], bd[ib]));
        out
    };
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    let oshape = out_shape.clone();
    Ok(Tensor::from_op(data, out_shape, op.name(), &[a, b], move |g| {
        let mut ga = need_a.then(|| vec![T::zero(); ad.len()]);
        let mut gb = need_b.then(|| vec![T::zero(); bd.len()]);
        let mut visit = |o: usize, ia: usize, ib: usize| {
            let (da, db) = op.partials(ad[ia], bd[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += g[o] * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += g[o] * db;
            }
        };
        if same {
            (0..g.len()).for_each(|i| visit(i, i, i));
        } else {
            let sa = broadcast_strides(&a_shape, &oshape);
            let sb = broadcast_strides(&b_shape, &oshape);
            for_each_index2(&oshape, &sa, &sb, visit);
        }
        vec![ga, gb]
    }))
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.data_rc();
        let y = Rc::new(x.iter().map(|&v| f(v)).collect::<Vec<T>>());
        let y_saved = Rc::clone(&y);
        Tensor::from_op_rc(y, self.shape().to_vec(), op, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.iter().zip(y_saved.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&self, p: T) -> Tensor<T> {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// `max(x, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, c: T) -> Tensor<T> {
        self.unary(
            "clamp_min",
            move |x| if x > c { x } else { c },
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            "softplus",
            |x| {
                if x > T::zero() {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| sigmoid(x),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::ops::test_util::{randn, weighted_sum};
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn broadcast_add_values() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let b = Tensor::<f64>::from_f64(&[10., 20., 30.], &[3]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let c = Tensor::<f64>::from_f64(&[100., 200.], &[2, 1]).unwrap();
        assert_eq!(a.add(&c).unwrap().data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn binary_broadcast_gradients() {
        for seed in 0..50 {
            let a = randn(&[2, 3, 4], seed);
            let b = randn(&[3, 1], seed + 1000).square().add_scalar(1.0);
            let r = grad_check(
                |xs| {
                    let s = xs[0].add(&xs[1])?;
                    let m = xs[0].mul(&xs[1])?;
                    let d = xs[0].div(&xs[1])?;
                    let q = s.sub(&m)?.add(&d)?;
                    weighted_sum(&q, seed)
                },
                &[a, b.detach()],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn unary_gradients() {
        for seed in 0..50 {
            let x = randn(&[3, 5], seed);
            let r = grad_check(
                |xs| {
                    let x = &xs[0];
                    let pos = x.square().add_scalar(0.5);
                    let y = x
                        .exp()
                        .add(&pos.log())?
                        .add(&pos.sqrt())?
                        .add(&pos.powf(1.7))?
                        .add(&x.softplus())?
                        .add(&x.neg().mul_scalar(0.3))?;
                    weighted_sum(&y, seed)
                },
                &[x],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::<f32>::from_f64(&[-1000.0, 0.0, 1000.0], &[3]).unwrap();
        let y = x.softplus();
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 2f32.ln()).abs() < 1e-7);
        assert_eq!(y.data()[2], 1000.0);
    }
}
