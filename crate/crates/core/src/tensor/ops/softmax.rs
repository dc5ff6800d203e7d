use std::rc::Rc;

use crate::error::Result;
use crate::tensor::shape::{check_axis, split_at_axis};
use crate::tensor::{Float, Tensor};

/// Applies `f(slice_iter)` over every 1D lane along `axis`.
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, len, inner)))
}

impl<T: Float> Tensor<T> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis, "softmax")?;
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for (base, len, stride) in lanes(self.shape(), axis) {
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[base + k * stride]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (x[base + k * stride] - m).exp();
                y[base + k * stride] = e;
                s += e;
            }
            for k in 0..len {
                y[base + k * stride] /= s;
            }
        }
        let y = Rc::new(y);
        let ys = Rc::clone(&y);
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op_rc(y, shape.clone(), "softmax", &[self], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for (base, len, stride) in lanes(&shape, axis) {
                let mut dot = T::zero();
                for k in 0..len {
                    dot += g[base + k * stride] * ys[base + k * stride];
                }
                for k in 0..len {
                    let i = base + k * stride;
                    gx[i] = ys[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `log(softmax(x))` along `axis` without forming the probabilities' log.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis, "log_softmax")?;
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for (base, len, stride) in lanes(self.shape(), axis) {
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[base + k * stride]);
            }
            let mut s = T::zero();
            for k in 0..len {
                s += (x[base + k * stride] - m).exp();
            }
            let lse = m + s.ln();
            for k in 0..len {
                y[base + k * stride] = x[base + k * stride] - lse;
            }
        }
        let y = Rc::new(y);
        let ys = Rc::clone(&y);
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op_rc(y, shape.clone(), "log_softmax", &[self], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for (base, len, stride) in lanes(&shape, axis) {
                let mut gs = T::zero();
                for k in 0..len {
                    gs += g[base + k * stride];
                }
                for k in 0..len {
                    let i = base + k * stride;
                    gx[i] = g[i] - ys[i].exp() * gs;
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use crate::tensor::grad_check;
    use crate::tensor::ops::test_util::{randn, weighted_sum};
    use crate::tensor::Tensor;

    #[test]
    fn reference_values() {
        let y = Tensor::<f64>::zeros(&[2]).softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from_f64(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[3]).unwrap();
        let y = x.softmax(0).unwrap();
        for (a, b) in y.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let x = randn(&[3, 4], 9);
        let a = x.softmax(1).unwrap();
        let b = x.add_scalar(123.25).softmax(1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients() {
        for seed in 0..50 {
            let x = randn(&[2, 3, 4], seed);
            let r = grad_check(
                |xs| {
                    let a = weighted_sum(&xs[0].softmax(1)?, seed)?;
                    a.add(&weighted_sum(&xs[0].log_softmax(2)?, seed + 1)?)
                },
                &[x],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "seed {seed}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_in_f32(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..40) {
            let x = randn(&[rows, cols], seed).mul_scalar(10.0).cast::<f32>();
            let y = x.softmax(1).unwrap();
            for row in y.data().chunks(cols) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
