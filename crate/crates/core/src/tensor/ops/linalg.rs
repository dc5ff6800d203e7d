use crate::error::{Error, Result};
use crate::tensor::{gemm, macs, Float, Mat, Tensor};

impl<T: Float> Tensor<T> {
    /// Batched matrix product `(..., M, K) x (..., K, N)`; `other` may also be
    /// a single `(K, N)` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ra, rb) = (self.rank(), other.rank());
        let shared = rb == 2;
        let bad = ra < 2
            || rb < 2
            || (!shared && (ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2]))
            || self.shape()[ra - 1] != other.shape()[rb - 2];
        if bad {
            return Err(Error::Config(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k, n) = (self.shape()[ra - 2], self.shape()[ra - 1], other.shape()[rb - 1]);
        let batch: usize = self.shape()[..ra - 2].iter().product();
        macs::record((batch * m * k * n) as u64);
        let (a, b) = (self.data_rc(), other.data_rc());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bs = if shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                T::one(),
                Mat::rm(&a[i * m * k..(i + 1) * m * k], k),
                Mat::rm(&b[bs..bs + k * n], n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(out, shape, "matmul", &[self, other], move |g| {
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let bs = if shared { 0 } else { i * k * n };
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        Mat::rm(&g[i * m * n..(i + 1) * m * n], n),
                        Mat::tr(&b[bs..bs + k * n], n),
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); b.len()];
                for i in 0..batch {
                    let bs = if shared { 0 } else { i * k * n };
                    let beta = if shared && i > 0 { T::one() } else { T::zero() };
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        Mat::tr(&a[i * m * k..(i + 1) * m * k], k),
                        Mat::rm(&g[i * m * n..(i + 1) * m * n], n),
                        beta,
                        &mut gb[bs..bs + k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the trailing axis: `x . w^T + b` with `w: (Dout, Din)`.
    pub fn linear(&self, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let din = *self.shape().last().unwrap_or(&0);
        if w.rank() != 2 || w.shape()[1] != din || self.rank() == 0 {
            return Err(Error::Config(format!(
                "linear: input {:?} does not match weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let dout = w.shape()[0];
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::Config(format!("linear: bias {:?} for {dout} outputs", b.shape())));
            }
        }
        let rows = self.numel() / din.max(1);
        macs::record((rows * din * dout) as u64);
        let (x, wd) = (self.data_rc(), w.data_rc());
        let mut out = vec![T::zero(); rows * dout];
        gemm(rows, din, dout, T::one(), Mat::rm(&x, din), Mat::tr(&wd, din), T::zero(), &mut out);
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let (need_x, need_w) = (self.requires_grad(), w.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let mut inputs = vec![self, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(out, shape, "linear", &inputs, move |g| {
            let gx = need_x.then(|| {
                let mut gx = vec![T::zero(); rows * din];
                gemm(rows, dout, din, T::one(), Mat::rm(g, dout), Mat::rm(&wd, din), T::zero(), &mut gx);
                gx
            });
            let gw = need_w.then(|| {
                let mut gw = vec![T::zero(); dout * din];
                gemm(dout, rows, din, T::one(), Mat::tr(g, dout), Mat::rm(&x, din), T::zero(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::grad_check;
    use crate::tensor::ops::test_util::{randn, weighted_sum};
    use crate::tensor::Tensor;

    #[test]
    fn linear_reference_cases() {
        let x = Tensor::<f64>::from_f64(&[1., 2.], &[2]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1., 1.], &[1, 2]).unwrap();
        assert_eq!(x.linear(&w, None).unwrap().data(), &[3.]);

        let x = randn(&[4, 7, 16], 3);
        let w = randn(&[8, 16], 4);
        assert_eq!(x.linear(&w, None).unwrap().shape(), &[4, 7, 8]);

        let mut eye = vec![0.0; 16 * 16];
        (0..16).for_each(|i| eye[i * 16 + i] = 1.0);
        let eye = Tensor::new(eye, &[16, 16]).unwrap();
        let zero_bias = Tensor::zeros(&[16]);
        assert_eq!(x.linear(&eye, Some(&zero_bias)).unwrap().data(), x.data());
        assert!(x.linear(&randn(&[8, 15], 5), None).is_err());
    }

    #[test]
    fn linear_parameter_count_example() {
        // a 16 -> 8 layer with bias holds 16*8 + 8 scalars
        let w = randn(&[8, 16], 0);
        let b = randn(&[8], 1);
        assert_eq!(w.numel() + b.numel(), 136);
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[5., 6., 7., 8.], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
        assert!(a.matmul(&randn(&[3, 2], 0)).is_err());
    }

    #[test]
    fn linear_gradients() {
        for seed in 0..50 {
            let x = randn(&[3, 2, 5], seed);
            let w = randn(&[4, 5], seed + 100);
            let b = randn(&[4], seed + 200);
            let r = grad_check(
                |xs| weighted_sum(&xs[0].linear(&xs[1], Some(&xs[2]))?, seed),
                &[x, w, b],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-7, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn matmul_gradients() {
        for seed in 0..50 {
            let a = randn(&[2, 3, 4, 5], seed);
            let b = randn(&[2, 3, 5, 2], seed + 1);
            let c = randn(&[5, 3], seed + 2);
            let r = grad_check(
                |xs| {
                    let p = weighted_sum(&xs[0].matmul(&xs[1])?, seed)?;
                    p.add(&weighted_sum(&xs[0].matmul(&xs[2])?, seed + 1)?)
                },
                &[a, b, c],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "seed {seed}: {r:?}");
        }
    }
}
