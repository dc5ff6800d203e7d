use crate::error::{Error, Result};
use crate::tensor::shape::{broadcast_strides, check_axis, contiguous_strides, for_each_index2, split_at_axis};
use crate::tensor::{Float, Tensor};

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn validate_axes(shape: &[usize], axes: &[usize], op: &str) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        check_axis(shape, a, op)?;
        if axes[..i].contains(&a) {
            return Err(Error::Config(format!("{op}: repeated axis {a}")));
        }
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let n = self.numel();
        Tensor::from_op(vec![acc], vec![], "sum", &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sums over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        validate_axes(self.shape(), axes, "sum_axes")?;
        let in_shape = self.shape().to_vec();
        let kept = reduced_shape(&in_shape, axes);
        let sa = contiguous_strides(&in_shape);
        let sb = broadcast_strides(&kept, &in_shape);
        let mut out = vec![T::zero(); kept.iter().product()];
        let x = self.data();
        for_each_index2(&in_shape, &sa, &sb, |_, ia, ib| out[ib] += x[ia]);
        let out_shape = if keepdim {
            kept.clone()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let n = self.numel();
        Ok(Tensor::from_op(out, out_shape, "sum_axes", &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for_each_index2(&in_shape, &sa, &sb, |_, ia, ib| gx[ia] = g[ib]);
            vec![Some(gx)]
        }))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(T::one() / T::of(count as f64)))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis, "max_axis")?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        if len == 0 {
            return Err(Error::Config("max_axis over empty axis".into()));
        }
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if x[base + k * inner] > x[base + best * inner] {
                        best = k;
                    }
                }
                out[o * inner + i] = x[base + best * inner];
                arg[o * inner + i] = base + best * inner;
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let n = self.numel();
        Ok(Tensor::from_op(out, shape, "max_axis", &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for (j, &src) in arg.iter().enumerate() {
                gx[src] += g[j];
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::grad_check;
    use crate::tensor::ops::test_util::{randn, weighted_sum};
    use crate::tensor::Tensor;

    #[test]
    fn axis_sums() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        assert_eq!(x.sum_axes(&[0], false).unwrap().data(), &[5., 7., 9.]);
        let r = x.sum_axes(&[1], true).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.data(), &[6., 15.]);
        assert_eq!(x.sum_axes(&[0, 1], false).unwrap().data(), &[21.]);
        assert!(x.sum_axes(&[2], false).is_err());
        assert_eq!(x.max_axis(1, false).unwrap().data(), &[3., 6.]);
        assert_eq!(x.mean().item(), 3.5);
    }

    #[test]
    fn reduction_gradients() {
        for seed in 0..50 {
            let x = randn(&[2, 3, 4], seed);
            let r = grad_check(
                |xs| {
                    let a = xs[0].sum_axes(&[0, 2], true)?;
                    let b = xs[0].mean_axes(&[1], false)?;
                    let c = xs[0].max_axis(2, false)?;
                    let y = weighted_sum(&a, seed)?.add(&weighted_sum(&b, seed + 1)?)?;
                    y.add(&weighted_sum(&c, seed + 2)?)
                },
                &[x],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }
}
