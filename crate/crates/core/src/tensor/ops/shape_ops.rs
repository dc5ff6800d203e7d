use crate::error::{Error, Result};
use crate::tensor::shape::{broadcast_shape, broadcast_strides, check_axis, contiguous_strides, for_each_index2, numel, split_at_axis};
use crate::tensor::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Row-major reinterpretation with the same volume; shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Config(format!(
                "reshape: volume mismatch {:?} ({}) -> {:?} ({})",
                self.shape(),
                self.numel(),
                shape,
                numel(shape)
            )));
        }
        Ok(Tensor::from_op_rc(self.data_rc(), shape.to_vec(), "reshape", &[self], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!(
                "permute: {perm:?} is not a permutation of {rank} axes"
            )));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let sa: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; rank];
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for_each_index2(&out_shape, &sa, &zeros, |o, ia, _| out[o] = x[ia]);
        let n = x.len();
        let oshape = out_shape.clone();
        Ok(Tensor::from_op(out, out_shape, "permute", &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for_each_index2(&oshape, &sa, &zeros, |o, ia, _| gx[ia] = g[o]);
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), a.max(b), "transpose")?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        check_axis(first.shape(), axis, "concat")?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Config(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(out, shape, "concat", parts, move |g| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &len) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[pos..pos + len * inner]);
                    pos += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Materialized broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let target = broadcast_shape(self.shape(), shape)?;
        if target != shape {
            return Err(Error::Config(format!(
                "broadcast_to: {:?} does not broadcast to {shape:?}",
                self.shape()
            )));
        }
        let sa = broadcast_strides(self.shape(), shape);
        let zeros = vec![0; shape.len()];
        let x = self.data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_index2(shape, &sa, &zeros, |o, ia, _| out[o] = x[ia]);
        let n = x.len();
        let oshape = shape.to_vec();
        Ok(Tensor::from_op(out, shape.to_vec(), "broadcast_to", &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for_each_index2(&oshape, &sa, &zeros, |o, ia, _| gx[ia] += g[o]);
            vec![Some(gx)]
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis, "narrow")?;
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        if start + len > full {
            return Err(Error::Config(format!(
                "narrow: range {start}..{} exceeds extent {full}",
                start + len
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = x.len();
        Ok(Tensor::from_op(out, shape, "narrow", &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
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
    fn reshape_round_trip_and_row_major_rule() {
        let x = randn(&[2, 3, 4], 1);
        let y = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(x.data(), y.data());
        assert!(x.reshape(&[5, 5]).is_err());

        // (1,2,3,4) -> (1,6,4): element (0,1,2,0) lands at channel 1*3+2 = 5
        let z = Tensor::<f64>::new((0..24).map(f64::from).collect(), &[1, 2, 3, 4]).unwrap();
        let folded = z.reshape(&[1, 6, 4]).unwrap();
        let src = z.data()[(3 + 2) * 4];
        assert_eq!(folded.data()[5 * 4], src);
    }

    #[test]
    fn permute_inverse_is_identity() {
        let x = randn(&[2, 3, 4, 5], 2);
        let y = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        // inverse of [2,0,3,1] is [1,3,0,2]
        let back = y.permute(&[1, 3, 0, 2]).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn concat_and_narrow() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[5., 6.], &[2, 1]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().data(), &[2., 5., 4., 6.]);
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn shape_op_gradients() {
        for seed in 0..50 {
            let x = randn(&[2, 3, 4], seed);
            let y = randn(&[2, 1, 4], seed + 7);
            let r = grad_check(
                |xs| {
                    let p = xs[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                    let c = Tensor::concat(&[&xs[0], &xs[1]], 1)?.narrow(1, 1, 3)?;
                    let b = xs[1].broadcast_to(&[2, 3, 4])?;
                    let t = weighted_sum(&p, seed)?.add(&weighted_sum(&c, seed + 1)?)?;
                    t.add(&weighted_sum(&b, seed + 2)?)
                },
                &[x, y],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-7, "seed {seed}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn reshape_is_bit_exact(a in 1usize..6, b in 1usize..6, c in 1usize..6, seed in 0u64..1000) {
            let x = randn(&[a, b, c], seed).cast::<f32>();
            let y = x.reshape(&[a * b, c]).unwrap().reshape(&[a, b * c]).unwrap().reshape(&[a, b, c]).unwrap();
            prop_assert_eq!(x.data(), y.data());
        }
    }
}
