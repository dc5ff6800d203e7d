use crate::error::{Error, Result};
use crate::tensor::{gemm, macs, Float, Mat, Tensor};

/// Stride, zero padding and group count of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize), groups: usize) -> Self {
        ConvSpec { stride, padding, groups }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn macs(&self) -> u64 {
        (self.n * self.cout * self.patch() * self.out_hw()) as u64
    }

    /// Unfolds the patches of sample `n`, group `g` into `(patch, oh*ow)`.
    fn im2col<T: Float>(&self, x: &[T], n: usize, g: usize, cols: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let hw = self.out_hw();
        for c in 0..self.cin_g() {
            let plane = &x[((n * self.cin) + g * self.cin_g() + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    for oi in 0..self.oh {
                        let ih = (oi * sh + ki) as isize - ph as isize;
                        let dst = &mut row[oi * self.ow..(oi + 1) * self.ow];
                        if ih < 0 || ih as usize >= self.h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..][..self.w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let iw = (oj * sw + kj) as isize - pw as isize;
                            *d = if iw < 0 || iw as usize >= self.w { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters column gradients back onto the input.
    fn col2im<T: Float>(&self, cols: &[T], n: usize, g: usize, gx: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let hw = self.out_hw();
        for c in 0..self.cin_g() {
            let plane = &mut gx[((n * self.cin) + g * self.cin_g() + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[((c * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    for oi in 0..self.oh {
                        let ih = (oi * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let iw = (oj * sw + kj) as isize - pw as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                dst[iw as usize] += row[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Visits (input offset, weight offset, output offset) triples of a
    /// depthwise convolution in a fixed order.
    fn depthwise_taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        for n in 0..self.n {
            for c in 0..self.cin {
                let xb = (n * self.cin + c) * self.h * self.w;
                let ob = (n * self.cout + c) * self.out_hw();
                let wb = c * self.kh * self.kw;
                for oi in 0..self.oh {
                    for ki in 0..self.kh {
                        let ih = (oi * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for kj in 0..self.kw {
                            let wo = wb + ki * self.kw + kj;
                            for oj in 0..self.ow {
                                let iw = (oj * sw + kj) as isize - pw as isize;
                                if iw >= 0 && (iw as usize) < self.w {
                                    f(xb + ih as usize * self.w + iw as usize, wo, ob + oi * self.ow + oj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    /// 2D cross-correlation of `(N, Cin, H, W)` with `(Cout, Cin/g, Kh, Kw)`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        let geo = geometry(self.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
        macs::record(geo.macs());
        let (x, w) = (self.data_rc(), weight.data_rc());
        let hw = geo.out_hw();
        let mut out = vec![T::zero(); geo.n * geo.cout * hw];
        if geo.is_depthwise() {
            geo.depthwise_taps(|xi, wi, oi| out[oi] += x[xi] * w[wi]);
        } else {
            let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { geo.patch() * hw }];
            for n in 0..geo.n {
                for g in 0..geo.groups {
                    let colv: &[T] = if geo.is_pointwise() {
                        &x[(n * geo.cin + g * geo.cin_g()) * hw..][..geo.cin_g() * hw]
                    } else {
                        geo.im2col(&x, n, g, &mut cols);
                        &cols
                    };
                    let wg = &w[g * geo.cout_g() * geo.patch()..][..geo.cout_g() * geo.patch()];
                    let og = &mut out[(n * geo.cout + g * geo.cout_g()) * hw..][..geo.cout_g() * hw];
                    gemm(geo.cout_g(), geo.patch(), hw, T::one(), Mat::rm(wg, geo.patch()), Mat::rm(colv, hw), T::zero(), og);
                }
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let bv = bd[i % geo.cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let shape = vec![geo.n, geo.cout, geo.oh, geo.ow];
        Ok(Tensor::from_op(out, shape, "conv2d", &inputs, move |g| {
            let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
            let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
            if geo.is_depthwise() {
                geo.depthwise_taps(|xi, wi, oi| {
                    if let Some(gx) = gx.as_mut() {
                        gx[xi] += g[oi] * w[wi];
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[wi] += g[oi] * x[xi];
                    }
                });
            } else {
                let mut cols = vec![T::zero(); geo.patch() * hw];
                let mut dcols = vec![T::zero(); geo.patch() * hw];
                for n in 0..geo.n {
                    for gi in 0..geo.groups {
                        let gout = &g[(n * geo.cout + gi * geo.cout_g()) * hw..][..geo.cout_g() * hw];
                        let woff = gi * geo.cout_g() * geo.patch();
                        if let Some(gw) = gw.as_mut() {
                            let colv: &[T] = if geo.is_pointwise() {
                                &x[(n * geo.cin + gi * geo.cin_g()) * hw..][..geo.cin_g() * hw]
                            } else {
                                geo.im2col(&x, n, gi, &mut cols);
                                &cols
                            };
                            let gwg = &mut gw[woff..woff + geo.cout_g() * geo.patch()];
                            gemm(geo.cout_g(), hw, geo.patch(), T::one(), Mat::rm(gout, hw), Mat::tr(colv, hw), T::one(), gwg);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wg = &w[woff..woff + geo.cout_g() * geo.patch()];
                            if geo.is_pointwise() {
                                let dst = &mut gx[(n * geo.cin + gi * geo.cin_g()) * hw..][..geo.cin_g() * hw];
                                gemm(geo.patch(), geo.cout_g(), hw, T::one(), Mat::tr(wg, geo.patch()), Mat::rm(gout, hw), T::one(), dst);
                            } else {
                                gemm(geo.patch(), geo.cout_g(), hw, T::one(), Mat::tr(wg, geo.patch()), Mat::rm(gout, hw), T::zero(), &mut dcols);
                                geo.col2im(&dcols, n, gi, gx);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut gb = vec![T::zero(); geo.cout];
                    for (i, plane) in g.chunks(hw).enumerate() {
                        let mut s = T::zero();
                        for &v in plane {
                            s += v;
                        }
                        gb[i % geo.cout] += s;
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// 1D cross-correlation of `(N, Cin, L)` with `(Cout, Cin/g, K)`.
    pub fn conv1d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 3 || weight.rank() != 3 {
            return Err(Error::Config(format!(
                "conv1d: expected (N,C,L) input and (Cout,Cin/g,K) weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let s = self.shape();
        let ws = weight.shape();
        let x4 = self.reshape(&[s[0], s[1], 1, s[2]])?;
        let w4 = weight.reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv2d(&w4, bias, ConvSpec::new((1, stride), (0, padding), groups))?;
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }
}

fn geometry(x: &[usize], w: &[usize], b: Option<&[usize]>, spec: ConvSpec) -> Result<Geometry> {
    let err = |msg: String| Err(Error::Config(format!("conv2d: {msg} (input {x:?}, weight {w:?}, {spec:?})")));
    if x.len() != 4 || w.len() != 4 {
        return err("expected rank-4 input and weight".into());
    }
    let g = spec.groups;
    if g == 0 || !x[1].is_multiple_of(g) || !w[0].is_multiple_of(g) {
        return err(format!("channels {} -> {} not divisible by groups {g}", x[1], w[0]));
    }
    if w[1] != x[1] / g {
        return err(format!("weight expects {} input channels per group, input has {}", w[1], x[1] / g));
    }
    if let Some(bs) = b {
        if bs != [w[0]] {
            return err(format!("bias shape {bs:?} for {} output channels", w[0]));
        }
    }
    let oh = ConvSpec::out_len(x[2], w[2], spec.stride.0, spec.padding.0);
    let ow = ConvSpec::out_len(x[3], w[3], spec.stride.1, spec.padding.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return err("kernel larger than padded input or zero stride".into());
    };
    Ok(Geometry {
        n: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
        oh,
        ow,
        groups: g,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::tensor::ops::test_util::{randn, weighted_sum};

    /// Direct seven-loop convolution used as an independent reference.
    fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Vec<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let cog = cout / spec.groups;
        let oh = (h + 2 * spec.padding.0 - kh) / spec.stride.0 + 1;
        let ow = (wd + 2 * spec.padding.1 - kw) / spec.stride.1 + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                let g = co / cog;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cig {
                            for a in 0..kh {
                                for c in 0..kw {
                                    let ih = (i * spec.stride.0 + a) as isize - spec.padding.0 as isize;
                                    let iw = (j * spec.stride.1 + c) as isize - spec.padding.1 as isize;
                                    if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= wd {
                                        continue;
                                    }
                                    let xv = x.data()[((b * cin + g * cig + ci) * h + ih as usize) * wd + iw as usize];
                                    acc += xv * w.data()[((co * cig + ci) * kh + a) * kw + c];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sum_of_nine_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&w, None, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let x = randn(&[2, 1, 5, 7], 0).cast::<f32>();
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let y = x.conv2d(&w, None, ConvSpec::default()).unwrap();
        assert_eq!(y.data(), x.data());
        let x1 = randn(&[2, 1, 9], 1).cast::<f32>();
        let y1 = x1.conv1d(&Tensor::full(&[1, 1, 1], 1.0), None, 1, 0, 1).unwrap();
        assert_eq!(y1.data(), x1.data());
    }

    #[test]
    fn grouped_strided_shape() {
        let x = Tensor::<f32>::zeros(&[2, 8, 9, 50]);
        let w = Tensor::<f32>::zeros(&[16, 2, 3, 3]);
        let y = x.conv2d(&w, None, ConvSpec::new((2, 1), (1, 1), 4)).unwrap();
        assert_eq!(y.shape(), &[2, 16, 5, 50]);
    }

    #[test]
    fn conv1d_hand_values() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5.], &[1, 1, 5]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1., 1., 1.], &[1, 1, 3]).unwrap();
        let y = x.conv1d(&w, None, 1, 1, 1).unwrap();
        assert_eq!(y.data(), &[3., 6., 9., 12., 9.]);
        let dw = x.reshape(&[1, 1, 5]).unwrap();
        let x4 = Tensor::concat(&[&dw, &dw, &dw, &dw], 1).unwrap();
        let y = x4.conv1d(&randn(&[4, 1, 7], 2), None, 1, 3, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5]);
    }

    #[test]
    fn configuration_errors() {
        let x = Tensor::<f32>::zeros(&[1, 6, 5, 5]);
        assert!(x.conv2d(&Tensor::zeros(&[4, 3, 3, 3]), None, ConvSpec::new((1, 1), (0, 0), 4)).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[4, 6, 7, 7]), None, ConvSpec::default()).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[4, 5, 3, 3]), None, ConvSpec::default()).is_err());
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [
            ([2, 4, 6, 7], [6, 2, 3, 3], ConvSpec::new((2, 1), (1, 1), 2)),
            ([1, 3, 5, 5], [4, 3, 1, 1], ConvSpec::default()),
            ([2, 4, 5, 6], [4, 1, 3, 3], ConvSpec::new((1, 1), (1, 1), 4)),
            ([1, 2, 4, 9], [3, 2, 2, 3], ConvSpec::new((2, 2), (0, 1), 1)),
        ];
        for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
            let x = randn(&xs, i as u64);
            let w = randn(&ws, 100 + i as u64);
            let y = x.conv2d(&w, None, spec).unwrap();
            let r = naive_conv2d(&x, &w, spec);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12, "case {i}");
            }
        }
    }

    #[test]
    fn instrumented_macs_follow_formula() {
        let x = Tensor::<f32>::zeros(&[1, 64, 18, 132]);
        let w = Tensor::<f32>::zeros(&[64, 1, 7, 7]);
        let (_, macs) = crate::tensor::macs::count(|| x.conv2d(&w, None, ConvSpec::new((1, 1), (3, 3), 64)).unwrap());
        assert_eq!(macs, 7_451_136);
    }

    #[test]
    fn conv_gradients() {
        let cases = [
            ([2, 4, 5, 6], [6, 2, 3, 3], ConvSpec::new((2, 1), (1, 1), 2)),
            ([2, 3, 4, 5], [2, 3, 1, 1], ConvSpec::default()),
            ([2, 4, 4, 6], [4, 1, 3, 3], ConvSpec::new((1, 1), (1, 1), 4)),
            ([1, 2, 5, 5], [3, 2, 3, 3], ConvSpec::new((2, 2), (1, 1), 1)),
        ];
        for (ci, (xs, ws, spec)) in cases.into_iter().enumerate() {
            for seed in 0..50u64 {
                let x = randn(&xs, seed);
                let w = randn(&ws, seed + 1000);
                let b = randn(&[ws[0]], seed + 2000);
                let r = grad_check(|t| weighted_sum(&t[0].conv2d(&t[1], Some(&t[2]), spec)?, seed), &[x, w, b], 1e-4)
                    .unwrap();
                assert!(r.max_rel_error < 1e-6, "case {ci} seed {seed}: {r:?}");
            }
        }
    }
}
