use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Folds `(N, C, F, T)` into `(N, C*F, T)`: position `(c, f)` maps to channel `c*F + f`.
pub fn to_1d<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match *x.shape() {
        [n, c, f, t] => x.reshape(&[n, c * f, t]),
        _ => Err(Error::Config(format!("to_1d expects a (N, C, F, T) map, got {:?}", x.shape()))),
    }
}

/// Unfolds `(N, C*F, T)` into `(N, C, F, T)`; the exact inverse of [`to_1d`].
pub fn to_2d<T: Float>(x: &Tensor<T>, channels: usize, freq: usize) -> Result<Tensor<T>> {
    match *x.shape() {
        [n, width, t] if width == channels * freq => x.reshape(&[n, channels, freq, t]),
        [_, width, _] => Err(Error::Config(format!(
            "to_2d: 1D width {width} differs from C*F = {channels}*{freq} = {}",
            channels * freq
        ))),
        _ => Err(Error::Config(format!("to_2d expects a (N, D, T) map, got {:?}", x.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product::<usize>();
        Tensor::new((0..n).map(|v| v as f32).collect(), shape).unwrap()
    }

    #[test]
    fn fold_rule() {
        let x = iota(&[1, 2, 3, 4]);
        let y = to_1d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 6, 4]);
        // (c=1, f=2, t=0) sits at flat 1*12 + 2*4 + 0 in the 2D map
        assert_eq!(y.data()[5 * 4], x.data()[12 + 8]);
    }

    #[test]
    fn width_mismatch_reports_both_products() {
        let x = iota(&[1, 864, 2]);
        assert_eq!(to_2d(&x, 24, 36).unwrap().shape(), &[1, 24, 36, 2]);
        let err = to_2d(&x, 24, 35).unwrap_err().to_string();
        assert!(err.contains("864") && err.contains("840"), "{err}");
    }

    #[test]
    fn stage_shapes_share_width() {
        let c = 5;
        let a = to_1d(&iota(&[1, c, 72, 3])).unwrap();
        let b = to_1d(&iota(&[1, 2 * c, 36, 3])).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn round_trips_are_bit_exact(n in 1usize..3, c in 1usize..9, f in 1usize..20, t in 1usize..9, seed in any::<u32>()) {
            let len = n * c * f * t;
            let data: Vec<f32> = (0..len).map(|i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed) ).map(|v| if v.is_nan() { 0.5 } else { v }).collect();
            let x = Tensor::new(data, &[n, c, f, t]).unwrap();
            let back = to_2d(&to_1d(&x).unwrap(), c, f).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let y = to_1d(&x).unwrap();
            let again = to_1d(&to_2d(&y, c, f).unwrap()).unwrap();
            prop_assert!(again.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
