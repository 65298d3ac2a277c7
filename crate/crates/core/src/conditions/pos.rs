//! Sinusoidal positional codes over 2-D grids.

use crate::arraymath::{lit, DenseArray, Scalar};

/// Standard interleaved sin/cos code for a 2-D position. The first d/2
/// channels encode x, the rest y; frequencies follow 10000^(-2i/(d/2)).
/// Requires d divisible by 4.
pub fn position_encoding_2d<T: Scalar>(d: usize, x: f64, y: f64) -> DenseArray<T> {
    assert!(d % 4 == 0, "position encoding needs d divisible by 4");
    let half = d / 2;
    let mut out = DenseArray::zeros(&[d]);
    let data = out.data_mut();
    for (offset, v) in [(0usize, x), (half, y)] {
        for i in 0..half / 2 {
            let freq = (10000f64).powf(-(2.0 * i as f64) / half as f64);
            data[offset + 2 * i] = lit::<T>((v * freq).sin());
            data[offset + 2 * i + 1] = lit::<T>((v * freq).cos());
        }
    }
    out
}

/// Positional code for a patch-grid coordinate (row, col).
pub fn patch_position_encoding<T: Scalar>(d: usize, row: usize, col: usize) -> DenseArray<T> {
    position_encoding_2d(d, col as f64, row as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_distinguish_positions() {
        let a = position_encoding_2d::<f64>(16, 1.0, 2.0);
        let b = position_encoding_2d::<f64>(16, 2.0, 1.0);
        let c = position_encoding_2d::<f64>(16, 1.0, 2.0);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }

    #[test]
    fn magnitudes_are_bounded() {
        let a = position_encoding_2d::<f64>(64, 31.0, 17.0);
        for &v in a.data() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
    }
}
