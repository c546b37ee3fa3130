//! Bilinear interpolation kernels (align-corners-false), shared by the graph
//! op and the plain-tensor helpers used on masks and noise fields.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source coordinate mapping for output index `i` of `n2` samples over `n`
/// source samples: clamped align-corners-false.
#[inline]
fn src_coord(i: usize, n: usize, n2: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * (n as f64 / n2 as f64) - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

pub(crate) fn bilinear_forward<F: Scalar>(
    src: &[F],
    h: usize,
    w: usize,
    c: usize,
    h2: usize,
    w2: usize,
    dst: &mut [F],
) {
    debug_assert_eq!(src.len(), h * w * c);
    debug_assert_eq!(dst.len(), h2 * w2 * c);
    for i in 0..h2 {
        let (y0, y1, fy) = src_coord(i, h, h2);
        let fy = F::from_f64(fy);
        for j in 0..w2 {
            let (x0, x1, fx) = src_coord(j, w, w2);
            let fx = F::from_f64(fx);
            for ch in 0..c {
                let v00 = src[(y0 * w + x0) * c + ch];
                let v01 = src[(y0 * w + x1) * c + ch];
                let v10 = src[(y1 * w + x0) * c + ch];
                let v11 = src[(y1 * w + x1) * c + ch];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[(i * w2 + j) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
}

/// Scatter the output-side gradient back through the interpolation weights.
pub(crate) fn bilinear_backward<F: Scalar>(
    grad_out: &[F],
    h: usize,
    w: usize,
    c: usize,
    h2: usize,
    w2: usize,
    grad_src: &mut [F],
) {
    debug_assert_eq!(grad_out.len(), h2 * w2 * c);
    debug_assert_eq!(grad_src.len(), h * w * c);
    for i in 0..h2 {
        let (y0, y1, fy) = src_coord(i, h, h2);
        for j in 0..w2 {
            let (x0, x1, fx) = src_coord(j, w, w2);
            let w00 = F::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = F::from_f64((1.0 - fy) * fx);
            let w10 = F::from_f64(fy * (1.0 - fx));
            let w11 = F::from_f64(fy * fx);
            for ch in 0..c {
                let g = grad_out[(i * w2 + j) * c + ch];
                grad_src[(y0 * w + x0) * c + ch] += g * w00;
                grad_src[(y0 * w + x1) * c + ch] += g * w01;
                grad_src[(y1 * w + x0) * c + ch] += g * w10;
                grad_src[(y1 * w + x1) * c + ch] += g * w11;
            }
        }
    }
}

/// Resize an `[h, w, c]` (or `[h, w]`, treated as one channel) tensor.
pub fn bilinear_resize_tensor<F: Scalar>(t: &Tensor<F>, h2: usize, w2: usize) -> Result<Tensor<F>> {
    let (h, w, c) = match t.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(CoreError::dim(
                "bilinear_resize",
                format!("expected [h, w] or [h, w, c], got {:?}", other),
            ))
        }
    };
    if h2 == 0 || w2 == 0 {
        return Err(CoreError::dim("bilinear_resize", "target dimensions must be >= 1"));
    }
    let mut out = vec![F::zero(); h2 * w2 * c];
    bilinear_forward(t.data(), h, w, c, h2, w2, &mut out);
    let shape = if t.shape().len() == 2 { vec![h2, w2] } else { vec![h2, w2, c] };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar interpolator: evaluates one output sample at a time
    /// straight from the definition.
    fn reference_1d(src: &[f64], n2: usize) -> Vec<f64> {
        let n = src.len();
        (0..n2)
            .map(|i| {
                let s = ((i as f64 + 0.5) * (n as f64 / n2 as f64) - 0.5).max(0.0);
                let lo = (s.floor() as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                let f = s - lo as f64;
                src[lo] * (1.0 - f) + src[hi] * f
            })
            .collect()
    }

    #[test]
    fn column_upsample_matches_scalar_reference() {
        // 2x1 field [0, 1] -> 4x1
        let t = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        let out = bilinear_resize_tensor(&t, 4, 1).unwrap();
        let expect = reference_1d(&[0.0, 1.0], 4);
        assert_eq!(expect, vec![0.0, 0.25, 0.75, 1.0]);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_field_preserved() {
        let t = Tensor::full(&[2, 3], 0.7f64);
        let out = bilinear_resize_tensor(&t, 9, 5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
