//! Independent reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the engine kernels: the convolution
//! reference materializes the zero-padded input and runs the naive six-loop
//! summation, and the gradient reference is plain central differences.

use crate::tensor::Tensor4;

/// Naive cross-correlation over an explicitly materialized zero-padded input.
pub fn conv2d_reference(input: &Tensor4, weights: &Tensor4, bias: &[f64], stride: usize) -> Tensor4 {
    let [bn, cn, h, w] = input.dims();
    let [dn, _, ku, kv] = weights.dims();
    assert_eq!((ku, kv), (3, 3));
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = Tensor4::zeros([bn, cn, ph, pw]);
    for b in 0..bn {
        for c in 0..cn {
            for y in 0..h {
                for x in 0..w {
                    padded.set(b, c, y + 1, x + 1, input.at(b, c, y, x));
                }
            }
        }
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Tensor4::zeros([bn, dn, oh, ow]);
    for b in 0..bn {
        for d in 0..dn {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[d];
                    for c in 0..cn {
                        for u in 0..3 {
                            for v in 0..3 {
                                acc += weights.at(d, c, u, v)
                                    * padded.at(b, c, i * stride + u, j * stride + v);
                            }
                        }
                    }
                    out.set(b, d, i, j, acc);
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function, `(f(x+h) - f(x-h)) / 2h`
/// per coordinate.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let fp = f(&probe);
        probe[i] = point[i] - h;
        let fm = f(&probe);
        probe[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Largest mixed relative/absolute discrepancy between two equally long
/// gradient vectors: `max_i |a_i - b_i| / max(1, |a_i|, |b_i|)`.
pub fn max_mixed_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
