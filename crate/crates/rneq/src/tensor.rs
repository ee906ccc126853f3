//! Dense 4-D tensors and the forward/backward kernels for every layer type
//! the simplified networks need: 3x3 convolution (stride 1 or 2, zero padding
//! of 1), ReLU, global average pooling, a fully-connected layer, and the
//! softmax/cross-entropy head.
//!
//! All arithmetic is in f64. Summation order inside the convolution is a
//! fixed loop nest (channel-major, then kernel row, then kernel column), so
//! repeated calls on identical inputs are bitwise identical and two networks
//! holding bitwise-equal kernels produce bitwise-equal outputs.

use crate::error::{Error, Result};

/// Dense rank-4 tensor, row-major within each 2-D slice, outermost axis
/// first. Axis meaning depends on context: `(batch, channels, height, width)`
/// for activations, `(out_channels, in_channels, kernel_row, kernel_col)`
/// for convolution kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        let n = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx(a, b, c, d)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        let i = self.idx(a, b, c, d);
        self.data[i] = v;
    }

    /// Contiguous `height * width` slice for fixed leading indices `(a, b)`.
    #[inline]
    pub fn plane(&self, a: usize, b: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let off = (a * self.dims[1] + b) * hw;
        &self.data[off..off + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let hw = self.dims[2] * self.dims[3];
        let off = (a * self.dims[1] + b) * hw;
        &mut self.data[off..off + hw]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Gradients of one layer: with respect to its weights, bias, and input.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub grad_weights: Tensor4,
    pub grad_bias: Vec<f64>,
    pub grad_input: Tensor4,
}

fn check_conv_shapes(
    input: &Tensor4,
    weights: &Tensor4,
    bias: &[f64],
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let [b, c, h, w] = input.dims();
    let [d, ck, ku, kv] = weights.dims();
    if ku != 3 || kv != 3 {
        return Err(Error::invalid(format!("kernel must be 3x3, got {ku}x{kv}")));
    }
    if ck != c {
        return Err(Error::invalid(format!(
            "kernel expects {ck} input channels, input has {c}"
        )));
    }
    if bias.len() != d {
        return Err(Error::invalid(format!(
            "bias length {} does not match {d} output channels",
            bias.len()
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "spatial dims {h}x{w} not divisible by stride {stride}"
        )));
    }
    Ok((b, c, h, w, d, h / stride, w / stride))
}

/// Output-column range `(j_lo, j_hi)` for which `j*stride + dv` lands inside
/// `0..w`, clamped to `0..ow`. `None` when the range is empty.
#[inline]
fn col_range(w: usize, ow: usize, stride: usize, dv: isize) -> Option<(usize, usize)> {
    let j_lo = if dv < 0 {
        ((-dv) as usize + stride - 1) / stride
    } else {
        0
    };
    let hi = w as isize - 1 - dv;
    if hi < 0 {
        return None;
    }
    let j_hi = (hi as usize / stride).min(ow - 1);
    if j_lo > j_hi {
        None
    } else {
        Some((j_lo, j_hi))
    }
}

/// 3x3 cross-correlation with zero padding of 1 on every border and bias.
///
/// `out[b,d,i,j] = bias[d] + sum_{c,u,v} w[d,c,u,v] * x[b,c, i*s+u-1, j*s+v-1]`
/// with out-of-range input positions contributing zero. The accumulation
/// order per output element is channel-major, then kernel row, then kernel
/// column.
pub fn conv2d_forward(
    input: &Tensor4,
    weights: &Tensor4,
    bias: &[f64],
    stride: usize,
) -> Result<Tensor4> {
    let (bn, cn, h, w, dn, oh, ow) = check_conv_shapes(input, weights, bias, stride)?;
    let mut out = Tensor4::zeros([bn, dn, oh, ow]);
    let wdat = weights.data();
    for b in 0..bn {
        for d in 0..dn {
            let out_plane = &mut out.data[(b * dn + d) * oh * ow..][..oh * ow];
            out_plane.fill(bias[d]);
            for c in 0..cn {
                let x = &input.data[(b * cn + c) * h * w..][..h * w];
                for u in 0..3 {
                    let du = u as isize - 1;
                    for v in 0..3 {
                        let dv = v as isize - 1;
                        let wv = wdat[((d * cn + c) * 3 + u) * 3 + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((j_lo, j_hi)) = col_range(w, ow, stride, dv) else {
                            continue;
                        };
                        for i in 0..oh {
                            let y = (i * stride) as isize + du;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = &x[y as usize * w..y as usize * w + w];
                            let orow = &mut out_plane[i * ow..i * ow + ow];
                            if stride == 1 {
                                let xs = &xrow[(j_lo as isize + dv) as usize..];
                                for (oj, xj) in orow[j_lo..=j_hi].iter_mut().zip(xs) {
                                    *oj += wv * xj;
                                }
                            } else {
                                for j in j_lo..=j_hi {
                                    let xc = ((j * stride) as isize + dv) as usize;
                                    orow[j] += wv * xrow[xc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `sum(upstream ⊙ conv2d_forward(input, ...))` with
/// respect to weights, bias, and input.
pub fn conv2d_backward(
    input: &Tensor4,
    weights: &Tensor4,
    stride: usize,
    upstream: &Tensor4,
) -> Result<LayerGrad> {
    let [d_exp, _, _, _] = weights.dims();
    let bias_dummy = vec![0.0; d_exp];
    let (bn, cn, h, w, dn, oh, ow) = check_conv_shapes(input, weights, &bias_dummy, stride)?;
    if upstream.dims() != [bn, dn, oh, ow] {
        return Err(Error::invalid(format!(
            "upstream dims {:?} do not match expected {:?}",
            upstream.dims(),
            [bn, dn, oh, ow]
        )));
    }

    let mut grad_w = Tensor4::zeros(weights.dims());
    let mut grad_b = vec![0.0; dn];
    let mut grad_x = Tensor4::zeros(input.dims());
    let wdat = weights.data();

    for b in 0..bn {
        for d in 0..dn {
            let up = upstream.plane(b, d);
            let mut acc_b = 0.0;
            for g in up {
                acc_b += *g;
            }
            grad_b[d] += acc_b;

            for c in 0..cn {
                let x = input.plane(b, c);
                for u in 0..3 {
                    let du = u as isize - 1;
                    for v in 0..3 {
                        let dv = v as isize - 1;
                        let Some((j_lo, j_hi)) = col_range(w, ow, stride, dv) else {
                            continue;
                        };
                        let mut acc_w = 0.0;
                        for i in 0..oh {
                            let y = (i * stride) as isize + du;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = &x[y as usize * w..y as usize * w + w];
                            let uprow = &up[i * ow..i * ow + ow];
                            for j in j_lo..=j_hi {
                                let xc = (j * stride) as isize + dv;
                                acc_w += uprow[j] * xrow[xc as usize];
                            }
                        }
                        let wi = ((d * cn + c) * 3 + u) * 3 + v;
                        grad_w.data_mut()[wi] += acc_w;
                    }
                }
            }
        }
    }

    for b in 0..bn {
        for d in 0..dn {
            let up = &upstream.data[(b * dn + d) * oh * ow..][..oh * ow];
            for c in 0..cn {
                let gx = &mut grad_x.data[(b * cn + c) * h * w..][..h * w];
                for u in 0..3 {
                    let du = u as isize - 1;
                    for v in 0..3 {
                        let dv = v as isize - 1;
                        let wv = wdat[((d * cn + c) * 3 + u) * 3 + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((j_lo, j_hi)) = col_range(w, ow, stride, dv) else {
                            continue;
                        };
                        for i in 0..oh {
                            let y = (i * stride) as isize + du;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let gxrow = &mut gx[y as usize * w..y as usize * w + w];
                            let uprow = &up[i * ow..i * ow + ow];
                            for j in j_lo..=j_hi {
                                let xc = ((j * stride) as isize + dv) as usize;
                                gxrow[xc] += wv * uprow[j];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(LayerGrad {
        grad_weights: grad_w,
        grad_bias: grad_b,
        grad_input: grad_x,
    })
}

/// Input gradient only: the transpose of the convolution applied to
/// `upstream`. Cheaper than [`conv2d_backward`] when weight and bias
/// gradients are not needed (Jacobian rows, gradient-flow passes).
pub fn conv2d_backward_input(
    weights: &Tensor4,
    stride: usize,
    upstream: &Tensor4,
    input_hw: usize,
) -> Result<Tensor4> {
    let [bn, dn, oh, ow] = upstream.dims();
    let [dk, cn, ku, kv] = weights.dims();
    if ku != 3 || kv != 3 || dk != dn {
        return Err(Error::invalid(format!(
            "weights {:?} incompatible with upstream {:?}",
            weights.dims(),
            upstream.dims()
        )));
    }
    let (h, w) = (input_hw, input_hw);
    if oh * stride != h || ow * stride != w {
        return Err(Error::invalid(format!(
            "upstream {oh}x{ow} with stride {stride} does not map to input {h}x{w}"
        )));
    }
    let mut grad_x = Tensor4::zeros([bn, cn, h, w]);
    let wdat = weights.data();
    for b in 0..bn {
        for d in 0..dn {
            let up = &upstream.data[(b * dn + d) * oh * ow..][..oh * ow];
            for c in 0..cn {
                let gx = &mut grad_x.data[(b * cn + c) * h * w..][..h * w];
                for u in 0..3 {
                    let du = u as isize - 1;
                    for v in 0..3 {
                        let dv = v as isize - 1;
                        let wv = wdat[((d * cn + c) * 3 + u) * 3 + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((j_lo, j_hi)) = col_range(w, ow, stride, dv) else {
                            continue;
                        };
                        for i in 0..oh {
                            let y = (i * stride) as isize + du;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let gxrow = &mut gx[y as usize * w..y as usize * w + w];
                            let uprow = &up[i * ow..i * ow + ow];
                            for j in j_lo..=j_hi {
                                let xc = ((j * stride) as isize + dv) as usize;
                                gxrow[xc] += wv * uprow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// Elementwise `max(x, 0)`.
pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient gate: passes `upstream` where `x > 0`, zero elsewhere.
/// The derivative at exactly zero is defined as zero.
pub fn relu_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    if x.dims() != upstream.dims() {
        return Err(Error::invalid(format!(
            "relu_backward dims mismatch: {:?} vs {:?}",
            x.dims(),
            upstream.dims()
        )));
    }
    let mut g = upstream.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Global average pooling: the window must equal the full spatial extent.
/// Returns a `[B, C, 1, 1]` tensor of per-channel means.
pub fn avgpool_forward(x: &Tensor4, window: usize) -> Result<Tensor4> {
    let [b, c, h, w] = x.dims();
    if h != window || w != window {
        return Err(Error::invalid(format!(
            "pooling window {window} must equal spatial extent {h}x{w}"
        )));
    }
    let scale = 1.0 / (window * window) as f64;
    let mut out = Tensor4::zeros([b, c, 1, 1]);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for v in x.plane(bi, ci) {
                acc += *v;
            }
            out.set(bi, ci, 0, 0, acc * scale);
        }
    }
    Ok(out)
}

/// Spreads `upstream / window^2` uniformly over each channel plane.
pub fn avgpool_backward(upstream: &Tensor4, window: usize) -> Result<Tensor4> {
    let [b, c, h, w] = upstream.dims();
    if h != 1 || w != 1 {
        return Err(Error::invalid(format!(
            "avgpool upstream must be [B,C,1,1], got {:?}",
            upstream.dims()
        )));
    }
    let scale = 1.0 / (window * window) as f64;
    let mut out = Tensor4::zeros([b, c, window, window]);
    for bi in 0..b {
        for ci in 0..c {
            let g = upstream.at(bi, ci, 0, 0) * scale;
            out.plane_mut(bi, ci).fill(g);
        }
    }
    Ok(out)
}

/// Affine map `y = W x + b` where `W` is `bias.len() x x.len()` row-major.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let k = bias.len();
    let f = x.len();
    if weights.len() != k * f {
        return Err(Error::invalid(format!(
            "dense weights length {} does not match {k}x{f}",
            weights.len()
        )));
    }
    let mut y = bias.to_vec();
    for (row, yk) in y.iter_mut().enumerate() {
        let wrow = &weights[row * f..(row + 1) * f];
        let mut acc = 0.0;
        for (wv, xv) in wrow.iter().zip(x) {
            acc += wv * xv;
        }
        *yk += acc;
    }
    Ok(y)
}

/// Exact gradients of `sum(upstream ⊙ dense_forward(x, ...))`:
/// `(grad_weights, grad_bias, grad_x)`.
pub fn dense_backward(
    x: &[f64],
    weights: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let k = upstream.len();
    let f = x.len();
    if weights.len() != k * f {
        return Err(Error::invalid(format!(
            "dense weights length {} does not match {k}x{f}",
            weights.len()
        )));
    }
    let mut grad_w = vec![0.0; k * f];
    let grad_b = upstream.to_vec();
    let mut grad_x = vec![0.0; f];
    for row in 0..k {
        let g = upstream[row];
        let wrow = &weights[row * f..(row + 1) * f];
        let grow = &mut grad_w[row * f..(row + 1) * f];
        for fi in 0..f {
            grow[fi] = g * x[fi];
            grad_x[fi] += g * wrow[fi];
        }
    }
    Ok((grad_w, grad_b, grad_x))
}

/// Cross-entropy loss of a softmax over `logits` against `label`, with
/// log-sum-exp stabilization. Returns the loss and its gradient with respect
/// to the logits, `softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if label >= k {
        return Err(Error::invalid(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut probs = vec![0.0; k];
    for (p, z) in probs.iter_mut().zip(logits) {
        *p = (z - m).exp();
        sum += *p;
    }
    let loss = sum.ln() - (logits[label] - m);
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs[label] -= 1.0;
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
        let n = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= abs + rel * a.abs().max(b.abs())
    }

    #[test]
    fn conv_zero_input_gives_bias_planes() {
        let x = Tensor4::zeros([2, 3, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(&mut rng, [2, 3, 3, 3]);
        let bias = vec![0.5, -1.25];
        let out = conv2d_forward(&x, &w, &bias, 1).unwrap();
        for b in 0..2 {
            for d in 0..2 {
                assert!(out.plane(b, d).iter().all(|v| *v == bias[d]));
            }
        }
    }

    #[test]
    fn conv_center_tap_identity() {
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![3.5]).unwrap();
        let mut w = Tensor4::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, -2.0);
        let out = conv2d_forward(&x, &w, &[0.0], 1).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), -2.0 * 3.5);
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, [1, 2, 4, 4]);
        let w = random_tensor(&mut rng, [3, 2, 3, 3]);
        let bias = vec![0.1, -0.2, 0.3];
        let out = conv2d_forward(&x, &w, &bias, 2).unwrap();
        let reference = oracle::conv2d_reference(&x, &w, &bias, 2);
        assert_eq!(out.dims(), reference.dims());
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!(rel_close(*a, *b, 1e-12, 0.0), "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_oracle_property(
            b in 1usize..=2,
            c in 1usize..=4,
            d in 1usize..=3,
            hw_half in 1usize..=4,
            stride in 1usize..=2,
            seed in 0u64..1000,
        ) {
            let hw = 2 * hw_half; // divisible by either stride
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, [b, c, hw, hw]);
            let w = random_tensor(&mut rng, [d, c, 3, 3]);
            let bias: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = conv2d_forward(&x, &w, &bias, stride).unwrap();
            let reference = oracle::conv2d_reference(&x, &w, &bias, stride);
            for (a, r) in out.data().iter().zip(reference.data()) {
                prop_assert!(rel_close(*a, *r, 1e-12, 1e-15));
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let w = Tensor4::zeros([3, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &[0.0; 2], 1).is_err()); // bias len
        let w5 = Tensor4::zeros([3, 2, 5, 5]);
        assert!(conv2d_forward(&x, &w5, &[0.0; 3], 1).is_err()); // kernel size
        let wc = Tensor4::zeros([3, 1, 3, 3]);
        assert!(conv2d_forward(&x, &wc, &[0.0; 3], 1).is_err()); // channel mismatch
        assert!(conv2d_forward(&x, &w, &[0.0; 3], 3).is_err()); // stride
        let x5 = Tensor4::zeros([1, 2, 5, 5]);
        assert!(conv2d_forward(&x5, &w, &[0.0; 3], 2).is_err()); // divisibility
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, [1, 2, 4, 4]);
        let w = random_tensor(&mut rng, [2, 2, 3, 3]);
        let up = Tensor4::zeros([1, 2, 4, 4]);
        let g = conv2d_backward(&x, &w, 1, &up).unwrap();
        assert!(g.grad_weights.data().iter().all(|v| *v == 0.0));
        assert!(g.grad_bias.iter().all(|v| *v == 0.0));
        assert!(g.grad_input.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_backward_center_tap_scalar_chain() {
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let mut w = Tensor4::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, -0.5);
        let up = Tensor4::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let g = conv2d_backward(&x, &w, 1, &up).unwrap();
        assert_eq!(g.grad_weights.at(0, 0, 1, 1), 2.0 * 3.0);
        assert_eq!(g.grad_input.at(0, 0, 0, 0), -0.5 * 3.0);
        assert_eq!(g.grad_bias[0], 3.0);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(11 + stride as u64);
            let x = random_tensor(&mut rng, [1, 2, 4, 4]);
            let w = random_tensor(&mut rng, [2, 2, 3, 3]);
            let bias = vec![0.05, -0.1];
            let up = random_tensor(&mut rng, [1, 2, 4 / stride, 4 / stride]);

            let g = conv2d_backward(&x, &w, stride, &up).unwrap();

            // d/dw of sum(up ⊙ out)
            let fd_w = oracle::finite_diff_grad(
                &|wv: &[f64]| {
                    let wt = Tensor4::from_vec(w.dims(), wv.to_vec()).unwrap();
                    let out = conv2d_forward(&x, &wt, &bias, stride).unwrap();
                    out.data().iter().zip(up.data()).map(|(o, u)| o * u).sum()
                },
                w.data(),
                1e-5,
            );
            for (a, b) in g.grad_weights.data().iter().zip(&fd_w) {
                assert!(rel_close(*a, *b, 1e-6, 1e-9), "grad_w {a} vs fd {b}");
            }

            let fd_x = oracle::finite_diff_grad(
                &|xv: &[f64]| {
                    let xt = Tensor4::from_vec(x.dims(), xv.to_vec()).unwrap();
                    let out = conv2d_forward(&xt, &w, &bias, stride).unwrap();
                    out.data().iter().zip(up.data()).map(|(o, u)| o * u).sum()
                },
                x.data(),
                1e-5,
            );
            for (a, b) in g.grad_input.data().iter().zip(&fd_x) {
                assert!(rel_close(*a, *b, 1e-6, 1e-9), "grad_x {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn relu_cases() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let up = Tensor4::from_vec([1, 1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let g = relu_backward(&x, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random_tensor(&mut rng, [1, 2, 3, 3]);
        // keep away from the kink so central differences are valid
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.5;
            }
        }
        let up = random_tensor(&mut rng, [1, 2, 3, 3]);
        let g = relu_backward(&x, &up).unwrap();
        let fd = oracle::finite_diff_grad(
            &|xv: &[f64]| {
                let xt = Tensor4::from_vec(x.dims(), xv.to_vec()).unwrap();
                relu_forward(&xt)
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(o, u)| o * u)
                    .sum()
            },
            x.data(),
            1e-5,
        );
        for (a, b) in g.data().iter().zip(&fd) {
            assert!(rel_close(*a, *b, 1e-6, 1e-9));
        }
    }

    #[test]
    fn avgpool_cases() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool_forward(&x, 2).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 2.5);

        let c = Tensor4::from_vec([1, 1, 3, 3], vec![7.0; 9]).unwrap();
        assert_eq!(avgpool_forward(&c, 3).unwrap().at(0, 0, 0, 0), 7.0);

        assert!(avgpool_forward(&x, 3).is_err());

        let up = Tensor4::from_vec([1, 1, 1, 1], vec![8.0]).unwrap();
        let g = avgpool_backward(&up, 2).unwrap();
        assert!(g.data().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn dense_cases() {
        let x = vec![1.0, 2.0];
        let b = vec![0.5, -0.5];
        // W = 0 -> y = b
        let y = dense_forward(&x, &[0.0; 4], &b).unwrap();
        assert_eq!(y, b);
        // identity-like 2x2
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y, vec![1.5, 1.5]);
        assert!(dense_forward(&x, &[0.0; 3], &b).is_err());
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.0; 3];
        let (gw, gb, gx) = dense_backward(&x, &w, &up).unwrap();
        assert_eq!(gb, up);
        let fd_w = oracle::finite_diff_grad(
            &|wv: &[f64]| {
                dense_forward(&x, wv, &bias)
                    .unwrap()
                    .iter()
                    .zip(&up)
                    .map(|(o, u)| o * u)
                    .sum()
            },
            &w,
            1e-5,
        );
        for (a, b) in gw.iter().zip(&fd_w) {
            assert!(rel_close(*a, *b, 1e-6, 1e-9));
        }
        let fd_x = oracle::finite_diff_grad(
            &|xv: &[f64]| {
                dense_forward(xv, &w, &bias)
                    .unwrap()
                    .iter()
                    .zip(&up)
                    .map(|(o, u)| o * u)
                    .sum()
            },
            &x,
            1e-5,
        );
        for (a, b) in gx.iter().zip(&fd_x) {
            assert!(rel_close(*a, *b, 1e-6, 1e-9));
        }
    }

    #[test]
    fn softmax_uniform_logits_is_ln_k() {
        let (loss, grad) = softmax_xent(&[0.25; 10], 3).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        assert!((grad[3] - (0.1 - 1.0)).abs() < 1e-12);
        assert!((grad[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let (loss, _) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss >= 0.0 && loss < 1e-100);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (l0, _) = softmax_xent(&logits, 2).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|z| z + 37.5).collect();
        let (l1, _) = softmax_xent(&shifted, 2).unwrap();
        assert!((l0 - l1).abs() <= 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (_, grad) = softmax_xent(&logits, 1).unwrap();
        let fd = oracle::finite_diff_grad(
            &|z: &[f64]| softmax_xent(z, 1).unwrap().0,
            &logits,
            1e-5,
        );
        for (a, b) in grad.iter().zip(&fd) {
            assert!(rel_close(*a, *b, 1e-8, 1e-10));
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_xent(&[1.0], 0).is_err());
        assert!(softmax_xent(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn engine_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_tensor(&mut rng, [2, 3, 4, 4]);
        let w = random_tensor(&mut rng, [4, 3, 3, 3]);
        let bias = vec![0.1, 0.2, 0.3, 0.4];
        let a = conv2d_forward(&x, &w, &bias, 1).unwrap();
        let b = conv2d_forward(&x, &w, &bias, 1).unwrap();
        assert_eq!(a.data(), b.data());
        let up = random_tensor(&mut rng, [2, 4, 4, 4]);
        let g1 = conv2d_backward(&x, &w, 1, &up).unwrap();
        let g2 = conv2d_backward(&x, &w, 1, &up).unwrap();
        assert_eq!(g1.grad_weights.data(), g2.grad_weights.data());
        assert_eq!(g1.grad_input.data(), g2.grad_input.data());
        assert!(a.all_finite());
    }
}
