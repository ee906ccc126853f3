//! Noise-stability measurements: per-sample layer cushions and interlayer
//! cushions.
//!
//! A convolution is viewed in its im2col form: the operator is the
//! `D x (C*3*3)` matrix of kernel weights, applied to the matrix of
//! vectorized padded input patches (one column per output position). The
//! per-sample layer cushion is
//!
//! ```text
//! mu = |A x| / (|A|_F * |x|)
//! ```
//!
//! with `|A x|` the Frobenius norm of the bias-free convolution output,
//! `|A|_F` the kernel Frobenius norm (each weight counted once), and `|x|`
//! the norm of the patch matrix. Under this pairing `mu` always lies in
//! `(0, 1]`, because `|A X|_F <= sigma_max(A) |X|_F <= |A|_F |X|_F`.
//!
//! For residual-kind networks the product `A x` keeps the full effective
//! kernel (the identity is part of it) while `|A|_F` is taken after
//! subtracting 1 from the ID entries, which measures the spread of the
//! learned coefficients rather than the identity. Reports carry the flag;
//! with removal active the `(0, 1]` bound no longer applies.
//!
//! The interlayer cushion materializes the Jacobian of a subnetwork row by
//! row (one frozen backward pass per output coordinate) and evaluates
//! `sqrt(n_i) * |J x| / (|J|_F * |x|)` on the raw input activation.

use crate::error::{Error, Result};
use crate::network::{
    effective_params, forward_effective, frozen_backward, ActivationTrace, NetworkSpec,
    ParamVector, PassCounter,
};
use crate::tensor::{conv2d_forward, Tensor4};

/// Which operator a cushion report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Single(usize),
    Range(usize, usize),
}

/// Per-sample cushion values for one layer or layer range.
#[derive(Debug, Clone)]
pub struct CushionReport {
    pub layer: LayerRef,
    /// `(sample_index, mu)` for every non-degenerate sample.
    pub mus: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub id_removed: bool,
    /// Samples skipped because the input activation was exactly zero.
    pub skipped_zero: usize,
    pub samples: usize,
}

fn summarize(
    layer: LayerRef,
    mus: Vec<(usize, f64)>,
    id_removed: bool,
    skipped_zero: usize,
    samples: usize,
) -> Result<CushionReport> {
    if mus.is_empty() {
        return Err(Error::EmptyReport(format!(
            "all {samples} samples had zero input norm"
        )));
    }
    let n = mus.len() as f64;
    let mean = mus.iter().map(|(_, m)| m).sum::<f64>() / n;
    let var = mus.iter().map(|(_, m)| (m - mean) * (m - mean)).sum::<f64>() / n;
    let min = mus.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
    Ok(CushionReport {
        layer,
        mus,
        mean,
        std: var.sqrt(),
        min,
        id_removed,
        skipped_zero,
        samples,
    })
}

/// Generic matrix cushion `|A X|_F / (|A|_F |X|_F)` for a dense `rows x cols`
/// operator applied to a `cols x xcols` operand.
pub fn matrix_cushion(a: &[f64], rows: usize, cols: usize, x: &[f64], xcols: usize) -> f64 {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(x.len(), cols * xcols);
    let mut num_sq = 0.0;
    for r in 0..rows {
        for xc in 0..xcols {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += a[r * cols + c] * x[c * xcols + xc];
            }
            num_sq += acc * acc;
        }
    }
    let a_f = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let x_f = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    num_sq.sqrt() / (a_f * x_f)
}

/// Frobenius norm of a layer's kernel, optionally after removing 1 from the
/// ID entries (block layers only; elsewhere the flag has no effect).
pub fn kernel_frobenius(params: &ParamVector, layer: usize, id_removed: bool) -> Result<f64> {
    let conv = params
        .convs
        .get(layer - 1)
        .ok_or_else(|| Error::invalid(format!("layer {layer} is not a conv layer")))?;
    let [d, c, _, _] = conv.weights.dims();
    let m = if id_removed && conv.info.is_block() {
        d.min(c)
    } else {
        0
    };
    let mut acc = 0.0;
    for di in 0..d {
        for ci in 0..c {
            for u in 0..3 {
                for v in 0..3 {
                    let mut w = conv.weights.at(di, ci, u, v);
                    if di == ci && di < m && u == 1 && v == 1 {
                        w -= 1.0;
                    }
                    acc += w * w;
                }
            }
        }
    }
    Ok(acc.sqrt())
}

/// Squared Frobenius norm of the im2col patch matrix of one input plane set:
/// every padded 3x3 patch feeding an output position, each input value
/// counted once per patch that contains it.
fn patch_norm_sq(x: &Tensor4, sample: usize, stride: usize) -> f64 {
    let [_, c, h, w] = x.dims();
    let (oh, ow) = (h / stride, w / stride);
    // multiplicity of row y: how many (i, u) pairs with i*stride + u - 1 == y
    let mult_1d = |len: usize, olen: usize| {
        let mut m = vec![0.0f64; len];
        for i in 0..olen {
            for u in 0..3usize {
                let y = (i * stride + u) as isize - 1;
                if y >= 0 && (y as usize) < len {
                    m[y as usize] += 1.0;
                }
            }
        }
        m
    };
    let mrow = mult_1d(h, oh);
    let mcol = mult_1d(w, ow);
    let mut acc = 0.0;
    for ci in 0..c {
        let plane = x.plane(sample, ci);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let my = mrow[y];
            for (xv, mx) in row.iter().zip(&mcol) {
                acc += my * mx * xv * xv;
            }
        }
    }
    acc
}

/// Per-sample layer cushion of convolutional layer `layer` (1-based) over a
/// batch. The input activations are the post-ReLU outputs feeding the layer
/// (the image for layer 1); the bias is excluded from the operator.
pub fn layer_cushion(
    params: &ParamVector,
    spec: &NetworkSpec,
    layer: usize,
    batch: &Tensor4,
    id_removed: bool,
) -> Result<CushionReport> {
    if layer < 1 || layer > spec.conv_layers() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range 1..={}",
            spec.conv_layers()
        )));
    }
    let eff = effective_params(params, spec);
    let trace = forward_effective(&eff, spec, batch)?;
    let conv = &eff.convs[layer - 1];
    let input: &Tensor4 = if layer == 1 {
        batch
    } else {
        &trace.post[layer - 2]
    };
    // With removal active on a residual-kind network the norm is that of
    // the stored coordinates themselves (bitwise, no subtraction error);
    // a plain vector holding transferred weights subtracts instead.
    let a_f = if id_removed && spec.kind != crate::network::ArchKind::Plain {
        kernel_frobenius(&crate::network::pre_transform_params(params, spec), layer, false)?
    } else {
        kernel_frobenius(&eff, layer, id_removed)?
    };
    let zero_bias = vec![0.0; conv.info.out_channels];
    let out = conv2d_forward(input, &conv.weights, &zero_bias, conv.info.stride)?;

    let b = batch.dims()[0];
    let [_, dch, oh, ow] = out.dims();
    let mut mus = Vec::with_capacity(b);
    let mut skipped = 0usize;
    for bi in 0..b {
        let x_f = patch_norm_sq(input, bi, conv.info.stride).sqrt();
        if x_f == 0.0 {
            skipped += 1;
            continue;
        }
        let mut num_sq = 0.0;
        for v in &out.data()[bi * dch * oh * ow..(bi + 1) * dch * oh * ow] {
            num_sq += v * v;
        }
        mus.push((bi, num_sq.sqrt() / (a_f * x_f)));
    }
    summarize(LayerRef::Single(layer), mus, id_removed, skipped, b)
}

/// Per-sample interlayer cushion from the input of layer `from` to the
/// output of layer `to`, with ReLU gates frozen at forward values. The
/// Jacobian is materialized row by row; subnetwork outputs larger than
/// `output_cap` coordinates are refused.
pub fn interlayer_cushion(
    params: &ParamVector,
    spec: &NetworkSpec,
    from: usize,
    to: usize,
    batch: &Tensor4,
    output_cap: usize,
) -> Result<CushionReport> {
    if from < 1 || to < from || to > spec.conv_layers() {
        return Err(Error::invalid(format!(
            "invalid layer range {from}..={to} (conv layers 1..={})",
            spec.conv_layers()
        )));
    }
    let eff = effective_params(params, spec);
    let trace = forward_effective(&eff, spec, batch)?;
    let out_dims = trace.post[to - 1].dims();
    let m = out_dims[1] * out_dims[2] * out_dims[3];
    if m > output_cap {
        return Err(Error::SizeLimit(format!(
            "subnetwork output has {m} coordinates, cap is {output_cap}"
        )));
    }

    let b = batch.dims()[0];
    let mut mus = Vec::with_capacity(b);
    let mut skipped = 0usize;
    let mut counter = PassCounter::default();
    for bi in 0..b {
        let strace = trace.sample(bi);
        let image;
        let x: &Tensor4 = if from == 1 {
            image = strace_input(batch, bi);
            &image
        } else {
            &strace.post[from - 2]
        };
        let n_i = x.len();
        let x_norm = x.frobenius_norm();
        if x_norm == 0.0 {
            skipped += 1;
            continue;
        }
        // J rows via one frozen backward per output coordinate
        let mut j_frob_sq = 0.0;
        let mut jx_sq = 0.0;
        let mut seed = Tensor4::zeros([1, out_dims[1], out_dims[2], out_dims[3]]);
        for q in 0..m {
            seed.data_mut()[q] = 1.0;
            let row = frozen_backward(&eff, &strace, to, from, &seed, &mut counter)?;
            seed.data_mut()[q] = 0.0;
            let mut dot = 0.0;
            for (rv, xv) in row.data().iter().zip(x.data()) {
                j_frob_sq += rv * rv;
                dot += rv * xv;
            }
            jx_sq += dot * dot;
        }
        let mu = (n_i as f64).sqrt() * jx_sq.sqrt() / (j_frob_sq.sqrt() * x_norm);
        mus.push((bi, mu));
    }
    summarize(LayerRef::Range(from, to), mus, false, skipped, b)
}

fn strace_input(batch: &Tensor4, bi: usize) -> Tensor4 {
    let [_, c, h, w] = batch.dims();
    let mut t = Tensor4::zeros([1, c, h, w]);
    for ci in 0..c {
        t.plane_mut(0, ci).copy_from_slice(batch.plane(bi, ci));
    }
    t
}

/// Explicit dense matricization of one conv layer. `kernel_matrix` is the
/// `D x (C*9)` im2col operator; `patches` is the `(C*9) x P` patch matrix of
/// one sample; `toeplitz` is the full `(D*OH*OW) x (C*H*W)` map from the raw
/// input. Refuses layers above `max_entries` matrix entries.
pub struct DenseMatricization {
    pub kernel_matrix: Vec<f64>,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub toeplitz: Vec<f64>,
    pub toeplitz_rows: usize,
    pub toeplitz_cols: usize,
}

pub const DENSE_ORACLE_MAX_ENTRIES: usize = 100_000;

pub fn dense_matricization(
    params: &ParamVector,
    spec: &NetworkSpec,
    layer: usize,
) -> Result<DenseMatricization> {
    let eff = effective_params(params, spec);
    let conv = eff
        .convs
        .get(layer - 1)
        .ok_or_else(|| Error::invalid(format!("layer {layer} is not a conv layer")))?;
    let (d, c) = (conv.info.out_channels, conv.info.in_channels);
    let (h, s) = (conv.info.spatial_in, conv.info.stride);
    let (oh, ow) = (conv.info.spatial_out, conv.info.spatial_out);
    let trows = d * oh * ow;
    let tcols = c * h * h;
    if trows * tcols > DENSE_ORACLE_MAX_ENTRIES {
        return Err(Error::SizeLimit(format!(
            "dense matricization would hold {} entries, cap is {DENSE_ORACLE_MAX_ENTRIES}",
            trows * tcols
        )));
    }

    let mut kernel_matrix = vec![0.0; d * c * 9];
    for di in 0..d {
        for ci in 0..c {
            for u in 0..3 {
                for v in 0..3 {
                    kernel_matrix[di * (c * 9) + ci * 9 + u * 3 + v] = conv.weights.at(di, ci, u, v);
                }
            }
        }
    }

    let mut toeplitz = vec![0.0; trows * tcols];
    for di in 0..d {
        for i in 0..oh {
            for j in 0..ow {
                let row = (di * oh + i) * ow + j;
                for ci in 0..c {
                    for u in 0..3 {
                        for v in 0..3 {
                            let y = (i * s + u) as isize - 1;
                            let x = (j * s + v) as isize - 1;
                            if y < 0 || y >= h as isize || x < 0 || x >= h as isize {
                                continue;
                            }
                            let col = (ci * h + y as usize) * h + x as usize;
                            toeplitz[row * tcols + col] += conv.weights.at(di, ci, u, v);
                        }
                    }
                }
            }
        }
    }

    Ok(DenseMatricization {
        kernel_matrix,
        kernel_rows: d,
        kernel_cols: c * 9,
        toeplitz,
        toeplitz_rows: trows,
        toeplitz_cols: tcols,
    })
}

/// Explicit im2col patch matrix `(C*9) x P` of one sample of `x`.
pub fn im2col_patches(x: &Tensor4, sample: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let [_, c, h, w] = x.dims();
    let (oh, ow) = (h / stride, w / stride);
    let p = oh * ow;
    let rows = c * 9;
    let mut patches = vec![0.0; rows * p];
    for ci in 0..c {
        let plane = x.plane(sample, ci);
        for u in 0..3 {
            for v in 0..3 {
                let row = ci * 9 + u * 3 + v;
                for i in 0..oh {
                    for j in 0..ow {
                        let y = (i * stride + u) as isize - 1;
                        let xx = (j * stride + v) as isize - 1;
                        if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                            continue;
                        }
                        patches[row * p + i * ow + j] = plane[y as usize * w + xx as usize];
                    }
                }
            }
        }
    }
    (patches, rows, p)
}

/// Activations feeding conv layer `layer` for one forward pass.
pub fn layer_input<'a>(trace: &'a ActivationTrace, batch: &'a Tensor4, layer: usize) -> &'a Tensor4 {
    if layer == 1 {
        batch
    } else {
        &trace.post[layer - 2]
    }
}
