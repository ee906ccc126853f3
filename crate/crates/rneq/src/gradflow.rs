//! Dominant-gradient-flow measurements on real networks.
//!
//! For a sample and a conv layer `l`, the loss gradient at the activation
//! `a^(l)` is decomposed by the final-activation channel that mediates it:
//!
//! ```text
//! Theta[i][j][p] = d a_j^(L) / d a_{ip}^(l)  *  d L / d a_j^(L)
//! ```
//!
//! Each `j` costs one backward pass seeded with a unit vector at the pooled
//! final activation, with ReLU gates frozen at their forward values, so one
//! sample costs exactly `4 * base` passes. Summing over `j` recovers the
//! full backward gradient (the final activation is the only path to the
//! loss), which is the completeness check the tests assert.
//!
//! Per channel, `r_i` averages `|Theta_iip| / |sum_{j != i} Theta_ijp|`
//! over positions. `0/0` positions are excluded and counted; a position
//! with a nonzero numerator over a zero denominator makes the whole channel
//! dominant (all signal flows on the diagonal). `sigma` is the fraction of
//! channels with `r_i > 1`, averaged per sample over a batch; channels with
//! no defined ratio count as not dominant.

use crate::error::{Error, Result};
use crate::network::{
    effective_params, forward_effective, frozen_backward, NetworkSpec, ParamVector, PassCounter,
};
use crate::tensor::{avgpool_backward, dense_backward, softmax_xent, Tensor4};

/// The decomposition `Theta[i][j][p]` for one sample at one layer, stored
/// i-major, then j, then position.
#[derive(Debug, Clone)]
pub struct ThetaSlice {
    pub layer: usize,
    /// Channels of `a^(layer)`.
    pub channels: usize,
    /// Number of final sub-activations (`4 * base`).
    pub finals: usize,
    /// Spatial positions of one feature map of `a^(layer)`.
    pub positions: usize,
    pub values: Vec<f64>,
    /// Loss gradient at the final activation, `d L / d a^(L)`.
    pub v: Vec<f64>,
    /// Frozen backward passes spent (the per-sample cost contract).
    pub backward_passes: usize,
}

impl ThetaSlice {
    #[inline]
    pub fn theta(&self, i: usize, j: usize, p: usize) -> f64 {
        self.values[(i * self.finals + j) * self.positions + p]
    }

    /// Test constructor for synthetic decompositions.
    pub fn from_values(
        layer: usize,
        channels: usize,
        finals: usize,
        positions: usize,
        values: Vec<f64>,
    ) -> Result<ThetaSlice> {
        if values.len() != channels * finals * positions {
            return Err(Error::invalid("theta value count does not match dims"));
        }
        Ok(ThetaSlice {
            layer,
            channels,
            finals,
            positions,
            values,
            v: vec![0.0; finals],
            backward_passes: 0,
        })
    }
}

/// Ratio of one channel: `None` when every position was degenerate (0/0);
/// `Some(f64::INFINITY)` when any position had signal over a zero
/// off-diagonal sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRatio {
    pub ratio: Option<f64>,
    pub skipped_positions: usize,
}

impl ChannelRatio {
    pub fn is_dominant(&self) -> bool {
        matches!(self.ratio, Some(r) if r > 1.0)
    }
}

/// Loss gradient at the pooled final activation for one sample.
fn head_gradient(
    eff: &ParamVector,
    trace: &crate::network::ActivationTrace,
    label: usize,
) -> Result<Vec<f64>> {
    let (_, grad_logits) = softmax_xent(trace.logits_of(0), label)?;
    let feat = &trace.pooled.data()[..eff.dense.in_features];
    let (_, _, grad_pooled) = dense_backward(feat, &eff.dense.weights, &grad_logits)?;
    Ok(grad_pooled)
}

/// Computes the full decomposition for one sample at conv layer `layer`.
pub fn compute_theta(
    params: &ParamVector,
    spec: &NetworkSpec,
    image: &Tensor4,
    label: usize,
    layer: usize,
) -> Result<ThetaSlice> {
    let nconv = spec.conv_layers();
    if layer < 1 || layer >= spec.depth() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range 1..{}",
            spec.depth()
        )));
    }
    if layer > nconv {
        return Err(Error::invalid(
            "theta is defined at conv activations, not the dense head",
        ));
    }
    if image.dims()[0] != 1 {
        return Err(Error::invalid("theta is a per-sample quantity"));
    }
    let eff = effective_params(params, spec);
    let trace = forward_effective(&eff, spec, image)?;
    let v = head_gradient(&eff, &trace, label)?;

    let finals = spec.final_channels();
    let dims = trace.post[layer - 1].dims();
    let (channels, positions) = (dims[1], dims[2] * dims[3]);
    let mut values = vec![0.0; channels * finals * positions];
    let mut counter = PassCounter::default();
    let window = spec.pool_window();

    let mut seed_pooled = Tensor4::zeros([1, finals, 1, 1]);
    for j in 0..finals {
        seed_pooled.data_mut()[j] = 1.0;
        let at_last = avgpool_backward(&seed_pooled, window)?;
        seed_pooled.data_mut()[j] = 0.0;
        let deriv = if layer == nconv {
            counter.backward_passes += 1;
            at_last
        } else {
            frozen_backward(&eff, &trace, nconv, layer + 1, &at_last, &mut counter)?
        };
        for i in 0..channels {
            let plane = deriv.plane(0, i);
            let dst = &mut values[(i * finals + j) * positions..][..positions];
            for (d, g) in dst.iter_mut().zip(plane) {
                *d = v[j] * g;
            }
        }
    }

    Ok(ThetaSlice {
        layer,
        channels,
        finals,
        positions,
        values,
        v,
        backward_passes: counter.backward_passes,
    })
}

/// Independent oracle for the completeness check: the loss gradient at
/// `a^(layer)` from a single backward pass seeded with the whole head
/// gradient at once.
pub fn loss_activation_gradient(
    params: &ParamVector,
    spec: &NetworkSpec,
    image: &Tensor4,
    label: usize,
    layer: usize,
) -> Result<Tensor4> {
    let nconv = spec.conv_layers();
    if layer < 1 || layer > nconv {
        return Err(Error::invalid(format!("layer {layer} is not a conv layer")));
    }
    let eff = effective_params(params, spec);
    let trace = forward_effective(&eff, spec, image)?;
    let v = head_gradient(&eff, &trace, label)?;
    let mut seed_pooled = Tensor4::zeros([1, spec.final_channels(), 1, 1]);
    seed_pooled.data_mut().copy_from_slice(&v);
    let at_last = avgpool_backward(&seed_pooled, spec.pool_window())?;
    if layer == nconv {
        return Ok(at_last);
    }
    let mut counter = PassCounter::default();
    frozen_backward(&eff, &trace, nconv, layer + 1, &at_last, &mut counter)
}

/// Average over positions of `|Theta_iip| / |sum_{j != i} Theta_ijp|` for
/// channel `i` (0-based). Requires the channel index to exist among the
/// final sub-activations.
pub fn ratio_r(theta: &ThetaSlice, i: usize) -> Result<ChannelRatio> {
    if i >= theta.channels || i >= theta.finals {
        return Err(Error::invalid(format!(
            "channel {i} not shared by layer ({}) and final activation ({})",
            theta.channels, theta.finals
        )));
    }
    let mut skipped = 0usize;
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut infinite = false;
    for p in 0..theta.positions {
        let num = theta.theta(i, i, p).abs();
        let mut den = 0.0;
        for j in 0..theta.finals {
            if j != i {
                den += theta.theta(i, j, p);
            }
        }
        let den = den.abs();
        if den == 0.0 {
            if num == 0.0 {
                skipped += 1;
            } else {
                infinite = true;
            }
        } else {
            acc += num / den;
            used += 1;
        }
    }
    let ratio = if infinite {
        Some(f64::INFINITY)
    } else if used == 0 {
        None
    } else {
        Some(acc / used as f64)
    };
    Ok(ChannelRatio {
        ratio,
        skipped_positions: skipped,
    })
}

/// Dominance measurements of one layer over a mini-batch.
#[derive(Debug, Clone)]
pub struct DgfReport {
    pub layer: usize,
    /// Mean over samples of the per-sample fraction of dominant channels.
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub per_sample_sigma: Vec<f64>,
    /// Channels whose ratio was undefined (every position 0/0), summed
    /// over samples.
    pub degenerate_channels: usize,
    /// Positions skipped inside otherwise defined ratios, summed.
    pub skipped_positions: usize,
    /// Per-sample, per-channel ratios (samples outermost).
    pub ratios: Vec<Vec<ChannelRatio>>,
}

/// Fraction of channels with `r_i > 1`, per sample, averaged over the batch.
pub fn sigma_fraction(
    params: &ParamVector,
    spec: &NetworkSpec,
    images: &Tensor4,
    labels: &[usize],
    layer: usize,
) -> Result<DgfReport> {
    let b = images.dims()[0];
    if labels.len() != b || b == 0 {
        return Err(Error::invalid("labels do not match batch"));
    }
    let mut per_sample = Vec::with_capacity(b);
    let mut degenerate = 0usize;
    let mut skipped = 0usize;
    let mut ratios = Vec::with_capacity(b);
    for bi in 0..b {
        let image = single_image(images, bi);
        let theta = compute_theta(params, spec, &image, labels[bi], layer)?;
        let channels = theta.channels.min(theta.finals);
        let mut dominant = 0usize;
        let mut sample_ratios = Vec::with_capacity(channels);
        for i in 0..channels {
            let r = ratio_r(&theta, i)?;
            if r.is_dominant() {
                dominant += 1;
            }
            if r.ratio.is_none() {
                degenerate += 1;
            }
            skipped += r.skipped_positions;
            sample_ratios.push(r);
        }
        per_sample.push(dominant as f64 / channels as f64);
        ratios.push(sample_ratios);
    }
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = per_sample.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(DgfReport {
        layer,
        sigma_mean: mean,
        sigma_std: var.sqrt(),
        per_sample_sigma: per_sample,
        degenerate_channels: degenerate,
        skipped_positions: skipped,
        ratios,
    })
}

fn single_image(images: &Tensor4, bi: usize) -> Tensor4 {
    let [_, c, h, w] = images.dims();
    let mut t = Tensor4::zeros([1, c, h, w]);
    for ci in 0..c {
        t.plane_mut(0, ci).copy_from_slice(images.plane(bi, ci));
    }
    t
}

/// Moments (population mean and std) of the loss gradient entries at the
/// final activation, collected over a whole dataset batch by batch.
pub fn final_grad_stats(
    params: &ParamVector,
    spec: &NetworkSpec,
    data: &crate::dataio::Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let eff = effective_params(params, spec);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = data.gather(chunk);
        let trace = forward_effective(&eff, spec, &batch)?;
        let f = spec.final_channels();
        for (bi, &label) in labels.iter().enumerate() {
            let (_, grad_logits) = softmax_xent(trace.logits_of(bi), label)?;
            let feat = &trace.pooled.data()[bi * f..(bi + 1) * f];
            let (_, _, v) = dense_backward(feat, &eff.dense.weights, &grad_logits)?;
            for g in v {
                count += 1;
                sum += g;
                sum_sq += g * g;
            }
        }
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}
