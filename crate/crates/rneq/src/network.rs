//! The simplified architectures: a first convolution with ReLU, three groups
//! of single-convolution blocks, global average pooling, and a dense
//! classifier head. Four variants share one forward path:
//!
//! * `Plain` runs the stored kernels as-is.
//! * `Residual` adds 1 to the ID entries of every block kernel (the center
//!   tap at matching channel indices) before convolving, so the identity
//!   connection is part of the kernel and plain/residual equivalence holds
//!   bit for bit. At the two downsampling blocks the identity becomes a
//!   stride-2 channel-truncated copy, which is the only reading under which
//!   the kernel-level transformation stays exact.
//! * `DominantOnly` / `DominantLowerDense` first zero all off-diagonal
//!   kernel slices (keeping `d == c` and, at channel-doubling blocks,
//!   `d == c + C`), then apply the residual identity.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{
    avgpool_backward, avgpool_forward, conv2d_backward, conv2d_backward_input, conv2d_forward,
    dense_backward, dense_forward, relu_backward, relu_forward, softmax_xent, Tensor4,
};

/// Architecture family of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Plain,
    Residual,
    DominantOnly,
    DominantLowerDense,
}

impl ArchKind {
    pub fn is_dominant(self) -> bool {
        matches!(self, ArchKind::DominantOnly | ArchKind::DominantLowerDense)
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Plain => "plain",
            ArchKind::Residual => "residual",
            ArchKind::DominantOnly => "dominant",
            ArchKind::DominantLowerDense => "dominant-lower-dense",
        }
    }
}

/// Weight initialization scheme (see [`crate::init`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Kwi,
    Hmwi,
}

/// Architecture descriptor. Depth is `3N + 2` trainable layers: the first
/// convolution, `3N` block convolutions, and the dense head. Group widths
/// are `base`, `2*base`, `4*base`; the first block of groups 1 and 2 doubles
/// the channels and halves the spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub kind: ArchKind,
    /// Blocks per group (`N >= 1`).
    pub blocks_per_group: usize,
    /// Channel width of the first group (16 in the reference setup).
    pub base_channels: usize,
    pub input_channels: usize,
    /// Square input size; a power of two, at least 8.
    pub input_hw: usize,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn new(
        kind: ArchKind,
        blocks_per_group: usize,
        base_channels: usize,
        input_hw: usize,
        classes: usize,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            kind,
            blocks_per_group,
            base_channels,
            input_channels: 3,
            input_hw,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_group < 1 {
            return Err(Error::invalid("blocks_per_group must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("base_channels must be at least 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::invalid("input_channels must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.input_hw < 8 || !self.input_hw.is_power_of_two() {
            return Err(Error::invalid(format!(
                "input size must be a power of two >= 8, got {}",
                self.input_hw
            )));
        }
        Ok(())
    }

    /// Total trainable layers `L = 3N + 2`.
    pub fn depth(&self) -> usize {
        3 * self.blocks_per_group + 2
    }

    /// Number of convolutional layers, `3N + 1`.
    pub fn conv_layers(&self) -> usize {
        3 * self.blocks_per_group + 1
    }

    /// Channel width of group `g` (0-based).
    pub fn group_width(&self, g: usize) -> usize {
        self.base_channels << g
    }

    /// Width of the final activation vector, `4 * base`.
    pub fn final_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial extent after both downsampling blocks; also the pool window.
    pub fn pool_window(&self) -> usize {
        self.input_hw / 4
    }

    pub fn with_kind(&self, kind: ArchKind) -> NetworkSpec {
        NetworkSpec { kind, ..*self }
    }

    /// Shape metadata for all convolutional layers, in layer order.
    pub fn conv_layer_infos(&self) -> Vec<LayerInfo> {
        let n = self.blocks_per_group;
        let mut infos = Vec::with_capacity(self.conv_layers());
        let mut spatial = self.input_hw;
        infos.push(LayerInfo {
            layer_index: 1,
            group: None,
            in_channels: self.input_channels,
            out_channels: self.base_channels,
            stride: 1,
            spatial_in: spatial,
            spatial_out: spatial,
        });
        for block in 0..3 * n {
            let g = block / n;
            let first_of_group = block % n == 0;
            let downsamples = first_of_group && g > 0;
            let in_channels = if downsamples {
                self.group_width(g - 1)
            } else {
                self.group_width(g)
            };
            let stride = if downsamples { 2 } else { 1 };
            let spatial_in = spatial;
            spatial /= stride;
            infos.push(LayerInfo {
                layer_index: block + 2,
                group: Some(g),
                in_channels,
                out_channels: self.group_width(g),
                stride,
                spatial_in,
                spatial_out: spatial,
            });
        }
        infos
    }
}

/// Shape and position of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    /// 1-based layer index; the dense head is layer `3N + 2`.
    pub layer_index: usize,
    /// Group of a block layer; `None` for the first convolution.
    pub group: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub spatial_in: usize,
    pub spatial_out: usize,
}

impl LayerInfo {
    pub fn is_block(&self) -> bool {
        self.group.is_some()
    }
}

/// One convolutional layer record: metadata plus `[D, C, 3, 3]` kernels and
/// a `D`-vector of biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub info: LayerInfo,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Dense head: `K x F` row-major weights and a `K`-vector of biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The flat, ordered set of all kernels and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub convs: Vec<ConvLayer>,
    pub dense: DenseLayer,
}

impl ParamVector {
    /// All-zero parameters shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Result<ParamVector> {
        spec.validate()?;
        let convs = spec
            .conv_layer_infos()
            .into_iter()
            .map(|info| ConvLayer {
                info,
                weights: Tensor4::zeros([info.out_channels, info.in_channels, 3, 3]),
                bias: vec![0.0; info.out_channels],
            })
            .collect();
        let (k, f) = (spec.classes, spec.final_channels());
        Ok(ParamVector {
            convs,
            dense: DenseLayer {
                out_features: k,
                in_features: f,
                weights: vec![0.0; k * f],
                bias: vec![0.0; k],
            },
        })
    }

    /// Total scalar count, weights plus biases.
    pub fn len(&self) -> usize {
        let conv: usize = self
            .convs
            .iter()
            .map(|c| c.weights.len() + c.bias.len())
            .sum();
        conv + self.dense.weights.len() + self.dense.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens to a single vector: per conv layer weights then bias, then
    /// dense weights then bias. `unflatten` is the exact inverse.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for c in &self.convs {
            out.extend_from_slice(c.weights.data());
            out.extend_from_slice(&c.bias);
        }
        out.extend_from_slice(&self.dense.weights);
        out.extend_from_slice(&self.dense.bias);
        out
    }

    pub fn unflatten(spec: &NetworkSpec, flat: &[f64]) -> Result<ParamVector> {
        let mut params = ParamVector::zeros(spec)?;
        if flat.len() != params.len() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, spec requires {}",
                flat.len(),
                params.len()
            )));
        }
        let mut off = 0;
        for c in params.convs.iter_mut() {
            let nw = c.weights.len();
            c.weights.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = c.bias.len();
            c.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        let nw = params.dense.weights.len();
        params.dense.weights.copy_from_slice(&flat[off..off + nw]);
        off += nw;
        params.dense.bias.copy_from_slice(&flat[off..]);
        Ok(params)
    }

    /// Applies `f` to every weight entry (biases untouched).
    pub fn map_weights_mut(&mut self, mut f: impl FnMut(f64) -> f64) {
        for c in self.convs.iter_mut() {
            for w in c.weights.data_mut() {
                *w = f(*w);
            }
        }
        for w in self.dense.weights.iter_mut() {
            *w = f(*w);
        }
    }

    /// Largest absolute difference over all entries (weights and biases).
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-layer post-ReLU activations of one forward pass, the retained
/// pre-ReLU tensors needed for backward, the pooled final activation
/// vector, and the logits.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// Pre-ReLU tensors `z^(l)`, index `l-1`, for the `3N+1` conv layers.
    pub pre: Vec<Tensor4>,
    /// Post-ReLU tensors `a^(l)`, index `l-1`.
    pub post: Vec<Tensor4>,
    /// Final activation `a^(L)`: `[B, 4*base, 1, 1]` channel means.
    pub pooled: Tensor4,
    /// Row-major `[B, K]` classifier outputs.
    pub logits: Vec<f64>,
    pub batch: usize,
    pub classes: usize,
}

impl ActivationTrace {
    pub fn logits_of(&self, sample: usize) -> &[f64] {
        &self.logits[sample * self.classes..(sample + 1) * self.classes]
    }

    /// Copies out the trace of a single sample.
    pub fn sample(&self, b: usize) -> ActivationTrace {
        let take = |t: &Tensor4| {
            let [_, c, h, w] = t.dims();
            let mut s = Tensor4::zeros([1, c, h, w]);
            let hw = h * w;
            for ci in 0..c {
                s.plane_mut(0, ci).copy_from_slice(t.plane(b, ci));
            }
            debug_assert_eq!(s.len(), c * hw);
            s
        };
        ActivationTrace {
            pre: self.pre.iter().map(&take).collect(),
            post: self.post.iter().map(&take).collect(),
            pooled: take(&self.pooled),
            logits: self.logits_of(b).to_vec(),
            batch: 1,
            classes: self.classes,
        }
    }
}

/// Gradient-flow bookkeeping shared with [`crate::gradflow`]: counts frozen
/// backward passes so the per-sample cost contract can be asserted.
#[derive(Debug, Default, Clone)]
pub struct PassCounter {
    pub backward_passes: usize,
}

/// Builds a parameter vector for `spec`: weights drawn per `init`, biases
/// zero. Dominant kinds are masked to their diagonal support.
pub fn build(spec: &NetworkSpec, seed: u64, scheme: InitScheme) -> Result<ParamVector> {
    let mut params = match scheme {
        InitScheme::Kwi => init::kwi_init(spec, seed)?,
        InitScheme::Hmwi => init::hmwi_init(spec, seed)?,
    };
    if spec.kind.is_dominant() {
        apply_dominant_mask(
            &mut params,
            spec.kind == ArchKind::DominantLowerDense,
        );
    }
    Ok(params)
}

/// Zeroes every kernel slice outside the dominant support of a block layer:
/// square blocks keep `d == c`; channel-doubling blocks keep `d == c` and
/// `d == c + C` (or a dense lower half when `lower_dense`).
pub(crate) fn apply_dominant_mask(params: &mut ParamVector, lower_dense: bool) {
    for layer in params.convs.iter_mut() {
        if !layer.info.is_block() {
            continue;
        }
        let (d_out, c_in) = (layer.info.out_channels, layer.info.in_channels);
        for d in 0..d_out {
            for c in 0..c_in {
                let keep = if d_out == c_in {
                    d == c
                } else if d < c_in {
                    d == c
                } else if lower_dense {
                    true
                } else {
                    d == c + c_in
                };
                if !keep {
                    for u in 0..3 {
                        for v in 0..3 {
                            layer.weights.set(d, c, u, v, 0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Masks a residual parameter vector down to its dominant signal paths.
pub fn make_dominant_kernels(
    params: &ParamVector,
    spec: &NetworkSpec,
    lower_dense: bool,
) -> Result<ParamVector> {
    if spec.kind != ArchKind::Residual {
        return Err(Error::invalid(format!(
            "dominant kernels are derived from a residual spec, got {}",
            spec.kind.name()
        )));
    }
    let mut masked = params.clone();
    apply_dominant_mask(&mut masked, lower_dense);
    Ok(masked)
}

/// The stored coordinates the identity is added to: the parameters
/// themselves for plain and residual networks, the masked parameters for
/// dominant kinds.
pub fn pre_transform_params(params: &ParamVector, spec: &NetworkSpec) -> ParamVector {
    match spec.kind {
        ArchKind::Plain | ArchKind::Residual => params.clone(),
        ArchKind::DominantOnly | ArchKind::DominantLowerDense => {
            let mut masked = params.clone();
            apply_dominant_mask(&mut masked, spec.kind == ArchKind::DominantLowerDense);
            masked
        }
    }
}

/// The kernels the forward pass actually convolves with: stored parameters
/// for plain networks, `T(r)` for residual ones, and the masked `T` image
/// for dominant kinds.
pub fn effective_params(params: &ParamVector, spec: &NetworkSpec) -> ParamVector {
    match spec.kind {
        ArchKind::Plain => params.clone(),
        _ => init::transform_t(&pre_transform_params(params, spec)),
    }
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor4) -> Result<usize> {
    let [b, c, h, w] = batch.dims();
    if c != spec.input_channels || h != spec.input_hw || w != spec.input_hw {
        return Err(Error::invalid(format!(
            "batch dims {:?} do not match spec input {}x{}x{}",
            batch.dims(),
            spec.input_channels,
            spec.input_hw,
            spec.input_hw
        )));
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(b)
}

fn check_params(params: &ParamVector, spec: &NetworkSpec) -> Result<()> {
    if params.convs.len() != spec.conv_layers() {
        return Err(Error::invalid(format!(
            "parameter vector has {} conv layers, spec requires {}",
            params.convs.len(),
            spec.conv_layers()
        )));
    }
    for (layer, info) in params.convs.iter().zip(spec.conv_layer_infos()) {
        if layer.weights.dims() != [info.out_channels, info.in_channels, 3, 3] {
            return Err(Error::invalid(format!(
                "layer {} weights {:?} do not match spec {:?}",
                info.layer_index,
                layer.weights.dims(),
                [info.out_channels, info.in_channels, 3, 3]
            )));
        }
    }
    if params.dense.in_features != spec.final_channels()
        || params.dense.out_features != spec.classes
    {
        return Err(Error::invalid("dense layer does not match spec"));
    }
    Ok(())
}

/// Forward pass over kernels that are already effective (no `T`, no mask).
pub(crate) fn forward_effective(
    eff: &ParamVector,
    spec: &NetworkSpec,
    batch: &Tensor4,
) -> Result<ActivationTrace> {
    let b = check_batch(spec, batch)?;
    let nconv = spec.conv_layers();
    let mut pre = Vec::with_capacity(nconv);
    let mut post = Vec::with_capacity(nconv);
    let mut x = batch;
    for layer in &eff.convs {
        let z = conv2d_forward(x, &layer.weights, &layer.bias, layer.info.stride)?;
        let a = relu_forward(&z);
        pre.push(z);
        post.push(a);
        x = post.last().unwrap();
    }
    let pooled = avgpool_forward(post.last().unwrap(), spec.pool_window())?;
    let f = spec.final_channels();
    let mut logits = Vec::with_capacity(b * spec.classes);
    for bi in 0..b {
        let feat = &pooled.data()[bi * f..(bi + 1) * f];
        logits.extend(dense_forward(feat, &eff.dense.weights, &eff.dense.bias)?);
    }
    Ok(ActivationTrace {
        pre,
        post,
        pooled,
        logits,
        batch: b,
        classes: spec.classes,
    })
}

/// Full forward pass; returns per-layer activations and logits.
pub fn forward(params: &ParamVector, spec: &NetworkSpec, batch: &Tensor4) -> Result<ActivationTrace> {
    check_params(params, spec)?;
    let eff = effective_params(params, spec);
    forward_effective(&eff, spec, batch)
}

/// Mean cross-entropy over the batch plus exact gradients, shaped like the
/// parameter vector. For residual kinds the gradients with respect to the
/// stored coordinates equal those with respect to the effective kernels
/// (the transformation is a translation); dominant kinds additionally zero
/// the gradients of masked entries so the mask commutes with updates.
pub fn backward(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Tensor4,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    check_params(params, spec)?;
    let b = check_batch(spec, batch)?;
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let eff = effective_params(params, spec);
    let trace = forward_effective(&eff, spec, batch)?;

    let mut grads = ParamVector::zeros(spec)?;
    let f = spec.final_channels();
    let k = spec.classes;
    let inv_b = 1.0 / b as f64;

    // loss head: mean cross-entropy; gradient scaled by 1/B at the source
    let mut risk = 0.0;
    let mut grad_pooled = Tensor4::zeros(trace.pooled.dims());
    for bi in 0..b {
        let (loss, mut grad_logits) = softmax_xent(trace.logits_of(bi), labels[bi])?;
        risk += loss * inv_b;
        for g in grad_logits.iter_mut() {
            *g *= inv_b;
        }
        let feat = &trace.pooled.data()[bi * f..(bi + 1) * f];
        let (gw, gb, gx) = dense_backward(feat, &eff.dense.weights, &grad_logits)?;
        for (acc, g) in grads.dense.weights.iter_mut().zip(&gw) {
            *acc += g;
        }
        for (acc, g) in grads.dense.bias.iter_mut().zip(&gb) {
            *acc += g;
        }
        grad_pooled.data_mut()[bi * f..(bi + 1) * f].copy_from_slice(&gx);
    }
    let _ = k;

    // through the pool and the conv stack
    let mut grad_a = avgpool_backward(&grad_pooled, spec.pool_window())?;
    for li in (0..eff.convs.len()).rev() {
        let layer = &eff.convs[li];
        let grad_z = relu_backward(&trace.pre[li], &grad_a)?;
        let input = if li == 0 { batch } else { &trace.post[li - 1] };
        let lg = conv2d_backward(input, &layer.weights, layer.info.stride, &grad_z)?;
        grads.convs[li].weights = lg.grad_weights;
        grads.convs[li].bias = lg.grad_bias;
        grad_a = lg.grad_input;
    }

    if spec.kind.is_dominant() {
        apply_dominant_mask(&mut grads, spec.kind == ArchKind::DominantLowerDense);
    }
    Ok((risk, grads))
}

/// Propagates a gradient seeded at the post-ReLU activation `a^(upper)` down
/// to the input of layer `lower` (that is, `a^(lower-1)`; the image when
/// `lower == 1`), with ReLU gates frozen at their recorded forward values.
/// Increments `counter` once per invocation.
pub fn frozen_backward(
    eff: &ParamVector,
    trace: &ActivationTrace,
    upper: usize,
    lower: usize,
    seed: &Tensor4,
    counter: &mut PassCounter,
) -> Result<Tensor4> {
    if lower < 1 || upper < lower || upper > eff.convs.len() {
        return Err(Error::invalid(format!(
            "invalid frozen backward range {lower}..={upper}"
        )));
    }
    counter.backward_passes += 1;
    let mut g = seed.clone();
    for m in (lower..=upper).rev() {
        let layer = &eff.convs[m - 1];
        let gz = relu_backward(&trace.pre[m - 1], &g)?;
        g = conv2d_backward_input(&layer.weights, layer.info.stride, &gz, layer.info.spatial_in)?;
    }
    Ok(g)
}

/// Forward pass where same-shape residual blocks are computed with a literal
/// `relu(x + conv(x, r) + bias)`. Serves as an independent oracle for the
/// kernel-level identity encoding (the two downsampling blocks have no
/// same-shape skip and keep the kernel form). Residual specs only.
pub fn reference_residual_logits(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Tensor4,
) -> Result<Vec<f64>> {
    if spec.kind != ArchKind::Residual {
        return Err(Error::invalid("reference path is defined for residual specs"));
    }
    check_params(params, spec)?;
    check_batch(spec, batch)?;
    let b = batch.dims()[0];
    let mut x = batch.clone();
    for layer in &params.convs {
        let same_shape = layer.info.is_block()
            && layer.info.stride == 1
            && layer.info.in_channels == layer.info.out_channels;
        let z = if same_shape {
            let mut z = conv2d_forward(&x, &layer.weights, &layer.bias, 1)?;
            for (zv, xv) in z.data_mut().iter_mut().zip(x.data()) {
                *zv += xv;
            }
            z
        } else if layer.info.is_block() {
            // downsampling block: identity realized inside the kernel
            let mut eff = layer.clone();
            for c in 0..layer.info.in_channels.min(layer.info.out_channels) {
                let w = eff.weights.at(c, c, 1, 1);
                eff.weights.set(c, c, 1, 1, w + 1.0);
            }
            conv2d_forward(&x, &eff.weights, &eff.bias, layer.info.stride)?
        } else {
            conv2d_forward(&x, &layer.weights, &layer.bias, layer.info.stride)?
        };
        x = relu_forward(&z);
    }
    let pooled = avgpool_forward(&x, spec.pool_window())?;
    let f = spec.final_channels();
    let mut logits = Vec::with_capacity(b * spec.classes);
    for bi in 0..b {
        let feat = &pooled.data()[bi * f..(bi + 1) * f];
        logits.extend(dense_forward(feat, &params.dense.weights, &params.dense.bias)?);
    }
    Ok(logits)
}

/// Start layer of the sub-activation path for final channel `i` (1-based):
/// `s(i) = 1 + gN` for the first group whose width reaches `i`.
pub fn sap_start(i: usize, spec: &NetworkSpec) -> Result<usize> {
    if i < 1 || i > spec.final_channels() {
        return Err(Error::invalid(format!(
            "SAP index {i} out of range 1..={}",
            spec.final_channels()
        )));
    }
    let g = (0..3)
        .find(|g| spec.group_width(*g) >= i)
        .expect("final width covers all indices");
    Ok(1 + g * spec.blocks_per_group)
}

/// Start layers of all `4*base` sub-activation paths.
#[derive(Debug, Clone)]
pub struct SapIndex {
    pub starts: Vec<usize>,
}

impl SapIndex {
    pub fn new(spec: &NetworkSpec) -> Result<SapIndex> {
        let starts = (1..=spec.final_channels())
            .map(|i| sap_start(i, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(SapIndex { starts })
    }
}
