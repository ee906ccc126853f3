//! Dataset ingestion, the weight container format, and CSV emission.
//!
//! Two data sources are supported: the classic binary image-classification
//! batch format (3073-byte records: one label byte, then 3072 pixel bytes in
//! planar R,G,B row-major order) and a deterministic synthetic generator of
//! class-conditioned oriented bars for desk-scale runs.
//!
//! Weight files are little-endian and platform independent:
//!
//! ```text
//! magic "RNEQ1"
//! descriptor: kind u8, N u32, base u32, input_channels u32, input_hw u32, classes u32
//! per conv layer: weights f64 (D-major, then C, then row, then col), then biases
//! dense weights (row-major K x F), then dense biases
//! crc32 (IEEE) of everything after the magic, u32
//! ```

use crate::error::{Error, Result};
use crate::network::{ArchKind, NetworkSpec, ParamVector};
use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 5] = b"RNEQ1";

const CIFAR_RECORD: usize = 3073;
const CIFAR_HW: usize = 32;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled image set. Pixel values lie in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the chosen samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let [_, c, h, w] = self.images.dims();
        let mut batch = Tensor4::zeros([indices.len(), c, h, w]);
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &si) in indices.iter().enumerate() {
            for ci in 0..c {
                batch.plane_mut(bi, ci).copy_from_slice(self.images.plane(si, ci));
            }
            labels.push(self.labels[si]);
        }
        (batch, labels)
    }

    /// Single-sample batch.
    pub fn sample(&self, index: usize) -> (Tensor4, usize) {
        let (batch, labels) = self.gather(&[index]);
        (batch, labels[0])
    }
}

/// Parses one binary batch file of 3073-byte records.
pub fn read_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    read_cifar10_bytes(&bytes)
}

pub fn read_cifar10_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format(format!(
            "truncated record at byte offset {offset}: {} trailing bytes (records are {CIFAR_RECORD} bytes)",
            bytes.len() - offset
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Tensor4::zeros([count, 3, CIFAR_HW, CIFAR_HW]);
    let mut labels = Vec::with_capacity(count);
    for rec in 0..count {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(format!(
                "label {label} out of range at byte offset {base}"
            )));
        }
        labels.push(label);
        let pixels = &bytes[base + 1..base + CIFAR_RECORD];
        let dst = &mut images.data_mut()[rec * 3 * CIFAR_HW * CIFAR_HW..][..3 * CIFAR_HW * CIFAR_HW];
        for (d, p) in dst.iter_mut().zip(pixels) {
            *d = *p as f64 / 255.0;
        }
    }
    Ok(Dataset {
        images,
        labels,
        classes: CIFAR_CLASSES,
        split: Split::Train,
    })
}

/// Deterministic synthetic images: one oriented bar per sample, its angle
/// set by the class, with positional jitter, a random per-sample color, and
/// additive Gaussian noise, clipped to `[0, 1]`. Orientation is the only
/// class signal (color and amplitude are uninformative), which keeps the
/// task hard enough that mini-scale runs do not saturate immediately.
/// Labels cycle through the classes, so counts divisible by `classes` are
/// exactly balanced. The same seed always yields the same dataset; the
/// train and test splits draw from disjoint generator streams.
pub fn synth_dataset(seed: u64, count: usize, hw: usize, classes: usize) -> Result<Dataset> {
    synth_split(seed, count, hw, classes, Split::Train)
}

pub fn synth_split(
    seed: u64,
    count: usize,
    hw: usize,
    classes: usize,
    split: Split,
) -> Result<Dataset> {
    if hw < 8 || !hw.is_power_of_two() {
        return Err(Error::invalid(format!(
            "synthetic image size must be a power of two >= 8, got {hw}"
        )));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let mut images = Tensor4::zeros([count, 3, hw, hw]);
    let mut labels = Vec::with_capacity(count);
    let k = classes as f64;
    for i in 0..count {
        let class = i % classes;
        labels.push(class);
        let theta = std::f64::consts::PI * (class as f64 + 0.5) / k;
        let (sin_t, cos_t) = theta.sin_cos();
        let cx = hw as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let cy = hw as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let width = 0.8 + rng.gen_range(0.0..0.4);
        let amp = rng.gen_range(0.6..1.0);
        let color: [f64; 3] = [
            rng.gen_range(0.35..1.0),
            rng.gen_range(0.35..1.0),
            rng.gen_range(0.35..1.0),
        ];
        for c in 0..3 {
            for y in 0..hw {
                for x in 0..hw {
                    let d = (x as f64 - cx) * (-sin_t) + (y as f64 - cy) * cos_t;
                    let bar = (-(d / width) * (d / width)).exp();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = amp * color[c] * bar + 0.22 * noise;
                    images.set(i, c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        classes,
        split,
    })
}

/// Disjoint train/test synthetic splits derived from one seed.
pub fn synth_pair(
    seed: u64,
    train_count: usize,
    test_count: usize,
    hw: usize,
    classes: usize,
) -> Result<(Dataset, Dataset)> {
    Ok((
        synth_split(seed, train_count, hw, classes, Split::Train)?,
        synth_split(seed, test_count, hw, classes, Split::Test)?,
    ))
}

fn kind_byte(kind: ArchKind) -> u8 {
    match kind {
        ArchKind::Plain => 0,
        ArchKind::Residual => 1,
        ArchKind::DominantOnly => 2,
        ArchKind::DominantLowerDense => 3,
    }
}

fn kind_from_byte(b: u8) -> Result<ArchKind> {
    Ok(match b {
        0 => ArchKind::Plain,
        1 => ArchKind::Residual,
        2 => ArchKind::DominantOnly,
        3 => ArchKind::DominantLowerDense,
        _ => return Err(Error::format(format!("unknown architecture byte {b}"))),
    })
}

/// Serializes `(spec, params)` to the weight container format.
pub fn weights_to_bytes(params: &ParamVector, spec: &NetworkSpec) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.push(kind_byte(spec.kind));
    for v in [
        spec.blocks_per_group,
        spec.base_channels,
        spec.input_channels,
        spec.input_hw,
        spec.classes,
    ] {
        payload.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in params.flatten() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(5 + payload.len() + 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn save_weights(params: &ParamVector, spec: &NetworkSpec, path: &Path) -> Result<()> {
    let bytes = weights_to_bytes(params, spec);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<(ParamVector, NetworkSpec)> {
    if bytes.len() < 5 + 21 + 4 {
        return Err(Error::format("weight file too short"));
    }
    if &bytes[..5] != WEIGHTS_MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let payload = &bytes[5..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let kind = kind_from_byte(payload[0])?;
    let mut fields = [0usize; 5];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(payload[1 + 4 * i..5 + 4 * i].try_into().unwrap()) as usize;
    }
    let spec = NetworkSpec {
        kind,
        blocks_per_group: fields[0],
        base_channels: fields[1],
        input_channels: fields[2],
        input_hw: fields[3],
        classes: fields[4],
    };
    spec.validate()
        .map_err(|e| Error::format(format!("descriptor invalid: {e}")))?;
    let zero = ParamVector::zeros(&spec).map_err(|e| Error::format(e.to_string()))?;
    let body = &payload[21..];
    if body.len() != zero.len() * 8 {
        return Err(Error::format(format!(
            "payload holds {} bytes, spec requires {}",
            body.len(),
            zero.len() * 8
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params =
        ParamVector::unflatten(&spec, &flat).map_err(|e| Error::format(e.to_string()))?;
    Ok((params, spec))
}

pub fn load_weights(path: &Path) -> Result<(ParamVector, NetworkSpec)> {
    let bytes = std::fs::read(path)?;
    weights_from_bytes(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Formats one float for CSV: `.` decimal separator, shortest round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}
