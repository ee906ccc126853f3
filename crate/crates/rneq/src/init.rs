//! Weight initializers, the plain/residual parameter transformation, ID-entry
//! enumeration, and weight-distribution statistics.
//!
//! Two Gaussian initializers are provided, differing only in scale: the
//! Kaiming rule `sigma = sqrt(2/S)` and the much smaller `sigma = 1/S`,
//! where `S = C*U*V` is the per-kernel fan-in (plain fan-in for the dense
//! head). Both draw the same standard normals for a given seed, so two
//! vectors built with equal seeds differ per layer only by the scale ratio.
//!
//! The transformation adds 1 to every ID entry — kernel position
//! `(c, c, 0, 0)` in centered coordinates, for `c` up to `min(C, D)` — of
//! every block layer. The first convolution and the dense head are never
//! touched, and neither are biases.

use crate::error::Result;
use crate::network::{NetworkSpec, ParamVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Draws every weight as `sigma(layer) * z` with `z ~ N(0,1)`; biases zero.
fn gaussian_init(
    spec: &NetworkSpec,
    seed: u64,
    sigma_of: impl Fn(usize) -> f64,
) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.convs.iter_mut() {
        let s = layer.info.in_channels * 9;
        let sigma = sigma_of(s);
        for w in layer.weights.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = sigma * z;
        }
    }
    let sigma = sigma_of(params.dense.in_features);
    for w in params.dense.weights.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = sigma * z;
    }
    Ok(params)
}

/// Kaiming weight initialization: `sigma = sqrt(2/S)`, `S = C*U*V`.
pub fn kwi_init(spec: &NetworkSpec, seed: u64) -> Result<ParamVector> {
    gaussian_init(spec, seed, |s| (2.0 / s as f64).sqrt())
}

/// Small-scale initialization for residual coordinates: `sigma = 1/S`.
pub fn hmwi_init(spec: &NetworkSpec, seed: u64) -> Result<ParamVector> {
    gaussian_init(spec, seed, |s| 1.0 / s as f64)
}

/// The ID entries of a parameter vector: `(layer_index, channel)` pairs
/// addressing kernel position `(c, c, 0, 0)` in centered coordinates.
/// Only block layers contribute; the count per layer is `min(C, D)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdEntrySet {
    pub entries: Vec<(usize, usize)>,
}

impl IdEntrySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Enumerates the ID entries of `params`.
pub fn id_entries(params: &ParamVector) -> IdEntrySet {
    let mut entries = Vec::new();
    for layer in &params.convs {
        if !layer.info.is_block() {
            continue;
        }
        let m = layer.info.in_channels.min(layer.info.out_channels);
        for c in 1..=m {
            entries.push((layer.info.layer_index, c));
        }
    }
    IdEntrySet { entries }
}

fn shift_id_entries(params: &ParamVector, delta: f64) -> ParamVector {
    let mut out = params.clone();
    for layer in out.convs.iter_mut() {
        if !layer.info.is_block() {
            continue;
        }
        let m = layer.info.in_channels.min(layer.info.out_channels);
        for c in 0..m {
            let w = layer.weights.at(c, c, 1, 1);
            layer.weights.set(c, c, 1, 1, w + delta);
        }
    }
    out
}

/// `T`: adds 1 at every ID entry. Biases and non-block layers untouched.
pub fn transform_t(params: &ParamVector) -> ParamVector {
    shift_id_entries(params, 1.0)
}

/// `T^-1`: subtracts 1 at every ID entry; the exact inverse of [`transform_t`].
pub fn transform_t_inv(params: &ParamVector) -> ParamVector {
    shift_id_entries(params, -1.0)
}

/// Statistics over the weights (biases excluded) of one scope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsBlock {
    pub mean: f64,
    pub std: f64,
    /// L1 norm of all weights in scope.
    pub mass_all: f64,
    /// L1 norm of weights with `|w| >= threshold`.
    pub mass_ge_threshold: f64,
    /// L1 norm of the ID entries.
    pub mass_id: f64,
    /// Count of weights with `|w| > 0.7`.
    pub count_gt_0p7: usize,
}

/// Weight-distribution statistics, reported both over every layer and over
/// the block layers alone (whether edge layers belong in the totals is a
/// reporting choice, so both scopes are kept).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightStats {
    pub threshold: f64,
    pub all_layers: StatsBlock,
    pub blocks_only: StatsBlock,
}

fn stats_over<'a>(weights: impl Iterator<Item = &'a f64>, threshold: f64, mass_id: f64) -> StatsBlock {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut mass_all = 0.0;
    let mut mass_ge = 0.0;
    let mut count_big = 0usize;
    for &w in weights {
        n += 1;
        sum += w;
        sum_sq += w * w;
        let a = w.abs();
        mass_all += a;
        if a >= threshold {
            mass_ge += a;
        }
        if a > 0.7 {
            count_big += 1;
        }
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    let var = if n == 0 {
        0.0
    } else {
        (sum_sq / n as f64 - mean * mean).max(0.0)
    };
    StatsBlock {
        mean,
        std: var.sqrt(),
        mass_all,
        mass_ge_threshold: mass_ge,
        mass_id,
        count_gt_0p7: count_big,
    }
}

/// Computes [`WeightStats`] for `params` at the given magnitude threshold.
pub fn weight_stats(params: &ParamVector, threshold: f64) -> WeightStats {
    let mut mass_id = 0.0;
    for layer in &params.convs {
        if !layer.info.is_block() {
            continue;
        }
        let m = layer.info.in_channels.min(layer.info.out_channels);
        for c in 0..m {
            mass_id += layer.weights.at(c, c, 1, 1).abs();
        }
    }

    let all = params
        .convs
        .iter()
        .flat_map(|l| l.weights.data().iter())
        .chain(params.dense.weights.iter());
    let blocks = params
        .convs
        .iter()
        .filter(|l| l.info.is_block())
        .flat_map(|l| l.weights.data().iter());

    WeightStats {
        threshold,
        all_layers: stats_over(all, threshold, mass_id),
        blocks_only: stats_over(blocks, threshold, mass_id),
    }
}

/// ID-entry count implied by the architecture: sum of `min(C, D)` over blocks.
pub fn id_entry_count(spec: &NetworkSpec) -> Result<usize> {
    Ok(spec
        .conv_layer_infos()
        .iter()
        .filter(|i| i.is_block())
        .map(|i| i.in_channels.min(i.out_channels))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchKind, NetworkSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn depth32_spec() -> NetworkSpec {
        NetworkSpec::new(ArchKind::Residual, 10, 16, 32, 10).unwrap()
    }

    #[test]
    fn sigma_values_match_the_formulas() {
        // S = 16 * 9 = 144
        assert!(((2.0f64 / 144.0).sqrt() - 0.117851).abs() < 1e-6);
        // S = 3 * 9 = 27 (first layer)
        assert!(((2.0f64 / 27.0).sqrt() - 0.272166).abs() < 1e-6);
        // small-scale rule at S = 144
        assert!((1.0f64 / 144.0 - 0.006944).abs() < 1e-6);
        // scale ratio at S = 144
        let ratio = (1.0 / 144.0) / (2.0f64 / 144.0).sqrt();
        assert!((ratio - 0.0589).abs() < 1e-3);
    }

    #[test]
    fn empirical_std_matches_sigma_within_one_percent() {
        // depth-32 block layers at width 16 have S = 144; gather 1e5 weights
        let spec = depth32_spec();
        let params = kwi_init(&spec, 7).unwrap();
        let sigma = (2.0f64 / 144.0).sqrt();
        let mut vals = Vec::new();
        for layer in &params.convs {
            if layer.info.in_channels == 16 && layer.info.is_block() {
                vals.extend_from_slice(layer.weights.data());
            }
        }
        // pad with more seeds until we have at least 1e5 samples
        let mut seed = 100;
        while vals.len() < 100_000 {
            let extra = kwi_init(&spec, seed).unwrap();
            for layer in &extra.convs {
                if layer.info.in_channels == 16 && layer.info.is_block() {
                    vals.extend_from_slice(layer.weights.data());
                }
            }
            seed += 1;
        }
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - sigma).abs() / sigma < 0.01, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn hmwi_id_weights_are_small_after_transform() {
        let spec = depth32_spec();
        let r = hmwi_init(&spec, 3).unwrap();
        // residual coordinates at ID positions are of order 1e-3..1e-2
        let mut max_abs: f64 = 0.0;
        for layer in r.convs.iter().filter(|l| l.info.is_block()) {
            let m = layer.info.in_channels.min(layer.info.out_channels);
            for c in 0..m {
                max_abs = max_abs.max(layer.weights.at(c, c, 1, 1).abs());
            }
        }
        assert!(max_abs < 5e-2, "ID weights unexpectedly large: {max_abs}");
        assert!(max_abs > 1e-5);
    }

    #[test]
    fn equal_seeds_differ_only_by_scale_per_layer() {
        let spec = depth32_spec();
        let kwi = kwi_init(&spec, 9).unwrap();
        let hmwi = hmwi_init(&spec, 9).unwrap();
        for (a, b) in kwi.convs.iter().zip(&hmwi.convs) {
            let s = (a.info.in_channels * 9) as f64;
            let ratio = (1.0 / s) / (2.0 / s).sqrt();
            for (wa, wb) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((wb - ratio * wa).abs() <= 1e-15 * wa.abs().max(1.0));
            }
        }
    }

    #[test]
    fn id_entry_count_depth_32_is_1072() {
        let spec = depth32_spec();
        let count = id_entry_count(&spec).unwrap();
        assert_eq!(count, 1072);
        // brute-force enumeration over the built vector agrees
        let params = ParamVector::zeros(&spec).unwrap();
        assert_eq!(id_entries(&params).len(), 1072);
        // and T(0) has exactly that L1 mass
        let t0 = transform_t(&params);
        let stats = weight_stats(&t0, 0.25);
        assert_eq!(stats.all_layers.mass_all, 1072.0);
        assert_eq!(stats.all_layers.mass_id, 1072.0);
        assert_eq!(stats.all_layers.mass_ge_threshold, 1072.0);
    }

    #[test]
    fn transform_inverses_are_exact() {
        let spec = depth32_spec();
        let r = hmwi_init(&spec, 17).unwrap();
        let back = transform_t_inv(&transform_t(&r));
        for (a, b) in back.flatten().iter().zip(r.flatten()) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
        let p = kwi_init(&spec, 18).unwrap();
        let forth = transform_t(&transform_t_inv(&p));
        for (a, b) in forth.flatten().iter().zip(p.flatten()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn stats_of_all_zeros_are_zero() {
        let spec = NetworkSpec::new(ArchKind::Plain, 1, 2, 8, 10).unwrap();
        let params = ParamVector::zeros(&spec).unwrap();
        let stats = weight_stats(&params, 0.25);
        assert_eq!(stats.all_layers.mass_all, 0.0);
        assert_eq!(stats.all_layers.mass_id, 0.0);
        assert_eq!(stats.all_layers.count_gt_0p7, 0);
    }

    #[test]
    fn transformed_hmwi_mass_is_dominated_by_id_entries() {
        let spec = depth32_spec();
        let t = transform_t(&hmwi_init(&spec, 23).unwrap());
        let stats = weight_stats(&t, 0.25);
        assert!(stats.all_layers.mass_id / stats.all_layers.mass_ge_threshold >= 0.75);
        assert!(stats.all_layers.mass_id <= stats.all_layers.mass_all);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn l1_mass_shift_is_bounded_by_id_count(seed in 0u64..300) {
            let spec = NetworkSpec::new(ArchKind::Residual, 2, 4, 8, 10).unwrap();
            let mut params = ParamVector::zeros(&spec).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for layer in params.convs.iter_mut() {
                for w in layer.weights.data_mut() { *w = rng.gen_range(-0.4..0.4); }
            }
            let id_count = id_entries(&params).len() as f64;
            let l1 = |p: &ParamVector| weight_stats(p, 0.25).all_layers.mass_all;
            let shift = l1(&transform_t(&params)) - l1(&params);
            prop_assert!(shift <= id_count + 1e-9);

            // equality when every ID entry is nonnegative
            let mut nonneg = params.clone();
            for layer in nonneg.convs.iter_mut() {
                if !layer.info.is_block() { continue; }
                let m = layer.info.in_channels.min(layer.info.out_channels);
                for c in 0..m {
                    let w = layer.weights.at(c, c, 1, 1);
                    layer.weights.set(c, c, 1, 1, w.abs());
                }
            }
            let shift = l1(&transform_t(&nonneg)) - l1(&nonneg);
            prop_assert!((shift - id_count).abs() <= 1e-9);
        }
    }
}
