//! Deterministic SGD with the two weight-decay modes, a step learning-rate
//! schedule, per-epoch metrics, and the equivalent-training pair harness.
//!
//! A training run is strictly sequential and a pure function of
//! `(initial parameters, dataset, config)`: the mini-batch order for an
//! epoch is a seeded permutation depending only on `(seed, epoch)`, so two
//! runs with identical configs produce bitwise-identical trajectories, and
//! two different networks given the same config consume identical batches.
//!
//! Weight decay acts on weights only, never biases. `standard` mode
//! penalizes the squared norm of the stored weights; `transferred` mode
//! penalizes the squared norm of the inverse-transformed weights (weights
//! minus 1 at ID entries), which makes a plain network's cost equal the
//! standard-decay cost of its residual twin. The update uses
//! `d(|w|^2)/dw = 2w`, so the step is `w <- w - lr * (g + 2*lambda*d)`.

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::init;
use crate::network::{self, NetworkSpec, ParamVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    Standard,
    Transferred,
    None,
}

impl DecayMode {
    pub fn name(self) -> &'static str {
        match self {
            DecayMode::Standard => "standard",
            DecayMode::Transferred => "transferred",
            DecayMode::None => "none",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// `(epoch, divisor)` pairs, sorted by epoch; the rate is divided by
    /// every divisor whose epoch index has been reached.
    pub lr_drops: Vec<(usize, f64)>,
    pub momentum: f64,
    pub lambda: f64,
    pub decay_mode: DecayMode,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr_initial: 1e-2,
            lr_drops: vec![(120, 10.0), (160, 10.0)],
            momentum: 0.0,
            lambda: 1e-4,
            decay_mode: DecayMode::Standard,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_initial <= 0.0 {
            return Err(Error::invalid("initial learning rate must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.lr_drops.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::invalid("lr drops must be sorted by epoch"));
        }
        if self.lr_drops.iter().any(|(_, d)| *d < 1.0) {
            return Err(Error::invalid("lr drop divisors must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index; non-increasing in `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_initial;
        for (e, div) in &self.lr_drops {
            if epoch >= *e {
                lr /= div;
            }
        }
        lr
    }
}

/// One epoch of recorded metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy seen over the epoch's mini-batches.
    pub risk: f64,
    /// `risk + lambda * penalty` with the penalty at end of epoch.
    pub cost: f64,
    pub penalty: f64,
    /// Classification error on the held-out split, in `[0, 1]`.
    pub error: f64,
}

/// Weight-decay penalty for the active mode; biases are excluded.
pub fn decay_penalty(params: &ParamVector, mode: DecayMode) -> f64 {
    let sum_sq = |p: &ParamVector| {
        let conv: f64 = p
            .convs
            .iter()
            .map(|l| l.weights.data().iter().map(|w| w * w).sum::<f64>())
            .sum();
        conv + p.dense.weights.iter().map(|w| w * w).sum::<f64>()
    };
    match mode {
        DecayMode::None => 0.0,
        DecayMode::Standard => sum_sq(params),
        DecayMode::Transferred => sum_sq(&init::transform_t_inv(params)),
    }
}

/// Optimizer state carried across steps; the velocity buffer is allocated
/// on first use and kept even at zero momentum (the arithmetic is identical).
#[derive(Debug, Default, Clone)]
pub struct SgdState {
    velocity: Option<ParamVector>,
}

/// One SGD step: `v <- m*v + (g + 2*lambda*d)`, `w <- w - lr(epoch)*v`,
/// where `d` is the decay direction of the active mode (zero on biases).
pub fn sgd_step(
    params: &ParamVector,
    grads: &ParamVector,
    cfg: &TrainConfig,
    epoch: usize,
    state: &mut SgdState,
) -> Result<ParamVector> {
    let lr = cfg.lr_at(epoch);
    let two_lambda = 2.0 * cfg.lambda;
    let m = cfg.momentum;

    let decay_dir: Option<ParamVector> = match cfg.decay_mode {
        DecayMode::None => None,
        DecayMode::Standard => Some(params.clone()),
        DecayMode::Transferred => Some(init::transform_t_inv(params)),
    };

    if state.velocity.is_none() {
        let mut zero = params.clone();
        for c in zero.convs.iter_mut() {
            c.weights.data_mut().fill(0.0);
            c.bias.fill(0.0);
        }
        zero.dense.weights.fill(0.0);
        zero.dense.bias.fill(0.0);
        state.velocity = Some(zero);
    }
    let vel = state.velocity.as_mut().unwrap();

    let mut next = params.clone();
    let step_weights = |w: &mut [f64], g: &[f64], d: Option<&[f64]>, v: &mut [f64]| {
        for i in 0..w.len() {
            let u = match d {
                Some(d) => g[i] + two_lambda * d[i],
                None => g[i],
            };
            v[i] = m * v[i] + u;
            w[i] -= lr * v[i];
        }
    };
    let step_biases = |b: &mut [f64], g: &[f64], v: &mut [f64]| {
        for i in 0..b.len() {
            v[i] = m * v[i] + g[i];
            b[i] -= lr * v[i];
        }
    };

    for li in 0..next.convs.len() {
        let d = decay_dir.as_ref().map(|p| p.convs[li].weights.data());
        step_weights(
            next.convs[li].weights.data_mut(),
            grads.convs[li].weights.data(),
            d,
            vel.convs[li].weights.data_mut(),
        );
        step_biases(
            &mut next.convs[li].bias,
            &grads.convs[li].bias,
            &mut vel.convs[li].bias,
        );
    }
    let d = decay_dir.as_ref().map(|p| p.dense.weights.as_slice());
    step_weights(
        &mut next.dense.weights,
        &grads.dense.weights,
        d,
        &mut vel.dense.weights,
    );
    step_biases(&mut next.dense.bias, &grads.dense.bias, &mut vel.dense.bias);
    Ok(next)
}

/// Mini-batch order for an epoch: a pure function of `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

/// Fraction of misclassified samples (argmax of logits vs. label).
pub fn classification_error(
    params: &ParamVector,
    spec: &NetworkSpec,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = data.gather(chunk);
        let trace = network::forward(params, spec, &batch)?;
        for (b, &label) in labels.iter().enumerate() {
            let logits = trace.logits_of(b);
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Trains `params0` on `train`, recording metrics every epoch against the
/// held-out `test` split. Fully deterministic given the config.
pub fn train(
    spec: &NetworkSpec,
    params0: &ParamVector,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamVector, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut params = params0.clone();
    let mut state = SgdState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = if cfg.shuffle {
            epoch_permutation(cfg.seed, epoch, train_data.len())
        } else {
            (0..train_data.len()).collect()
        };
        let mut risk_weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = train_data.gather(chunk);
            let (risk, grads) = network::backward(&params, spec, &batch, &labels)?;
            params = sgd_step(&params, &grads, cfg, epoch, &mut state)?;
            risk_weighted += risk * chunk.len() as f64;
        }
        let risk = risk_weighted / train_data.len() as f64;
        let penalty = decay_penalty(&params, cfg.decay_mode);
        let error = classification_error(&params, spec, test_data, cfg.batch_size)?;
        history.push(EpochMetrics {
            epoch,
            risk,
            cost: risk + cfg.lambda * penalty,
            penalty,
            error,
        });
    }
    Ok((params, history))
}

/// Outcome of the equivalent-training harness: per-iteration divergence
/// `max |p_t - T(r_t)|` (entry 0 is before the first step) and the
/// per-iteration risks of both runs.
#[derive(Debug, Clone)]
pub struct PairReport {
    pub divergence: Vec<f64>,
    pub plain_risks: Vec<f64>,
    pub residual_risks: Vec<f64>,
    pub iterations: usize,
    pub plain_final: ParamVector,
    pub residual_final: ParamVector,
}

impl PairReport {
    pub fn max_divergence(&self) -> f64 {
        self.divergence.iter().cloned().fold(0.0, f64::max)
    }

    /// Expanding-mean smoothing of the divergence trace; `true` when the
    /// smoothed series never decreases (the drift only accumulates).
    pub fn divergence_trend_nondecreasing(&self) -> bool {
        let mut mean = 0.0;
        let mut prev = 0.0;
        for (i, d) in self.divergence.iter().enumerate() {
            mean += (d - mean) / (i + 1) as f64;
            if mean < prev {
                return false;
            }
            prev = mean;
        }
        true
    }
}

/// Trains a plain/residual pair from one seed: `r0` is drawn with the
/// small-scale initializer and `p0 = T(r0)`.
pub fn train_equivalent_pair(
    spec: &NetworkSpec,
    seed: u64,
    train_data: &Dataset,
    cfg: &TrainConfig,
    max_iters: Option<usize>,
) -> Result<PairReport> {
    if spec.kind != network::ArchKind::Residual {
        return Err(Error::invalid("pair harness requires a residual spec"));
    }
    let r = init::hmwi_init(spec, seed)?;
    let p = init::transform_t(&r);
    run_pair(spec, p, r, train_data, cfg, max_iters)
}

/// The pair loop itself: trains plain parameters `p` with transferred decay
/// and residual parameters `r` with standard decay on the identical
/// mini-batch sequence, recording `max |p_t - T(r_t)|` each iteration.
/// Stops after `max_iters` steps when given.
pub fn run_pair(
    spec: &NetworkSpec,
    p0: ParamVector,
    r0: ParamVector,
    train_data: &Dataset,
    cfg: &TrainConfig,
    max_iters: Option<usize>,
) -> Result<PairReport> {
    cfg.validate()?;
    if spec.kind != network::ArchKind::Residual {
        return Err(Error::invalid("pair harness requires a residual spec"));
    }
    if train_data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let plain_spec = spec.with_kind(network::ArchKind::Plain);

    let mut r = r0;
    let mut p = p0;

    let cfg_res = TrainConfig {
        decay_mode: DecayMode::Standard,
        ..cfg.clone()
    };
    let cfg_pln = TrainConfig {
        decay_mode: DecayMode::Transferred,
        ..cfg.clone()
    };

    let mut state_r = SgdState::default();
    let mut state_p = SgdState::default();
    let mut divergence = vec![p.max_abs_diff(&init::transform_t(&r))];
    let mut plain_risks = Vec::new();
    let mut residual_risks = Vec::new();
    let mut iters = 0usize;
    let budget = max_iters.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        let order = if cfg.shuffle {
            epoch_permutation(cfg.seed, epoch, train_data.len())
        } else {
            (0..train_data.len()).collect()
        };
        for chunk in order.chunks(cfg.batch_size) {
            if iters >= budget {
                break 'epochs;
            }
            let (batch, labels) = train_data.gather(chunk);
            let (risk_r, grads_r) = network::backward(&r, spec, &batch, &labels)?;
            let (risk_p, grads_p) = network::backward(&p, &plain_spec, &batch, &labels)?;
            r = sgd_step(&r, &grads_r, &cfg_res, epoch, &mut state_r)?;
            p = sgd_step(&p, &grads_p, &cfg_pln, epoch, &mut state_p)?;
            residual_risks.push(risk_r);
            plain_risks.push(risk_p);
            divergence.push(p.max_abs_diff(&init::transform_t(&r)));
            iters += 1;
        }
    }

    Ok(PairReport {
        divergence,
        plain_risks,
        residual_risks,
        iterations: iters,
        plain_final: p,
        residual_final: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio;
    use crate::network::{build, ArchKind, InitScheme};

    fn toy_spec(kind: ArchKind) -> NetworkSpec {
        NetworkSpec::new(kind, 2, 4, 8, 10).unwrap()
    }

    fn toy_data(seed: u64, count: usize) -> Dataset {
        dataio::synth_dataset(seed, count, 8, 10).unwrap()
    }

    #[test]
    fn penalty_cases() {
        let spec = toy_spec(ArchKind::Residual);
        let zero = ParamVector::zeros(&spec).unwrap();
        assert_eq!(decay_penalty(&zero, DecayMode::Standard), 0.0);
        assert_eq!(decay_penalty(&zero, DecayMode::None), 0.0);

        // params = T(0): transferred penalty is 0, standard counts ID entries
        let t0 = init::transform_t(&zero);
        assert_eq!(decay_penalty(&t0, DecayMode::Transferred), 0.0);
        let id_count = init::id_entries(&zero).len() as f64;
        assert_eq!(decay_penalty(&t0, DecayMode::Standard), id_count);

        // change of variables: same value in the matching coordinates
        let r = build(&spec, 5, InitScheme::Hmwi).unwrap();
        let a = decay_penalty(&init::transform_t(&r), DecayMode::Transferred);
        let b = decay_penalty(&r, DecayMode::Standard);
        assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let spec = toy_spec(ArchKind::Plain);
        let params = build(&spec, 1, InitScheme::Kwi).unwrap();
        let mut grads = ParamVector::zeros(&spec).unwrap();
        for c in grads.convs.iter_mut() {
            c.weights.data_mut().fill(0.25);
        }
        let cfg = TrainConfig {
            lr_initial: 1.0,
            lambda: 0.0,
            lr_drops: vec![],
            ..Default::default()
        };
        let mut state = SgdState::default();
        let next = sgd_step(&params, &grads, &cfg, 0, &mut state).unwrap();
        // lambda = 0, lr = 1: w - g
        for (l0, l1) in params.convs.iter().zip(&next.convs) {
            for (a, b) in l0.weights.data().iter().zip(l1.weights.data()) {
                assert_eq!(*b, a - 0.25);
            }
        }

        // transferred decay at w = T(0): decay direction vanishes
        let zero = ParamVector::zeros(&spec).unwrap();
        let t0 = init::transform_t(&zero);
        let cfg = TrainConfig {
            lr_initial: 0.5,
            lambda: 0.1,
            decay_mode: DecayMode::Transferred,
            lr_drops: vec![],
            ..Default::default()
        };
        let mut state = SgdState::default();
        let zero_grads = ParamVector::zeros(&spec).unwrap();
        let next = sgd_step(&t0, &zero_grads, &cfg, 0, &mut state).unwrap();
        assert_eq!(next.flatten(), t0.flatten());
    }

    #[test]
    fn two_parameter_toy_step() {
        // one weight w, one bias b, lr 0.1, lambda 0.01, standard decay:
        // w' = w - 0.1*(g_w + 0.02*w), b' = b - 0.1*g_b
        let spec = toy_spec(ArchKind::Plain);
        let mut params = ParamVector::zeros(&spec).unwrap();
        params.convs[0].weights.set(0, 0, 1, 1, 2.0);
        params.convs[0].bias[0] = -1.0;
        let mut grads = ParamVector::zeros(&spec).unwrap();
        grads.convs[0].weights.set(0, 0, 1, 1, 0.5);
        grads.convs[0].bias[0] = 0.25;
        let cfg = TrainConfig {
            lr_initial: 0.1,
            lambda: 0.01,
            lr_drops: vec![],
            ..Default::default()
        };
        let mut state = SgdState::default();
        let next = sgd_step(&params, &grads, &cfg, 0, &mut state).unwrap();
        let w = 2.0 - 0.1 * (0.5 + 0.02 * 2.0);
        let b = -1.0 - 0.1 * 0.25;
        assert!((next.convs[0].weights.at(0, 0, 1, 1) - w).abs() < 1e-15);
        assert!((next.convs[0].bias[0] - b).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_is_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let lr = cfg.lr_at(epoch);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cfg.lr_at(119), 1e-2);
        assert!((cfg.lr_at(120) - 1e-3).abs() < 1e-18);
        assert!((cfg.lr_at(160) - 1e-4).abs() < 1e-19);

        let bad = TrainConfig {
            lr_drops: vec![(10, 0.5)],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let spec = toy_spec(ArchKind::Plain);
        let params = build(&spec, 2, InitScheme::Kwi).unwrap();
        let data = toy_data(3, 40);
        let test = dataio::synth_split(3, 20, 8, 10, dataio::Split::Test).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, hist) = train(&spec, &params, &data, &test, &cfg).unwrap();
        assert_eq!(out.flatten(), params.flatten());
        assert!(hist.is_empty());
    }

    #[test]
    fn initial_risk_is_near_ln_k() {
        let spec = toy_spec(ArchKind::Plain);
        let params = build(&spec, 4, InitScheme::Kwi).unwrap();
        let data = toy_data(5, 64);
        let (batch, labels) = data.gather(&(0..64).collect::<Vec<_>>());
        let (risk, _) = network::backward(&params, &spec, &batch, &labels).unwrap();
        assert!((risk - (10.0f64).ln()).abs() < 0.1, "initial risk {risk}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let spec = toy_spec(ArchKind::Residual);
        let params = build(&spec, 6, InitScheme::Hmwi).unwrap();
        let data = toy_data(7, 60);
        let test = dataio::synth_split(7, 20, 8, 10, dataio::Split::Test).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (a, ha) = train(&spec, &params, &data, &test, &cfg).unwrap();
        let (b, hb) = train(&spec, &params, &data, &test, &cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(ha, hb);
    }

    #[test]
    fn pair_divergence_starts_at_zero_and_stays_tiny() {
        let spec = toy_spec(ArchKind::Residual);
        let data = toy_data(11, 64);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            ..Default::default()
        };
        let report = train_equivalent_pair(&spec, 13, &data, &cfg, Some(12)).unwrap();
        assert_eq!(report.divergence[0], 0.0);
        assert_eq!(report.iterations, 12);
        assert!(report.max_divergence() <= 1e-10, "{}", report.max_divergence());
        // risks agree tightly while the trajectories coincide
        for (a, b) in report.plain_risks.iter().zip(&report.residual_risks) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn pair_equivalence_survives_momentum() {
        let spec = toy_spec(ArchKind::Residual);
        let data = toy_data(17, 64);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            momentum: 0.9,
            ..Default::default()
        };
        let report = train_equivalent_pair(&spec, 19, &data, &cfg, Some(50)).unwrap();
        assert!(report.max_divergence() <= 1e-8, "{}", report.max_divergence());
    }
}
