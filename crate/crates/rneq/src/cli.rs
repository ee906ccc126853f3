//! Command-line front end: every experiment is a subcommand emitting CSV.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, invalid depth, size
//! caps), 2 format error (malformed data or weight files), 3 tolerance or
//! check failure (and analysis runs that produced no valid samples).
//!
//! Every run with fixed flags and `--threads 1` is bitwise reproducible.
//! Extra threads only parallelize analysis paths (toy-model trials);
//! training is always sequential.

use crate::dataio::{self, fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::gradflow;
use crate::init;
use crate::network::{self, ArchKind, InitScheme, NetworkSpec};
use crate::stability;
use crate::trainer::{self, DecayMode, TrainConfig};
use crate::trivial::{self, TrivialConfig, TrivialKind, PHI_APPROX_EXPONENT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "rneq",
    version,
    about = "Deterministic laboratory for plain/residual convolutional networks"
)]
pub struct Cli {
    /// Master seed for anything randomized.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output path: a directory for `train`, a file elsewhere.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parallel analysis paths (training stays sequential).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network; writes metrics.csv and weights.rneq into --out.
    Train(TrainArgs),
    /// Transform a weight file between plain and residual coordinates.
    Transform(TransformArgs),
    /// Train a plain/residual pair on identical batches and check divergence.
    EquivCheck(EquivArgs),
    /// Per-sample cushion measurements.
    Cushion(CushionArgs),
    /// Dominant-gradient-flow fractions per layer.
    Dgf(DgfArgs),
    /// Toy-model simulation and analytic approximation sweeps.
    Trivial(TrivialArgs),
    /// The Gaussian inequality probability phi(r) and its approximation.
    Phi(PhiArgs),
    /// Weight-distribution statistics of a weight file.
    Stats(StatsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ArchArg {
    Plain,
    Residual,
    Dominant,
    DominantLowerDense,
}

impl From<ArchArg> for ArchKind {
    fn from(a: ArchArg) -> ArchKind {
        match a {
            ArchArg::Plain => ArchKind::Plain,
            ArchArg::Residual => ArchKind::Residual,
            ArchArg::Dominant => ArchKind::DominantOnly,
            ArchArg::DominantLowerDense => ArchKind::DominantLowerDense,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DecayArg {
    Standard,
    Transferred,
    None,
}

impl From<DecayArg> for DecayMode {
    fn from(d: DecayArg) -> DecayMode {
        match d {
            DecayArg::Standard => DecayMode::Standard,
            DecayArg::Transferred => DecayMode::Transferred,
            DecayArg::None => DecayMode::None,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    /// Total trainable layers; must be 3N+2 for integer N >= 1.
    #[arg(long)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub base: usize,
    /// `kwi`, `hmwi`, or `transfer-from:<weights>` (applies the
    /// transformation to a residual weight file to initialize a plain net).
    #[arg(long, default_value = "kwi")]
    pub init: String,
    #[arg(long, value_enum, default_value_t = DecayArg::Standard)]
    pub decay_mode: DecayArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Comma-separated `epoch:divisor` pairs.
    #[arg(long, default_value = "120:10,160:10")]
    pub lr_drops: String,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// `cifar:<dir-or-file>` or `synth:<count>,<hw>,<classes>`.
    #[arg(long)]
    pub data: String,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `r2p` adds 1 at ID entries, `p2r` subtracts it.
    #[arg(long)]
    pub direction: Direction,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Direction {
    P2r,
    R2p,
}

#[derive(Args, Debug)]
pub struct EquivArgs {
    #[arg(long)]
    pub plain: PathBuf,
    #[arg(long)]
    pub residual: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum IdRemoval {
    Auto,
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct CushionArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Single-layer cushion at this conv layer.
    #[arg(long, conflicts_with_all = ["from", "to"])]
    pub layer: Option<usize>,
    /// Interlayer cushion from this layer...
    #[arg(long, requires = "to")]
    pub from: Option<usize>,
    /// ...to this layer.
    #[arg(long, requires = "from")]
    pub to: Option<usize>,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// ID-entry removal for the Frobenius norm; `auto` removes on
    /// residual-kind weights.
    #[arg(long, value_enum, default_value_t = IdRemoval::Auto)]
    pub id_removed: IdRemoval,
    /// Refuse interlayer Jacobians with more output coordinates than this.
    #[arg(long, default_value_t = 4096)]
    pub cap: usize,
}

#[derive(Args, Debug)]
pub struct DgfArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// `all` or a comma-separated list of conv layers.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Optional per-channel ratio dump (CSV).
    #[arg(long)]
    pub dump_ratios: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SweepParam {
    N,
    L,
    P,
    Eps,
    SigmaA,
    SigmaV,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum KindArg {
    Residual,
    Plain,
    Both,
}

#[derive(Args, Debug)]
pub struct TrivialArgs {
    /// Sweep one parameter over its grid; omit for a single evaluation.
    #[arg(long, value_enum)]
    pub sweep: Option<SweepParam>,
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub layers: usize,
    #[arg(long, default_value_t = 5)]
    pub probe: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_a: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_v: f64,
    /// Plain-model entry std; defaults to sqrt(2/n).
    #[arg(long)]
    pub sigma_a_plain: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PhiArgs {
    /// Single evaluation point.
    #[arg(long, conflicts_with = "sweep")]
    pub r: Option<f64>,
    /// Log-spaced sweep `lo,hi,points`.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
}

/// Parses `--data`: `cifar:<dir-or-file>` or `synth:<count>,<hw>,<classes>`.
/// Synthetic test splits hold one fifth of the training count (at least one
/// sample per class) and come from a disjoint generator stream.
pub fn load_data(spec: &str, seed: u64) -> Result<(Dataset, Dataset)> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!(
                "synth spec needs <count>,<hw>,<classes>, got {rest:?}"
            )));
        }
        let count: usize = parts[0]
            .parse()
            .map_err(|_| Error::invalid("bad synth count"))?;
        let hw: usize = parts[1]
            .parse()
            .map_err(|_| Error::invalid("bad synth size"))?;
        let classes: usize = parts[2]
            .parse()
            .map_err(|_| Error::invalid("bad synth classes"))?;
        let test = (count / 5).max(classes);
        return dataio::synth_pair(seed, count, test, hw, classes);
    }
    if let Some(path) = spec.strip_prefix("cifar:") {
        let path = Path::new(path);
        if path.is_file() {
            let all = dataio::read_cifar10(path)?;
            if all.is_empty() {
                return Err(Error::invalid("dataset file holds no records"));
            }
            let n = all.len();
            let cut = (n * 9 / 10).clamp(1, n - 1.min(n - 1));
            let train_idx: Vec<usize> = (0..cut).collect();
            let test_idx: Vec<usize> = (cut..n).collect();
            let (ti, tl) = all.gather(&train_idx);
            let (si, sl) = all.gather(&test_idx);
            return Ok((
                Dataset {
                    images: ti,
                    labels: tl,
                    classes: all.classes,
                    split: dataio::Split::Train,
                },
                Dataset {
                    images: si,
                    labels: sl,
                    classes: all.classes,
                    split: dataio::Split::Test,
                },
            ));
        }
        let mut trains = Vec::new();
        for i in 1..=5 {
            let p = path.join(format!("data_batch_{i}.bin"));
            if p.is_file() {
                trains.push(dataio::read_cifar10(&p)?);
            }
        }
        if trains.is_empty() {
            return Err(Error::invalid(format!(
                "no data_batch_*.bin under {}",
                path.display()
            )));
        }
        let test_path = path.join("test_batch.bin");
        if !test_path.is_file() {
            return Err(Error::invalid(format!(
                "missing {}",
                test_path.display()
            )));
        }
        let mut test = dataio::read_cifar10(&test_path)?;
        test.split = dataio::Split::Test;
        return Ok((concat_datasets(trains)?, test));
    }
    Err(Error::invalid(format!(
        "unknown data spec {spec:?} (use cifar:<path> or synth:<count>,<hw>,<classes>)"
    )))
}

fn concat_datasets(sets: Vec<Dataset>) -> Result<Dataset> {
    let total: usize = sets.iter().map(|d| d.len()).sum();
    let [_, c, h, w] = sets[0].images.dims();
    let mut images = crate::tensor::Tensor4::zeros([total, c, h, w]);
    let mut labels = Vec::with_capacity(total);
    let mut at = 0usize;
    for set in &sets {
        for si in 0..set.len() {
            for ci in 0..c {
                images.plane_mut(at, ci).copy_from_slice(set.images.plane(si, ci));
            }
            labels.push(set.labels[si]);
            at += 1;
        }
    }
    Ok(Dataset {
        images,
        labels,
        classes: sets[0].classes,
        split: dataio::Split::Train,
    })
}

fn depth_to_blocks(depth: usize) -> Result<usize> {
    if depth >= 5 && (depth - 2) % 3 == 0 {
        Ok((depth - 2) / 3)
    } else {
        Err(Error::invalid(format!(
            "depth {depth} is not of the form 3N+2; legal depths are 5, 8, 11, 14, 17, 20, ..."
        )))
    }
}

fn parse_lr_drops(s: &str) -> Result<Vec<(usize, f64)>> {
    if s.trim().is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|pair| {
            let (e, d) = pair
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad lr drop {pair:?}")))?;
            Ok((
                e.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad drop epoch {e:?}")))?,
                d.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad drop divisor {d:?}")))?,
            ))
        })
        .collect()
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let kind: ArchKind = args.arch.into();
    let n = depth_to_blocks(args.depth)?;
    let (train_data, test_data) = load_data(&args.data, cli.seed)?;
    let hw = train_data.images.dims()[2];
    let spec = NetworkSpec::new(kind, n, args.base, hw, train_data.classes)?;

    let params0 = match args.init.as_str() {
        "kwi" => network::build(&spec, cli.seed, InitScheme::Kwi)?,
        "hmwi" => network::build(&spec, cli.seed, InitScheme::Hmwi)?,
        other => {
            let path = other.strip_prefix("transfer-from:").ok_or_else(|| {
                Error::invalid(format!(
                    "--init must be kwi, hmwi, or transfer-from:<file>, got {other:?}"
                ))
            })?;
            if kind != ArchKind::Plain {
                return Err(Error::invalid(
                    "transfer-from initializes a plain net from a residual weight file",
                ));
            }
            let (r, rspec) = dataio::load_weights(Path::new(path))?;
            if rspec.kind != ArchKind::Residual {
                return Err(Error::invalid("transfer-from expects residual weights"));
            }
            if rspec.with_kind(kind) != spec {
                return Err(Error::invalid(
                    "transfer-from weight file does not match the requested architecture",
                ));
            }
            init::transform_t(&r)
        }
    };

    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr_initial: args.lr,
        lr_drops: parse_lr_drops(&args.lr_drops)?,
        momentum: args.momentum,
        lambda: args.lambda,
        decay_mode: args.decay_mode.into(),
        seed: cli.seed,
        shuffle: true,
    };
    let (params, history) = trainer::train(&spec, &params0, &train_data, &test_data, &cfg)?;

    std::fs::create_dir_all(&cli.out)?;
    let rows: Vec<String> = history
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{}",
                m.epoch,
                fmt_f64(m.risk),
                fmt_f64(m.cost),
                fmt_f64(m.penalty),
                fmt_f64(m.error)
            )
        })
        .collect();
    dataio::write_csv(&cli.out.join("metrics.csv"), "epoch,risk,cost,penalty,error", &rows)?;
    dataio::save_weights(&params, &spec, &cli.out.join("weights.rneq"))?;
    println!(
        "trained {} depth-{} net for {} epochs -> {}",
        spec.kind.name(),
        spec.depth(),
        args.epochs,
        cli.out.display()
    );
    Ok(())
}

fn cmd_transform(cli: &Cli, args: &TransformArgs) -> Result<()> {
    let (params, spec) = dataio::load_weights(&args.input)?;
    let (out_params, out_spec) = match args.direction {
        // a residual file becomes the equivalent plain file and vice versa
        Direction::R2p => (
            init::transform_t(&params),
            spec.with_kind(ArchKind::Plain),
        ),
        Direction::P2r => (
            init::transform_t_inv(&params),
            spec.with_kind(ArchKind::Residual),
        ),
    };
    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataio::save_weights(&out_params, &out_spec, &cli.out)?;
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn cmd_equiv_check(cli: &Cli, args: &EquivArgs) -> Result<()> {
    let (p, pspec) = dataio::load_weights(&args.plain)?;
    let (r, rspec) = dataio::load_weights(&args.residual)?;
    if pspec.kind != ArchKind::Plain || rspec.kind != ArchKind::Residual {
        return Err(Error::invalid(
            "--plain must hold plain weights and --residual residual weights",
        ));
    }
    if pspec.with_kind(ArchKind::Residual) != rspec {
        return Err(Error::invalid("the two weight files have different shapes"));
    }
    let (train_data, _) = load_data(&args.data, cli.seed)?;
    let cfg = TrainConfig {
        epochs: usize::MAX / 2,
        batch_size: args.batch,
        lr_initial: args.lr,
        lr_drops: vec![],
        momentum: 0.0,
        lambda: args.lambda,
        decay_mode: DecayMode::Standard,
        seed: cli.seed,
        shuffle: true,
    };
    let report = trainer::run_pair(&rspec, p, r, &train_data, &cfg, Some(args.iters))?;

    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let rows: Vec<String> = report
        .divergence
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let rp = if i == 0 { f64::NAN } else { report.plain_risks[i - 1] };
            let rr = if i == 0 { f64::NAN } else { report.residual_risks[i - 1] };
            format!("{i},{},{},{}", fmt_f64(*d), fmt_f64(rp), fmt_f64(rr))
        })
        .collect();
    dataio::write_csv(
        &cli.out,
        "iteration,max_divergence,plain_risk,residual_risk",
        &rows,
    )?;
    let max = report.max_divergence();
    println!(
        "max divergence over {} iterations: {} (tolerance {})",
        report.iterations, max, args.tol
    );
    if max <= args.tol {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "divergence {max} exceeds tolerance {}",
            args.tol
        )))
    }
}

fn cmd_cushion(cli: &Cli, args: &CushionArgs) -> Result<()> {
    let (params, spec) = dataio::load_weights(&args.weights)?;
    let (train_data, _) = load_data(&args.data, cli.seed)?;
    if train_data.images.dims()[2] != spec.input_hw {
        return Err(Error::invalid("dataset size does not match the weights"));
    }
    let count = args.samples.min(train_data.len());
    let indices: Vec<usize> = (0..count).collect();
    let (batch, _) = train_data.gather(&indices);

    let report = match (args.layer, args.from, args.to) {
        (Some(layer), None, None) => {
            let id_removed = match args.id_removed {
                IdRemoval::Auto => spec.kind != ArchKind::Plain,
                IdRemoval::On => true,
                IdRemoval::Off => false,
            };
            stability::layer_cushion(&params, &spec, layer, &batch, id_removed)?
        }
        (None, Some(from), Some(to)) => {
            stability::interlayer_cushion(&params, &spec, from, to, &batch, args.cap)?
        }
        _ => {
            return Err(Error::invalid(
                "choose either --layer L or --from I --to J",
            ))
        }
    };

    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut rows: Vec<String> = report
        .mus
        .iter()
        .map(|(i, mu)| format!("{i},{}", fmt_f64(*mu)))
        .collect();
    rows.push(format!("mean,{}", fmt_f64(report.mean)));
    rows.push(format!("std,{}", fmt_f64(report.std)));
    rows.push(format!("min,{}", fmt_f64(report.min)));
    rows.push(format!("skipped_zero,{}", report.skipped_zero));
    dataio::write_csv(&cli.out, "sample_index,mu", &rows)?;
    println!(
        "cushion mean {} over {} samples -> {}",
        report.mean,
        report.mus.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_dgf(cli: &Cli, args: &DgfArgs) -> Result<()> {
    let (params, spec) = dataio::load_weights(&args.weights)?;
    let (train_data, _) = load_data(&args.data, cli.seed)?;
    if train_data.images.dims()[2] != spec.input_hw {
        return Err(Error::invalid("dataset size does not match the weights"));
    }
    let layers: Vec<usize> = if args.layers == "all" {
        (1..=spec.conv_layers()).collect()
    } else {
        args.layers
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad layer {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let count = args.batch.min(train_data.len());
    let indices: Vec<usize> = (0..count).collect();
    let (batch, labels) = train_data.gather(&indices);

    let mut rows = Vec::new();
    let mut ratio_rows = Vec::new();
    for &layer in &layers {
        let report = gradflow::sigma_fraction(&params, &spec, &batch, &labels, layer)?;
        rows.push(format!(
            "{layer},{},{},{},{}",
            fmt_f64(report.sigma_mean),
            fmt_f64(report.sigma_std),
            report.degenerate_channels,
            report.skipped_positions
        ));
        if args.dump_ratios.is_some() {
            for (sample, ratios) in report.ratios.iter().enumerate() {
                for (channel, r) in ratios.iter().enumerate() {
                    let val = match r.ratio {
                        Some(v) => fmt_f64(v),
                        None => "undefined".to_string(),
                    };
                    ratio_rows.push(format!("{layer},{sample},{channel},{val}"));
                }
            }
        }
    }
    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataio::write_csv(
        &cli.out,
        "layer,sigma_mean,sigma_std,degenerate_channels,skipped_positions",
        &rows,
    )?;
    if let Some(dump) = &args.dump_ratios {
        dataio::write_csv(dump, "layer,sample,channel,ratio", &ratio_rows)?;
    }
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn trivial_grid(sweep: SweepParam, base: &TrivialConfig) -> Vec<(String, f64, TrivialConfig)> {
    let mk = |name: &str, v: f64, cfg: TrivialConfig| (name.to_string(), v, cfg);
    match sweep {
        SweepParam::N => [5usize, 10, 20, 40, 80]
            .iter()
            .map(|&n| mk("n", n as f64, TrivialConfig { n, ..*base }))
            .collect(),
        SweepParam::L => (1..base.layers)
            .map(|l| mk("l", l as f64, TrivialConfig { probe: l, ..*base }))
            .collect(),
        SweepParam::P => (0..=10)
            .map(|k| {
                let p = k as f64 / 10.0;
                mk("p", p, TrivialConfig { p, ..*base })
            })
            .collect(),
        SweepParam::Eps => [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
            .iter()
            .map(|&eps| mk("eps", eps, TrivialConfig { eps, ..*base }))
            .collect(),
        SweepParam::SigmaA => [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1]
            .iter()
            .map(|&sigma_a| mk("sigma_a", sigma_a, TrivialConfig { sigma_a, ..*base }))
            .collect(),
        SweepParam::SigmaV => [0.001, 0.01, 0.1, 1.0, 10.0]
            .iter()
            .map(|&sigma_v| mk("sigma_v", sigma_v, TrivialConfig { sigma_v, ..*base }))
            .collect(),
    }
}

fn cmd_trivial(cli: &Cli, args: &TrivialArgs) -> Result<()> {
    let base = TrivialConfig {
        n: args.n,
        layers: args.layers,
        probe: args.probe,
        p: args.p,
        eps: args.eps,
        sigma_a: args.sigma_a,
        sigma_v: args.sigma_v,
        trials: args.trials,
        seed: cli.seed,
        kind: TrivialKind::Residual,
        sigma_a_plain: args.sigma_a_plain,
    };
    base.validate()?;
    let points = match args.sweep {
        Some(sweep) => trivial_grid(sweep, &base),
        None => vec![("fixed".to_string(), 0.0, base)],
    };
    let kinds: Vec<TrivialKind> = match args.kind {
        KindArg::Residual => vec![TrivialKind::Residual],
        KindArg::Plain => vec![TrivialKind::Plain],
        KindArg::Both => vec![TrivialKind::Residual, TrivialKind::Plain],
    };

    let mut rows = Vec::new();
    for (name, value, cfg) in &points {
        for &kind in &kinds {
            let cfg = TrivialConfig { kind, ..*cfg };
            let est = trivial::simulate_sigma(&cfg)?;
            let (general, fixed) = if kind == TrivialKind::Residual {
                (
                    fmt_f64(trivial::analytic_sigma(&cfg)?),
                    fmt_f64(trivial::analytic_sigma_conclusion(&cfg)?),
                )
            } else {
                (String::new(), String::new())
            };
            let kind_name = match kind {
                TrivialKind::Residual => "residual",
                TrivialKind::Plain => "plain",
            };
            rows.push(format!(
                "{name},{},{kind_name},{},{},{},{general},{fixed}",
                fmt_f64(*value),
                fmt_f64(est.mean),
                fmt_f64(est.stderr),
                est.trials
            ));
        }
    }
    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataio::write_csv(
        &cli.out,
        "param,value,kind,sigma_sim,stderr,trials,sigma_analytic,sigma_analytic_fixed_depth",
        &rows,
    )?;
    println!("wrote {} rows -> {}", rows.len(), cli.out.display());
    Ok(())
}

fn cmd_phi(cli: &Cli, args: &PhiArgs) -> Result<()> {
    let points: Vec<f64> = match (&args.r, &args.sweep) {
        (Some(r), None) => vec![*r],
        (None, Some(sweep)) => {
            let parts: Vec<&str> = sweep.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::invalid("--sweep needs lo,hi,points"));
            }
            let lo: f64 = parts[0].parse().map_err(|_| Error::invalid("bad lo"))?;
            let hi: f64 = parts[1].parse().map_err(|_| Error::invalid("bad hi"))?;
            let n: usize = parts[2].parse().map_err(|_| Error::invalid("bad points"))?;
            if lo <= 0.0 || hi <= lo || n < 2 {
                return Err(Error::invalid("need 0 < lo < hi and points >= 2"));
            }
            (0..n)
                .map(|k| {
                    let t = k as f64 / (n - 1) as f64;
                    (lo.ln() + t * (hi.ln() - lo.ln())).exp()
                })
                .collect()
        }
        _ => return Err(Error::invalid("choose exactly one of --r or --sweep")),
    };
    let mut rows = Vec::with_capacity(points.len());
    for r in points {
        rows.push(format!(
            "{},{},{}",
            fmt_f64(r),
            fmt_f64(trivial::phi(r)?),
            fmt_f64(trivial::phi_approx(r, PHI_APPROX_EXPONENT)?)
        ));
    }
    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataio::write_csv(&cli.out, "r,phi,phi_approx", &rows)?;
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn cmd_stats(cli: &Cli, args: &StatsArgs) -> Result<()> {
    let (params, _) = dataio::load_weights(&args.weights)?;
    let stats = init::weight_stats(&params, args.threshold);
    let row = |scope: &str, b: &init::StatsBlock| {
        format!(
            "{scope},{},{},{},{},{},{}",
            fmt_f64(b.mean),
            fmt_f64(b.std),
            fmt_f64(b.mass_all),
            fmt_f64(b.mass_ge_threshold),
            fmt_f64(b.mass_id),
            b.count_gt_0p7
        )
    };
    let rows = vec![
        row("all_layers", &stats.all_layers),
        row("blocks_only", &stats.blocks_only),
    ];
    if let Some(parent) = cli.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataio::write_csv(
        &cli.out,
        "scope,mean,std,mass_all,mass_ge_threshold,mass_id,count_gt_0p7",
        &rows,
    )?;
    println!("wrote {}", cli.out.display());
    Ok(())
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    // ignore failure: the global pool can only be set once per process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match &cli.command {
        Command::Train(args) => cmd_train(cli, args),
        Command::Transform(args) => cmd_transform(cli, args),
        Command::EquivCheck(args) => cmd_equiv_check(cli, args),
        Command::Cushion(args) => cmd_cushion(cli, args),
        Command::Dgf(args) => cmd_dgf(cli, args),
        Command::Trivial(args) => cmd_trivial(cli, args),
        Command::Phi(args) => cmd_phi(cli, args),
        Command::Stats(args) => cmd_stats(cli, args),
    }
}

/// Maps an error onto the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Unsupported(_) | Error::SizeLimit(_) => 1,
        Error::Format(_) | Error::Io(_) => 2,
        Error::CheckFailed(_) | Error::EmptyReport(_) => 3,
    }
}
