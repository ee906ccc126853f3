use rneq::dataio;
use rneq::network::{build, ArchKind, InitScheme, NetworkSpec};
use rneq::trainer::{train, DecayMode, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let count: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let base: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(32);

    for seed in 0..seeds {
        let t0 = Instant::now();
        let (train_data, test_data) = dataio::synth_pair(seed, count, 400, 8, 10).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            lr_initial: lr,
            lr_drops: vec![],
            momentum: 0.0,
            lambda: 1e-4,
            decay_mode: DecayMode::Standard,
            seed,
            shuffle: true,
        };
        let pspec = NetworkSpec::new(ArchKind::Plain, 2, base, 8, 10).unwrap();
        let rspec = pspec.with_kind(ArchKind::Residual);
        let p0 = build(&pspec, seed, InitScheme::Kwi).unwrap();
        let r0 = build(&rspec, seed, InitScheme::Hmwi).unwrap();
        let (_, hp) = train(&pspec, &p0, &train_data, &test_data, &cfg).unwrap();
        let (_, hr) = train(&rspec, &r0, &train_data, &test_data, &cfg).unwrap();
        let target = hp.last().unwrap().risk;
        let first_epoch_reaching = hr.iter().position(|m| m.risk <= target);
        println!(
            "seed {seed}: plain final risk {:.4} err {:.3} | residual final {:.4} err {:.3} | res reaches plain-final at epoch {:?} | {:.1}s",
            target,
            hp.last().unwrap().error,
            hr.last().unwrap().risk,
            hr.last().unwrap().error,
            first_epoch_reaching,
            t0.elapsed().as_secs_f64()
        );
        print!("  plain risks:    ");
        for m in hp.iter().step_by(3) {
            print!("{:.3} ", m.risk);
        }
        println!();
        print!("  residual risks: ");
        for m in hr.iter().step_by(3) {
            print!("{:.3} ", m.risk);
        }
        println!();
    }
}
