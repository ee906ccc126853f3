use rneq::dataio;
use rneq::gradflow;
use rneq::network::{build, ArchKind, InitScheme, NetworkSpec};
use rneq::stability;
use rneq::trainer::{train, DecayMode, TrainConfig};

fn main() {
    for seed in 0..5u64 {
        let (train_data, test_data) = dataio::synth_pair(seed, 2000, 400, 8, 10).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_initial: 0.1,
            lr_drops: vec![],
            momentum: 0.0,
            lambda: 1e-4,
            decay_mode: DecayMode::Standard,
            seed,
            shuffle: true,
        };
        let pspec = NetworkSpec::new(ArchKind::Plain, 2, 4, 8, 10).unwrap();
        let rspec = pspec.with_kind(ArchKind::Residual);
        let p0 = build(&pspec, seed, InitScheme::Kwi).unwrap();
        let r0 = build(&rspec, seed, InitScheme::Hmwi).unwrap();

        // criterion 10 input: sigma at init, deepest mixing layer = 3N = 6
        let idx: Vec<usize> = (0..64).collect();
        let (batch, labels) = train_data.gather(&idx);
        let layer = 3 * rspec.blocks_per_group;
        let sp0 = gradflow::sigma_fraction(&p0, &pspec, &batch, &labels, layer).unwrap();
        let sr0 = gradflow::sigma_fraction(&r0, &rspec, &batch, &labels, layer).unwrap();

        let (pt, _) = train(&pspec, &p0, &train_data, &test_data, &cfg).unwrap();
        let (rt, _) = train(&rspec, &r0, &train_data, &test_data, &cfg).unwrap();

        // criterion 9: mean per-sample cushion per conv layer on test samples
        let tidx: Vec<usize> = (0..64).collect();
        let (tb, _) = test_data.gather(&tidx);
        let mut wins = 0;
        let mut detail = String::new();
        for layer in 1..=pspec.conv_layers() {
            let cp = stability::layer_cushion(&pt, &pspec, layer, &tb, false).unwrap();
            let cr = stability::layer_cushion(&rt, &rspec, layer, &tb, true).unwrap();
            if cr.mean > cp.mean {
                wins += 1;
            }
            detail.push_str(&format!("L{layer}: {:.3}/{:.3} ", cr.mean, cp.mean));
        }
        println!(
            "seed {seed}: sigma@init res {:.3} vs plain {:.3} | cushion wins {wins}/7 | {detail}",
            sr0.sigma_mean, sp0.sigma_mean
        );
    }
}
