//! Scratch calibration runs; not part of the suite proper.

use std::time::Instant;

use gcrf::data::temporal_split;
use gcrf::derive_seed;
use gcrf::dfl::{dfl_predict, fit_dfl, Architecture, DflOptions, RegWeights};
use gcrf::harness::r_squared;
use gcrf::synth::{generate_network, GeneratorConfig};

#[test]
fn probe_dfl_barrier() {
    for barrier in [4e-4, 4e-3, 0.02] {
        println!("=== barrier {barrier} ===");
        for seed in [100u64, 101, 102] {
            let cfg = GeneratorConfig {
                n_nodes: 300,
                n_steps: 3,
                purchase_dims: 12,
                demographic_dims: 12,
                latent_dims: 2,
                noise_std: 0.45,
                edge_knn: 8,
                signal_split: 0.5,
                seed,
            };
            let (ds, _) = generate_network(&cfg).unwrap();
            let (train, test) = temporal_split(&ds, 2).unwrap();
            let test_snap = &test.snapshots()[0];

            let arch = Architecture {
                gamma: 2.0,
                reg_weights: RegWeights { bandwidth_barrier: barrier, ..RegWeights::default() },
                ..Architecture::default()
            };
            let mut opts = DflOptions::default();
            opts.ascent.max_iters = 400;
            opts.pretrain.epochs = 400;
            opts.seed = derive_seed(seed, 5);
            let t0 = Instant::now();
            let fit = fit_dfl(&train, &arch, &opts).unwrap();
            let mu = dfl_predict(&fit.model, test_snap.features()).unwrap();
            let r2 = r_squared(test_snap.response(), &mu).unwrap();
            println!(
                "seed {seed}: {:6.1?} r2 {r2:.4} v {:+.2} bw {:.4} grad {:.2e} iters {} warn {}",
                t0.elapsed(),
                fit.model.crf.v()[0],
                fit.model.s_head.bandwidth(),
                fit.grad_norm,
                fit.iterations,
                fit.warnings.len(),
            );
        }
    }
}
