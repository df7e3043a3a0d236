use cvmim::data::dataset::{build_dataset, DatasetConfig};
use cvmim::eval::{extract_embeddings, single_shot_protocol, DownstreamConfig};
use cvmim::losses::{FusionMode, LossWeights};
use cvmim::nets::NetConfig;
use cvmim::trainer::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let down = DownstreamConfig::default();
    let net = NetConfig { input_dim: 26, h: 96, d: 4, h_q: 64, h_d: 64, h_f: 64, m: 64 };
    let ds = build_dataset(&DatasetConfig { noise_std: 0.01, ..DatasetConfig::default() }).unwrap();
    for fusion in [
        FusionMode::Concat,
        FusionMode::ProductOfExperts,
        FusionMode::MixtureOfExperts,
    ] {
        for seed in [0u64, 1, 2] {
            let cfg = TrainConfig {
                batch: 64,
                iterations: 20000,
                seed,
                fusion,
                lr: 0.005,
                weights: LossWeights { lambda3: 2.0, ..LossWeights::default() },
                d_steps: 2,
                e_steps: 2,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let mut t = Trainer::new(cfg, net).unwrap();
            for _ in 0..20000 {
                t.step(&ds).unwrap();
            }
            let emb = extract_embeddings(&mut t.nets.enc, &ds).unwrap();
            let ss = single_shot_protocol(&emb, &ds, &down).unwrap();
            println!("m64 {} seed{seed}: ss {:.3} ({:.0?})", fusion.name(), ss.grand_avg, t0.elapsed());
        }
    }
}
