//! Pretraining-dynamics probe: loss trajectory under different settings.

use hypercd_core::hsdata::{synth_domains, SynthConfig};
use hypercd_core::selfsup::{pretrain, ContrastiveConfig};
use hypercd_core::tensorops::SgdConfig;
use hypercd_core::ArchConfig;

fn main() {
    let seed = 7;
    let noise: f64 = std::env::var("NOISE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.05);
    let mut src_cfg = SynthConfig::new(vec![24, 32, 40], vec![4, 4, 4], 64, seed);
    src_cfg.noise_sigma = noise;
    let sources = synth_domains(&src_cfg).unwrap();

    let tau: f64 = std::env::var("TAU")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.07);
    let iters: usize = std::env::var("ITERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);

    let arch = ArchConfig::default();
    let ccfg = ContrastiveConfig {
        tau,
        iterations: iters,
        ..ContrastiveConfig::default()
    };
    let scfg = SgdConfig::default();
    match pretrain::<f32>(&sources, &arch, &ccfg, &scfg, seed) {
        Ok((_, history)) => {
            let marks = [0usize, 1, 2, 3, 4, 5, 8, 12, 20, 35, 50, 80, 120, 160, 199];
            for &m in marks.iter().filter(|&&m| m < history.len()) {
                println!("iter {:3}  lr {:.4}  loss {:.4}", m, history[m].lr, history[m].loss);
            }
            let first = history[0].loss;
            let last = history.last().unwrap().loss;
            println!("ratio final/initial = {:.4}", last / first);
        }
        Err(e) => println!("pretrain failed: {e}"),
    }
}
