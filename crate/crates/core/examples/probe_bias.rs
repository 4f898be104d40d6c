//! Bias growth time course during pretraining.
use hypercd_core::hsdata::{synth_domains, SynthConfig};
use hypercd_core::selfsup::{pretrain, ContrastiveConfig};
use hypercd_core::tensorops::SgdConfig;
use hypercd_core::ArchConfig;

fn main() {
    let seed = 7;
    let mut src_cfg = SynthConfig::new(vec![24, 32, 40], vec![4, 4, 4], 64, seed);
    src_cfg.noise_sigma = 0.05;
    let sources = synth_domains(&src_cfg).unwrap();
    for iters in [5usize, 20, 50, 100, 200] {
        let ccfg = ContrastiveConfig { iterations: iters, ..ContrastiveConfig::default() };
        let (params, hist) = pretrain::<f32>(&sources, &ArchConfig::default(), &ccfg, &SgdConfig::default(), seed).unwrap();
        let bias_rms: f64 = {
            let mut sq = 0.0; let mut n = 0usize;
            for p in params.trunk_params() {
                if p.name.ends_with("/bias") {
                    sq += p.value.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
                    n += p.value.len();
                }
            }
            (sq / n as f64).sqrt()
        };
        let w_rms: f64 = {
            let mut sq = 0.0; let mut n = 0usize;
            for p in params.trunk_params() {
                if p.name.ends_with("/weight") {
                    sq += p.value.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
                    n += p.value.len();
                }
            }
            (sq / n as f64).sqrt()
        };
        println!("iters {iters:4}: loss {:.2} bias_rms {bias_rms:.4} w_rms {w_rms:.5}", hist.last().unwrap().loss);
    }
}
