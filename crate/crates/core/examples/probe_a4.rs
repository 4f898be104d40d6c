//! Post-transfer feature-norm probe: pre-normalization norms at the tap.

use hypercd_core::cdnet::{forward_embedding, DomainSpec};
use hypercd_core::downstream::transfer;
use hypercd_core::hsdata::{extract_patch, normalize_cube, synth_domains, SynthConfig};
use hypercd_core::selfsup::{pretrain, ContrastiveConfig};
use hypercd_core::tensorops::SgdConfig;
use hypercd_core::{ArchConfig, Tensor4};

fn main() {
    let seed = 7;
    let s: f64 = std::env::var("S").ok().and_then(|v| v.parse().ok()).unwrap_or(100.0);
    let tau: f64 = std::env::var("TAU").ok().and_then(|v| v.parse().ok()).unwrap_or(0.7);
    let p: usize = std::env::var("P").ok().and_then(|v| v.parse().ok()).unwrap_or(6);

    let mut src_cfg = SynthConfig::new(vec![24, 32, 40], vec![4, 4, 4], 64, seed);
    let sources = synth_domains(&src_cfg).unwrap();
    let mut tgt_cfg = SynthConfig::new(vec![28], vec![4], 64, seed + 1);
    tgt_cfg.id_prefix = "target".into();
    let target = synth_domains(&tgt_cfg).unwrap().pop().unwrap();

    let arch = ArchConfig { input_scale: s, ..ArchConfig::default() };
    let ccfg = ContrastiveConfig { tau, p, ..ContrastiveConfig::default() };
    let (pre, hist) =
        pretrain::<f32>(&sources, &arch, &ccfg, &SgdConfig::default(), seed).unwrap();

    let spec = DomainSpec::from_cube(&target);
    let params = transfer(&pre, &spec, 3).unwrap();
    let normed = normalize_cube(&target);

    // 5x5 patches -> p=1 embedding windows; prenorm norm = ||a4|| at center
    let mut norms = Vec::new();
    for flat in target.labeled_indices().iter().step_by(97).take(40) {
        let (r, c) = target.flat_to_rc(*flat);
        let patch = extract_patch(&normed, r, c, 5).unwrap();
        let data: Vec<f32> = patch
            .channel_major()
            .into_iter()
            .map(|v| (v * s) as f32)
            .collect();
        let x = Tensor4::from_vec(1, target.bands, 5, 5, data).unwrap();
        let (_, cache) = forward_embedding(&params, &target.domain_id, &x).unwrap();
        norms.push(cache.embedding_prenorm_norms().unwrap()[0] as f64);
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "s={s} tau={tau} p={p}: pretrain {:.2}->{:.2} | ||a4|| min {:.3} med {:.3} max {:.3}",
        hist[0].loss,
        hist.last().unwrap().loss,
        norms[0],
        norms[norms.len() / 2],
        norms[norms.len() - 1]
    );
}
