//! Timing and accuracy probe for the synthetic transfer pipeline.

use std::time::Instant;

use hypercd_core::downstream::{run_experiment, ExperimentConfig, Regime};
use hypercd_core::hsdata::{synth_domains, SynthConfig};
use hypercd_core::selfsup::pretrain;

fn main() {
    let seed = 7;
    let margin: f64 = std::env::var("MARGIN").ok().and_then(|v| v.parse().ok()).unwrap_or(5.0);
    let tgt_classes: u16 = std::env::var("TCLS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let mut src_cfg = SynthConfig::new(vec![24, 32, 40], vec![4, 4, 4], 64, seed);
    src_cfg.margin_factor = margin;
    let sources = synth_domains(&src_cfg).unwrap();
    let tbands: usize = std::env::var("TBANDS").ok().and_then(|v| v.parse().ok()).unwrap_or(28);
    let mut tgt_cfg = SynthConfig::new(vec![tbands], vec![tgt_classes], 64, seed + 1);
    tgt_cfg.margin_factor = margin;
    tgt_cfg.id_prefix = "target".into();
    let target = synth_domains(&tgt_cfg).unwrap().pop().unwrap();
    eprintln!("margin {margin} target classes {tgt_classes}");

    let mut cfg = ExperimentConfig::default();
    if let Ok(s) = std::env::var("S") {
        cfg.arch.input_scale = s.parse().unwrap();
    }
    if let Ok(v) = std::env::var("P") {
        cfg.contrastive.p = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PCLIP") {
        cfg.pretrain_sgd.max_grad_norm = Some(v.parse().unwrap());
    }
    if let Ok(v) = std::env::var("FCLIP") {
        cfg.finetune.sgd.max_grad_norm = Some(v.parse().unwrap());
    }
    cfg.finetune.train_per_domain = 50;
    cfg.finetune.runs = 5;

    let t0 = Instant::now();
    let (_, history) = pretrain::<f32>(
        &sources,
        &cfg.arch,
        &cfg.contrastive,
        &cfg.pretrain_sgd,
        seed,
    )
    .unwrap();
    let t_pre = t0.elapsed();
    println!(
        "pretrain: {:.1}s  loss {:.4} -> {:.4} (ratio {:.3})",
        t_pre.as_secs_f64(),
        history[0].loss,
        history.last().unwrap().loss,
        history.last().unwrap().loss / history[0].loss
    );
    let mid = &history[history.len() / 2];
    println!("  mid loss @{}: {:.4}", mid.iteration, mid.loss);

    let t1 = Instant::now();
    let selfsup =
        run_experiment::<f32>(Regime::SelfSup, &target, &sources, &cfg, seed, None, 1).unwrap();
    let t_selfsup = t1.elapsed();
    println!(
        "self-sup: {:.1}s  mean OA {:.4}  AA {:.4}  per-run {:?}",
        t_selfsup.as_secs_f64(),
        selfsup.aggregate.mean_oa,
        selfsup.aggregate.mean_aa,
        selfsup
            .aggregate
            .reports
            .iter()
            .map(|r| (r.oa * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );

    let t2 = Instant::now();
    let scratch =
        run_experiment::<f32>(Regime::Scratch, &target, &[], &cfg, seed, None, 1).unwrap();
    let t_scratch = t2.elapsed();
    println!(
        "scratch:  {:.1}s  mean OA {:.4}  AA {:.4}  per-run {:?}",
        t_scratch.as_secs_f64(),
        scratch.aggregate.mean_oa,
        scratch.aggregate.mean_aa,
        scratch
            .aggregate
            .reports
            .iter()
            .map(|r| (r.oa * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
