//! Stability probe for the transfer-finetune phase.

use hypercd_core::cdnet::{forward_logits, DomainSpec};
use hypercd_core::downstream::{evaluate, transfer, FinetuneConfig};
use hypercd_core::hsdata::{make_split, normalize_cube, synth_domains, SplitSpec, SynthConfig};
use hypercd_core::selfsup::pretrain;
use hypercd_core::tensorops::{
    lr_at, sgd_step, softmax_xent_backward, softmax_xent_forward,
};
use hypercd_core::{ContrastiveConfig, ExperimentConfig, SgdConfig};

fn main() {
    let seed = 7;
    let mut src_cfg = SynthConfig::new(vec![24, 32, 40], vec![4, 4, 4], 64, seed);
    let sources = synth_domains(&src_cfg).unwrap();
    let mut tgt_cfg = SynthConfig::new(vec![28], vec![4], 64, seed + 1);
    tgt_cfg.id_prefix = "target".into();
    let target = synth_domains(&tgt_cfg).unwrap().pop().unwrap();

    let iters: usize = std::env::var("PITERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let mult: f64 = std::env::var("MULT")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(10.0);

    let ccfg = ContrastiveConfig {
        iterations: iters,
        ..ContrastiveConfig::default()
    };
    let mut cfg = ExperimentConfig::default();
    cfg.arch.input_scale = 15.0;
    let (pre, hist) = pretrain::<f32>(&sources, &cfg.arch, &ccfg, &cfg.pretrain_sgd, seed).unwrap();
    println!(
        "pretrain loss {:.3} -> {:.3}",
        hist[0].loss,
        hist.last().unwrap().loss
    );
    for p in pre.trunk_params() {
        let m = p.value.iter().fold(0f32, |a, v| a.max(v.abs()));
        let rms = (p.value.iter().map(|v| (v * v) as f64).sum::<f64>() / p.value.len() as f64)
            .sqrt();
        println!("  {:14} max {:9.4} rms {:9.5}", p.name, m, rms);
    }

    let spec = DomainSpec::from_cube(&target);
    let mut params = transfer(&pre, &spec, 3).unwrap();
    let (train_idx, test_idx) = make_split(
        &target,
        &SplitSpec {
            seed,
            train_per_domain: 50,
            run_index: 0,
        },
        false,
    )
    .unwrap();

    // manual finetune loop with diagnostics
    let normed = normalize_cube(&target);
    let fcfg = FinetuneConfig::default();
    let side = params.arch.patch_side();
    let (batch, labels) = hypercd_probe_batch(&normed, &train_idx, side);
    let sgd = SgdConfig::finetune_default();
    for iter in 0..fcfg.iterations {
        params.zero_grads();
        let (logits, cache) = match forward_logits(&params, &target.domain_id, &batch) {
            Ok(v) => v,
            Err(e) => {
                println!("iter {iter}: forward failed: {e}");
                return;
            }
        };
        let maxlogit = logits.data().iter().fold(0f32, |a, v| a.max(v.abs()));
        let (loss, xc) = match softmax_xent_forward(&logits, &labels) {
            Ok(v) => v,
            Err(e) => {
                println!("iter {iter}: xent failed: {e} (max|logit| {maxlogit:.3e})");
                return;
            }
        };
        let dl = softmax_xent_backward(&xc, &labels).unwrap();
        if let Err(e) = hypercd_core::cdnet::backward(&mut params, &cache, dl.data()) {
            println!("iter {iter}: backward failed: {e}");
            return;
        }
        if let Err(e) = sgd_step(params.params_mut(), &sgd, iter, mult) {
            println!("iter {iter}: sgd failed: {e}");
            return;
        }
        if iter % 5 == 0 || iter < 8 {
            println!(
                "iter {iter:3} lr {:.4} loss {:8.4} max|logit| {:9.3e}",
                lr_at(iter, &sgd),
                loss,
                maxlogit
            );
        }
    }
    let report = evaluate(&params, &target, &test_idx, 0).unwrap();
    println!("OA {:.4} AA {:.4}", report.oa, report.aa);
}

fn hypercd_probe_batch(
    cube: &hypercd_core::HyperCube,
    idx: &[usize],
    side: usize,
) -> (hypercd_core::Tensor4<f32>, Vec<usize>) {
    use hypercd_core::hsdata::{dihedral_augment, extract_patch};
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &flat in idx {
        let (r, c) = cube.flat_to_rc(flat);
        let patch = extract_patch(cube, r, c, side).unwrap();
        for k in 0..8 {
            let p = dihedral_augment(&patch, k).unwrap();
            data.extend(p.channel_major().into_iter().map(|v| v as f32));
            labels.push(cube.label_at(r, c) as usize - 1);
        }
    }
    let n = labels.len();
    (
        hypercd_core::Tensor4::from_vec(n, cube.bands, side, side, data).unwrap(),
        labels,
    )
}
