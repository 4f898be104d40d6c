//! `hypercd pretrain`: contrastive pretraining over multiple cubes.

use std::path::PathBuf;

use clap::Args;
use hypercd_core::checkpoint::save_checkpoint;
use hypercd_core::selfsup::pretrain;

use crate::commands::util;
use crate::config::Resolved;
use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs, HyperArgs};

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Cube files of the pretraining domains (at least two).
    #[arg(long, num_args = 2.., required = true)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: PretrainArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let file = args.common.load_config()?;
    let resolved = Resolved::resolve(&file, &args.hyper.overrides())?;
    let cfg = &resolved.experiment;
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        1,
        resolved.echo(),
    );
    let cubes = util::load_cubes(&args.data, &mut manifest)?;

    let t0 = std::time::Instant::now();
    let (params, history) = pretrain::<f32>(
        &cubes,
        &cfg.arch,
        &cfg.contrastive,
        &cfg.pretrain_sgd,
        args.common.seed,
    )?;
    manifest.record_timing("pretrain", t0.elapsed().as_secs_f64());

    let ckpt = args.common.out.join("checkpoint.hcp");
    save_checkpoint(&params, &ckpt)?;
    manifest.add_artifact(&ckpt)?;
    util::write_text(
        &args.common.out.join("loss_history.csv"),
        &util::pretrain_history_csv(&history),
        &mut manifest,
    )?;

    let first = history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained on {} domains for {} iterations: loss {:.4} -> {:.4}",
        cubes.len(),
        history.len(),
        first,
        last
    );
    println!("checkpoint: {}", ckpt.display());
    manifest.write()?;
    Ok(())
}
