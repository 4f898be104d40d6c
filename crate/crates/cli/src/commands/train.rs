//! `hypercd train`: train and evaluate a downstream model under one of the
//! four regimes, over several fresh splits.

use std::path::PathBuf;

use clap::Args;
use hypercd_core::checkpoint::{load_checkpoint, save_checkpoint};
use hypercd_core::downstream::run_experiment;
use hypercd_core::Regime;

use crate::commands::util;
use crate::config::Resolved;
use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs, HyperArgs, RegimeArg};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training regime.
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Labeled target cube (the downstream task).
    #[arg(long)]
    pub target: PathBuf,
    /// Source cubes for transfer/joint regimes.
    #[arg(long, num_args = 0..)]
    pub sources: Vec<PathBuf>,
    /// Reuse a pretrained checkpoint instead of pretraining internally.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let file = args.common.load_config()?;
    let resolved = Resolved::resolve(&file, &args.hyper.overrides())?;
    let cfg = &resolved.experiment;
    let regime: Regime = args.regime.into();
    let threads = args.common.threads();
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        threads,
        resolved.echo(),
    );

    let target = util::load_cubes(std::slice::from_ref(&args.target), &mut manifest)?
        .pop()
        .expect("one target cube");
    let sources = util::load_cubes(&args.sources, &mut manifest)?;
    match regime {
        Regime::Scratch => {}
        _ if sources.is_empty() && args.pretrained.is_none() => {
            return Err(CliError::Usage(format!(
                "regime {regime} needs --sources (or --pretrained for transfer regimes)"
            )));
        }
        _ => {}
    }

    let external = match &args.pretrained {
        Some(path) => {
            manifest.add_input(path)?;
            let mut params = load_checkpoint::<f32>(path)?;
            // the container does not carry the input gain; use the run's
            params.arch.input_scale = cfg.arch.input_scale;
            Some(params)
        }
        None => None,
    };

    let t0 = std::time::Instant::now();
    let result = run_experiment::<f32>(
        regime,
        &target,
        &sources,
        cfg,
        args.common.seed,
        external,
        threads,
    )?;
    manifest.record_timing("train", t0.elapsed().as_secs_f64());

    if let Some(history) = &result.pretrain_history {
        util::write_text(
            &args.common.out.join("pretrain_history.csv"),
            &util::pretrain_history_csv(history),
            &mut manifest,
        )?;
    }
    for (run, history) in result.histories.iter().enumerate() {
        util::write_text(
            &args.common.out.join(format!("history_run{run}.csv")),
            &util::train_history_csv(history),
            &mut manifest,
        )?;
    }
    for (run, params) in result.models.iter().enumerate() {
        let path = args.common.out.join(format!("checkpoint_run{run}.hcp"));
        save_checkpoint(params, &path)?;
        manifest.add_artifact(&path)?;
    }
    let regime_name = regime.to_string();
    util::write_text(
        &args.common.out.join("metrics.csv"),
        &util::metrics_csv(&regime_name, &result.aggregate.reports),
        &mut manifest,
    )?;
    util::write_text(
        &args.common.out.join("aggregate.json"),
        &util::aggregate_json(
            &regime_name,
            &result.aggregate,
            args.common.seed,
            &resolved.echo(),
        ),
        &mut manifest,
    )?;

    for r in &result.aggregate.reports {
        println!("run {}: OA {:.4} AA {:.4}", r.run_index, r.oa, r.aa);
    }
    println!(
        "{regime_name}: mean OA {:.4} mean AA {:.4} over {} runs",
        result.aggregate.mean_oa,
        result.aggregate.mean_aa,
        result.aggregate.reports.len()
    );
    manifest.write()?;
    Ok(())
}
