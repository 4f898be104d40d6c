//! `hypercd eval`: evaluate a checkpoint on a labeled cube.
//!
//! By default every labeled pixel is scored; passing `--train-per-domain`
//! (with `--split-seed`/`--run-index`) reconstructs a training split and
//! evaluates its complement, matching the splits used by `hypercd train`.

use std::path::PathBuf;

use clap::Args;
use hypercd_core::checkpoint::load_checkpoint;
use hypercd_core::downstream::evaluate;
use hypercd_core::hsdata::{make_split, SplitSpec};

use crate::commands::util;
use crate::config::Resolved;
use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs, HyperArgs};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Parameter checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled cube to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    /// Seed of the split to reconstruct (defaults to --seed).
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    /// Hold out this many training samples and evaluate the rest.
    #[arg(long = "train-per-domain")]
    pub train_per_domain: Option<usize>,
    /// Run index of the reconstructed split.
    #[arg(long = "run-index", default_value_t = 0)]
    pub run_index: u32,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let file = args.common.load_config()?;
    let resolved = Resolved::resolve(&file, &args.hyper.overrides())?;
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        1,
        resolved.echo(),
    );
    manifest.add_input(&args.checkpoint)?;
    let cube = util::load_cubes(std::slice::from_ref(&args.data), &mut manifest)?
        .pop()
        .expect("one cube");

    let mut params = load_checkpoint::<f32>(&args.checkpoint)?;
    params.arch.input_scale = resolved.experiment.arch.input_scale;

    let test_idx = match args.train_per_domain {
        Some(train_per_domain) => {
            let spec = SplitSpec {
                seed: args.split_seed.unwrap_or(args.common.seed),
                train_per_domain,
                run_index: args.run_index,
            };
            make_split(&cube, &spec, false)?.1
        }
        None => cube.labeled_indices(),
    };

    let t0 = std::time::Instant::now();
    let report = evaluate(&params, &cube, &test_idx, args.run_index as usize)?;
    manifest.record_timing("eval", t0.elapsed().as_secs_f64());

    let doc = serde_json::json!({
        "domain": cube.domain_id,
        "test_pixels": test_idx.len(),
        "oa": report.oa,
        "aa": report.aa,
        "per_class": report.per_class
            .iter()
            .map(|v| if v.is_nan() { serde_json::Value::Null } else { serde_json::json!(v) })
            .collect::<Vec<_>>(),
        "confusion": report.confusion,
    });
    util::write_text(
        &args.common.out.join("eval.json"),
        &serde_json::to_string_pretty(&doc).expect("eval serialization"),
        &mut manifest,
    )?;

    println!(
        "{}: OA {:.4} AA {:.4} over {} test pixels",
        cube.domain_id,
        report.oa,
        report.aa,
        test_idx.len()
    );
    manifest.write()?;
    Ok(())
}
