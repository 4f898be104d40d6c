//! `hypercd sweep`: ablation sweeps over one axis, producing a comparison
//! table of mean OA/AA per point against the scratch baseline.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use hypercd_core::downstream::{prepare_pretrained, run_experiment};
use hypercd_core::{ExperimentConfig, HyperCube, Regime};

use crate::commands::util;
use crate::config::Resolved;
use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs, HyperArgs, RegimeArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Region cropping size of the pseudo-labeling (pretraining per value).
    P,
    /// Number of labeled training samples (pretraining reused).
    Samples,
    /// Residual module count.
    N,
    /// Backbone variants: original / no-multiscale / more-res / modified.
    Backbone,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values. For --axis backbone use names from
    /// {original, no-multiscale, more-res, modified} (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Labeled target cube.
    #[arg(long)]
    pub target: PathBuf,
    /// Source cubes for the transfer regime.
    #[arg(long, num_args = 0..)]
    pub sources: Vec<PathBuf>,
    /// Regime compared against scratch on the p/samples/n axes, and the
    /// regime trained per variant on the backbone axis.
    #[arg(long, value_enum, default_value = "self-sup")]
    pub regime: RegimeArg,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

struct Row {
    value: String,
    regime: String,
    mean_oa: f64,
    mean_aa: f64,
}

fn backbone_variant(cfg: &ExperimentConfig, name: &str) -> Result<ExperimentConfig, CliError> {
    let mut out = cfg.clone();
    match name {
        "original" => {
            out.arch.multiscale_encoder = true;
            out.arch.n_res_modules = 2;
        }
        "no-multiscale" => {
            out.arch.multiscale_encoder = false;
            out.arch.n_res_modules = 2;
        }
        "more-res" => {
            out.arch.multiscale_encoder = true;
        }
        "modified" => {
            out.arch.multiscale_encoder = false;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown backbone variant `{other}`; use original, no-multiscale, more-res, modified"
            )))
        }
    }
    Ok(out)
}

fn experiment(
    regime: Regime,
    target: &HyperCube,
    sources: &[HyperCube],
    cfg: &ExperimentConfig,
    seed: u64,
    pretrained: Option<hypercd_core::CdcnnParams<f32>>,
    threads: usize,
) -> Result<(f64, f64), CliError> {
    let result = run_experiment::<f32>(regime, target, sources, cfg, seed, pretrained, threads)?;
    Ok((result.aggregate.mean_oa, result.aggregate.mean_aa))
}

pub fn run(args: SweepArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let file = args.common.load_config()?;
    let resolved = Resolved::resolve(&file, &args.hyper.overrides())?;
    let base = resolved.experiment.clone();
    let seed = args.common.seed;
    let threads = args.common.threads();
    let regime: Regime = args.regime.into();
    let mut manifest = RunManifest::new(
        &args.common.out,
        seed,
        args.common.deterministic,
        threads,
        resolved.echo(),
    );
    let target = util::load_cubes(std::slice::from_ref(&args.target), &mut manifest)?
        .pop()
        .expect("one target cube");
    let sources = util::load_cubes(&args.sources, &mut manifest)?;

    let parse_usizes = || -> Result<Vec<usize>, CliError> {
        if args.values.is_empty() {
            return Err(CliError::Usage("--values is required for this axis".into()));
        }
        args.values
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("cannot parse sweep value `{v}`")))
            })
            .collect()
    };

    let mut rows: Vec<Row> = Vec::new();
    let t0 = std::time::Instant::now();
    match args.axis {
        SweepAxis::P => {
            let (oa, aa) = experiment(Regime::Scratch, &target, &[], &base, seed, None, threads)?;
            rows.push(Row {
                value: "-".into(),
                regime: "scratch".into(),
                mean_oa: oa,
                mean_aa: aa,
            });
            for p in parse_usizes()? {
                let mut cfg = base.clone();
                cfg.contrastive.p = p;
                let (oa, aa) = experiment(regime, &target, &sources, &cfg, seed, None, threads)?;
                rows.push(Row {
                    value: p.to_string(),
                    regime: regime.to_string(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
            }
        }
        SweepAxis::Samples => {
            // one pretraining shared by all sample counts
            let pretrained = prepare_pretrained::<f32>(regime, &sources, &base, seed)?;
            for samples in parse_usizes()? {
                let mut cfg = base.clone();
                cfg.finetune.train_per_domain = samples;
                let (oa, aa) =
                    experiment(Regime::Scratch, &target, &[], &cfg, seed, None, threads)?;
                rows.push(Row {
                    value: samples.to_string(),
                    regime: "scratch".into(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
                let (oa, aa) = experiment(
                    regime,
                    &target,
                    &sources,
                    &cfg,
                    seed,
                    pretrained.as_ref().map(|p| p.params.clone()),
                    threads,
                )?;
                rows.push(Row {
                    value: samples.to_string(),
                    regime: regime.to_string(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
            }
        }
        SweepAxis::N => {
            for n in parse_usizes()? {
                let mut cfg = base.clone();
                cfg.arch.n_res_modules = n;
                let (oa, aa) =
                    experiment(Regime::Scratch, &target, &[], &cfg, seed, None, threads)?;
                rows.push(Row {
                    value: n.to_string(),
                    regime: "scratch".into(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
                let (oa, aa) = experiment(regime, &target, &sources, &cfg, seed, None, threads)?;
                rows.push(Row {
                    value: n.to_string(),
                    regime: regime.to_string(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
            }
        }
        SweepAxis::Backbone => {
            let names: Vec<String> = if args.values.is_empty() {
                ["original", "no-multiscale", "more-res", "modified"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            } else {
                args.values.clone()
            };
            for name in names {
                let cfg = backbone_variant(&base, &name)?;
                let (oa, aa) = experiment(regime, &target, &sources, &cfg, seed, None, threads)?;
                rows.push(Row {
                    value: name,
                    regime: regime.to_string(),
                    mean_oa: oa,
                    mean_aa: aa,
                });
            }
        }
    }
    manifest.record_timing("sweep", t0.elapsed().as_secs_f64());

    let axis_name = format!("{:?}", args.axis).to_lowercase();
    let mut csv = String::from("axis,value,regime,mean_oa,mean_aa\n");
    println!("{:<10} {:<14} {:>8} {:>8}", "value", "regime", "OA", "AA");
    for row in &rows {
        println!(
            "{:<10} {:<14} {:>8.4} {:>8.4}",
            row.value, row.regime, row.mean_oa, row.mean_aa
        );
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            axis_name, row.value, row.regime, row.mean_oa, row.mean_aa
        ));
    }
    util::write_text(&args.common.out.join("sweep.csv"), &csv, &mut manifest)?;
    manifest.write()?;
    Ok(())
}
