//! `hypercd flops`: layer-by-layer FLOPs of one full-image forward pass.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use hypercd_core::cdnet::{flops_breakdown, DomainSpec};
use hypercd_core::ArchConfig;

use crate::commands::util;
use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackboneArg {
    /// Single 5x5 encoder with n residual modules.
    Modified,
    /// Multi-scale encoder with two residual modules.
    Original,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Backbone layout to count.
    #[arg(long, value_enum, default_value = "modified")]
    pub arch: BackboneArg,
    /// Residual module count (modified backbone).
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Read the image dimensions from a cube file.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Image height when no cube is given.
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width when no cube is given.
    #[arg(long)]
    pub width: Option<usize>,
    /// Band count when no cube is given.
    #[arg(long)]
    pub bands: Option<usize>,
    /// Class count when no cube is given.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: FlopsArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        1,
        std::collections::BTreeMap::new(),
    );

    let (height, width, bands, classes, id) = match &args.image {
        Some(path) => {
            manifest.add_input(path)?;
            let cube = hypercd_core::hsdata::load_cube(path)?;
            let classes = if cube.num_classes > 0 {
                cube.num_classes as usize
            } else {
                args.classes.unwrap_or(16)
            };
            (
                cube.height,
                cube.width,
                cube.bands,
                classes,
                cube.domain_id.clone(),
            )
        }
        None => {
            let missing = || {
                CliError::Usage(
                    "pass --image or all of --height --width --bands --classes".into(),
                )
            };
            (
                args.height.ok_or_else(missing)?,
                args.width.ok_or_else(missing)?,
                args.bands.ok_or_else(missing)?,
                args.classes.ok_or_else(missing)?,
                "image".to_string(),
            )
        }
    };

    let arch = match args.arch {
        BackboneArg::Modified => ArchConfig {
            n_res_modules: args.n,
            ..ArchConfig::default()
        },
        BackboneArg::Original => ArchConfig {
            multiscale_encoder: true,
            n_res_modules: 2,
            ..ArchConfig::default()
        },
    };
    let spec = DomainSpec::new(id.clone(), bands, classes);
    let rows = flops_breakdown(&arch, &spec, height, width);
    let total: u64 = rows.iter().map(|(_, f)| f).sum();

    println!("{id}: {height}x{width}x{bands}, {classes} classes");
    println!("{:<18} {:>16}", "layer", "flops");
    let mut csv = String::from("layer,flops\n");
    for (name, f) in &rows {
        println!("{name:<18} {f:>16}");
        csv.push_str(&format!("{name},{f}\n"));
    }
    println!("{:<18} {:>16}", "total", total);
    println!("total: {:.3}e9 flops", total as f64 / 1e9);
    csv.push_str(&format!("total,{total}\n"));
    util::write_text(&args.common.out.join("flops.csv"), &csv, &mut manifest)?;
    manifest.write()?;
    Ok(())
}
