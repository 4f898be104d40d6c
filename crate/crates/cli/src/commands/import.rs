//! `hypercd import`: CSV fixture to HSC1 cube.

use std::path::PathBuf;

use clap::Args;
use hypercd_core::hsdata::{import_csv, save_cube};

use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs};

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// CSV file with a header line and one `row,col,label,v1..vB` pixel per line.
    #[arg(long)]
    pub csv: PathBuf,
    /// Domain id of the resulting cube (defaults to the CSV file stem).
    #[arg(long = "domain-id")]
    pub domain_id: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: ImportArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.common.out)?;
    let domain_id = args.domain_id.clone().unwrap_or_else(|| {
        args.csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "imported".into())
    });
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        1,
        std::collections::BTreeMap::new(),
    );
    manifest.add_input(&args.csv)?;
    let cube = import_csv(&args.csv, &domain_id)?;
    let path = args.common.out.join(format!("{domain_id}.hsc"));
    save_cube(&cube, &path)?;
    manifest.add_artifact(&path)?;
    println!(
        "imported {} -> {} ({}x{}x{}, {} classes)",
        args.csv.display(),
        path.display(),
        cube.height,
        cube.width,
        cube.bands,
        cube.num_classes
    );
    manifest.write()?;
    Ok(())
}
