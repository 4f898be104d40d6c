//! `hypercd synth`: write synthetic labeled domains as HSC1 cubes.

use clap::Args;
use hypercd_core::hsdata::{save_cube, synth_domains, SynthConfig};

use crate::manifest::{ensure_out_dir, RunManifest};
use crate::{CliError, CommonArgs};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of domains to generate.
    #[arg(long)]
    pub domains: usize,
    /// Comma-separated band count per domain.
    #[arg(long, value_delimiter = ',')]
    pub bands: Vec<usize>,
    /// Comma-separated class count per domain.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<u16>,
    /// Square image side.
    #[arg(long)]
    pub size: usize,
    /// Per-value noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Signature separation in units of the noise standard deviation.
    #[arg(long = "margin-factor", default_value_t = 5.0)]
    pub margin_factor: f64,
    /// File-name prefix for the generated cubes.
    #[arg(long, default_value = "synth")]
    pub prefix: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: SynthArgs) -> Result<(), CliError> {
    if args.bands.len() != args.domains || args.classes.len() != args.domains {
        return Err(CliError::Usage(format!(
            "--bands ({}) and --classes ({}) must list one value per domain ({})",
            args.bands.len(),
            args.classes.len(),
            args.domains
        )));
    }
    ensure_out_dir(&args.common.out)?;
    let cfg = SynthConfig {
        num_domains: args.domains,
        bands: args.bands.clone(),
        classes: args.classes.clone(),
        size: args.size,
        seed: args.common.seed,
        noise_sigma: args.noise,
        margin_factor: args.margin_factor,
        id_prefix: args.prefix.clone(),
    };
    let mut config = std::collections::BTreeMap::new();
    config.insert("size".into(), args.size.to_string());
    config.insert("noise".into(), args.noise.to_string());
    config.insert("margin_factor".into(), args.margin_factor.to_string());
    config.insert("bands".into(), format!("{:?}", args.bands));
    config.insert("classes".into(), format!("{:?}", args.classes));
    let mut manifest = RunManifest::new(
        &args.common.out,
        args.common.seed,
        args.common.deterministic,
        1,
        config,
    );

    let cubes = synth_domains(&cfg)?;
    for cube in &cubes {
        let path = args.common.out.join(format!("{}.hsc", cube.domain_id));
        save_cube(cube, &path)?;
        manifest.add_artifact(&path)?;
        println!(
            "wrote {} ({}x{}x{}, {} classes)",
            path.display(),
            cube.height,
            cube.width,
            cube.bands,
            cube.num_classes
        );
    }
    manifest.write()?;
    Ok(())
}
