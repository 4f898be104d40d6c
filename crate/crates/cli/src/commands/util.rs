//! Shared plumbing for the training-related commands.

use std::path::{Path, PathBuf};

use hypercd_core::downstream::TrainRecord;
use hypercd_core::selfsup::IterRecord;
use hypercd_core::{EvalReport, HyperCube, RunAggregate};

use crate::manifest::RunManifest;
use crate::CliError;

pub fn load_cubes(paths: &[PathBuf], manifest: &mut RunManifest) -> Result<Vec<HyperCube>, CliError> {
    let mut cubes = Vec::with_capacity(paths.len());
    for path in paths {
        manifest.add_input(path)?;
        cubes.push(hypercd_core::hsdata::load_cube(path)?);
    }
    Ok(cubes)
}

pub fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    manifest.add_artifact(path)
}

/// Pretraining loss history as `iteration,lr,loss`.
pub fn pretrain_history_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("iteration,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.lr, r.loss));
    }
    out
}

/// Downstream history as `iteration,lr,lr_domain,loss`.
pub fn train_history_csv(history: &[TrainRecord]) -> String {
    let mut out = String::from("iteration,lr,lr_domain,loss\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.lr, r.lr_domain, r.loss
        ));
    }
    out
}

/// Per-run metrics as `run,regime,oa,aa,class1..classC`.
pub fn metrics_csv(regime: &str, reports: &[EvalReport]) -> String {
    let classes = reports.first().map(|r| r.per_class.len()).unwrap_or(0);
    let mut out = String::from("run,regime,oa,aa");
    for c in 1..=classes {
        out.push_str(&format!(",class{c}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{:.6},{:.6}", r.run_index, regime, r.oa, r.aa));
        for v in &r.per_class {
            if v.is_nan() {
                out.push_str(",nan");
            } else {
                out.push_str(&format!(",{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn aggregate_json(
    regime: &str,
    aggregate: &RunAggregate,
    seed: u64,
    config_echo: &std::collections::BTreeMap<String, String>,
) -> String {
    let runs: Vec<serde_json::Value> = aggregate
        .reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "run": r.run_index,
                "oa": r.oa,
                "aa": r.aa,
                "per_class": r.per_class
                    .iter()
                    .map(|v| if v.is_nan() { serde_json::Value::Null } else { serde_json::json!(v) })
                    .collect::<Vec<_>>(),
                "confusion": r.confusion,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "regime": regime,
        "seed": seed,
        "mean_oa": aggregate.mean_oa,
        "mean_aa": aggregate.mean_aa,
        "runs": runs,
        "config": config_echo,
    });
    serde_json::to_string_pretty(&doc).expect("aggregate serialization")
}
