//! Configuration resolution: command-line flags override a key-value config
//! file, which overrides built-in defaults.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Unknown keys are an error so typos don't silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use hypercd_core::downstream::DEFAULT_GRAD_CLIP;
use hypercd_core::{ArchConfig, ContrastiveConfig, ExperimentConfig, FinetuneConfig, SgdConfig};

use crate::CliError;

const KNOWN_KEYS: &[&str] = &[
    "p",
    "tau",
    "pretrain_iterations",
    "finetune_iterations",
    "base_lr",
    "momentum",
    "weight_decay",
    "gamma",
    "grad_clip",
    "channels",
    "n_res_modules",
    "multiscale",
    "input_scale",
    "train_per_domain",
    "runs",
    "augment",
    "lr_multiplier",
    "joint_batch_per_domain",
    "pretrain_milestones",
    "finetune_milestones",
];

/// Parsed contents of a config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "config {} line {}: unknown key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }

    fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }
}

/// Flag-level overrides a command collected from clap. `None` falls through
/// to the config file and then the defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub p: Option<usize>,
    pub tau: Option<f64>,
    pub pretrain_iterations: Option<usize>,
    pub finetune_iterations: Option<usize>,
    pub channels: Option<usize>,
    pub n_res_modules: Option<usize>,
    pub multiscale: Option<bool>,
    pub input_scale: Option<f64>,
    pub train_per_domain: Option<usize>,
    pub runs: Option<usize>,
}

/// Fully resolved experiment settings plus an echo of where they came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
}

impl Resolved {
    /// Milestones default to the 60% and 80% marks of the iteration count,
    /// which reproduces both published schedules (120/160 of 200 and
    /// 60/80 of 100).
    fn default_milestones(iterations: usize) -> Vec<usize> {
        if iterations == 0 {
            return Vec::new();
        }
        let a = iterations * 6 / 10;
        let b = iterations * 8 / 10;
        if a == 0 || a == b {
            Vec::new()
        } else {
            vec![a, b]
        }
    }

    pub fn resolve(file: &ConfigFile, flags: &Overrides) -> Result<Resolved, CliError> {
        let defaults = ExperimentConfig::default();
        fn pick<T: std::str::FromStr>(
            flag: Option<T>,
            file: &ConfigFile,
            key: &str,
            default: T,
        ) -> Result<T, CliError> {
            match flag {
                Some(v) => Ok(v),
                None => Ok(file.get::<T>(key)?.unwrap_or(default)),
            }
        }

        let p = pick(flags.p, file, "p", defaults.contrastive.p)?;
        let tau = pick(flags.tau, file, "tau", defaults.contrastive.tau)?;
        let pretrain_iterations = pick(
            flags.pretrain_iterations,
            file,
            "pretrain_iterations",
            defaults.contrastive.iterations,
        )?;
        let finetune_iterations = pick(
            flags.finetune_iterations,
            file,
            "finetune_iterations",
            defaults.finetune.iterations,
        )?;
        let channels = pick(flags.channels, file, "channels", defaults.arch.channels)?;
        let n_res_modules = pick(
            flags.n_res_modules,
            file,
            "n_res_modules",
            defaults.arch.n_res_modules,
        )?;
        let multiscale = pick(
            flags.multiscale,
            file,
            "multiscale",
            defaults.arch.multiscale_encoder,
        )?;
        let input_scale = pick(
            flags.input_scale,
            file,
            "input_scale",
            defaults.arch.input_scale,
        )?;
        let train_per_domain = pick(
            flags.train_per_domain,
            file,
            "train_per_domain",
            defaults.finetune.train_per_domain,
        )?;
        let runs = pick(flags.runs, file, "runs", defaults.finetune.runs)?;

        let base_lr = file.get::<f64>("base_lr")?.unwrap_or(0.03);
        let momentum = file.get::<f64>("momentum")?.unwrap_or(0.9);
        let weight_decay = file.get::<f64>("weight_decay")?.unwrap_or(0.005);
        let gamma = file.get::<f64>("gamma")?.unwrap_or(0.1);
        let grad_clip = file.get::<f64>("grad_clip")?.unwrap_or(DEFAULT_GRAD_CLIP);
        let augment = file.get::<bool>("augment")?.unwrap_or(true);
        let lr_multiplier = file.get::<f64>("lr_multiplier")?.unwrap_or(10.0);
        let joint_batch_per_domain = file
            .get::<usize>("joint_batch_per_domain")?
            .unwrap_or(defaults.joint_batch_per_domain);
        let pretrain_milestones = file
            .get_list("pretrain_milestones")?
            .unwrap_or_else(|| Self::default_milestones(pretrain_iterations));
        let finetune_milestones = file
            .get_list("finetune_milestones")?
            .unwrap_or_else(|| Self::default_milestones(finetune_iterations));

        let clip = if grad_clip > 0.0 {
            Some(grad_clip)
        } else {
            None
        };
        let experiment = ExperimentConfig {
            arch: ArchConfig {
                channels,
                n_res_modules,
                multiscale_encoder: multiscale,
                input_scale,
                ..ArchConfig::default()
            },
            contrastive: ContrastiveConfig {
                p,
                tau,
                iterations: pretrain_iterations,
                augment,
            },
            pretrain_sgd: SgdConfig {
                base_lr,
                momentum,
                weight_decay,
                gamma,
                milestones: pretrain_milestones,
                max_grad_norm: clip,
            },
            finetune: FinetuneConfig {
                iterations: finetune_iterations,
                sgd: SgdConfig {
                    base_lr,
                    momentum,
                    weight_decay,
                    gamma,
                    milestones: finetune_milestones,
                    max_grad_norm: clip,
                },
                lr_multiplier_domain_specific: lr_multiplier,
                augment,
                train_per_domain,
                runs,
            },
            joint_batch_per_domain,
        };
        experiment.arch.validate().map_err(CliError::Core)?;
        experiment.pretrain_sgd.validate().map_err(CliError::Core)?;
        experiment.contrastive.validate().map_err(CliError::Core)?;
        Ok(Resolved { experiment })
    }

    /// Flat key-value echo for the run manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let e = &self.experiment;
        let mut m = BTreeMap::new();
        m.insert("p".into(), e.contrastive.p.to_string());
        m.insert("tau".into(), e.contrastive.tau.to_string());
        m.insert(
            "pretrain_iterations".into(),
            e.contrastive.iterations.to_string(),
        );
        m.insert(
            "finetune_iterations".into(),
            e.finetune.iterations.to_string(),
        );
        m.insert("base_lr".into(), e.pretrain_sgd.base_lr.to_string());
        m.insert("momentum".into(), e.pretrain_sgd.momentum.to_string());
        m.insert(
            "weight_decay".into(),
            e.pretrain_sgd.weight_decay.to_string(),
        );
        m.insert("gamma".into(), e.pretrain_sgd.gamma.to_string());
        m.insert(
            "grad_clip".into(),
            e.pretrain_sgd
                .max_grad_norm
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        m.insert(
            "pretrain_milestones".into(),
            format!("{:?}", e.pretrain_sgd.milestones),
        );
        m.insert(
            "finetune_milestones".into(),
            format!("{:?}", e.finetune.sgd.milestones),
        );
        m.insert("channels".into(), e.arch.channels.to_string());
        m.insert("n_res_modules".into(), e.arch.n_res_modules.to_string());
        m.insert(
            "multiscale".into(),
            e.arch.multiscale_encoder.to_string(),
        );
        m.insert("input_scale".into(), e.arch.input_scale.to_string());
        m.insert(
            "train_per_domain".into(),
            e.finetune.train_per_domain.to_string(),
        );
        m.insert("runs".into(), e.finetune.runs.to_string());
        m.insert("augment".into(), e.finetune.augment.to_string());
        m.insert(
            "lr_multiplier".into(),
            e.finetune.lr_multiplier_domain_specific.to_string(),
        );
        m.insert(
            "joint_batch_per_domain".into(),
            e.joint_batch_per_domain.to_string(),
        );
        m
    }
}
