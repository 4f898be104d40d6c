//! Downstream transfer, finetuning, baseline regimes, and evaluation.
//!
//! The four training regimes mirror the comparison setup: `scratch` trains
//! the single-domain model from random init, `cd-scratch` trains the full
//! cross-domain model jointly on every image, `sup-pretrain` runs supervised
//! joint training on the source domains before transfer, and `self-sup`
//! uses contrastive pretraining before transfer. Transfer copies the shared
//! trunk bit-exactly and re-initializes the domain-specific layers, which
//! then train at a multiple of the shared learning rate.

use rand::seq::index::sample as index_sample;

use crate::cdnet::{
    backward, forward_logits, init_encoder, init_head, init_params, CdcnnParams, DomainSpec,
};
use crate::error::{Error, Result};
use crate::hsdata::{dihedral_augment, extract_patch, make_split, normalize_cube, HyperCube,
    SplitSpec};
use crate::rng::{rng_from, subseed};
use crate::selfsup::{pretrain, ContrastiveConfig, IterRecord};
use crate::tensorops::{
    lr_at, sgd_step, softmax_xent_backward, softmax_xent_forward, ParamTensor, Scalar, SgdConfig,
    Tensor4,
};

/// Downstream training hyperparameters.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub sgd: SgdConfig,
    /// Learning-rate multiplier for domain-specific parameters during
    /// finetuning (encoders and heads trained from scratch).
    pub lr_multiplier_domain_specific: f64,
    /// Eight-fold dihedral augmentation of every training sample.
    pub augment: bool,
    pub train_per_domain: usize,
    pub runs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 100,
            sgd: SgdConfig {
                max_grad_norm: Some(DEFAULT_GRAD_CLIP),
                ..SgdConfig::finetune_default()
            },
            lr_multiplier_domain_specific: 10.0,
            augment: true,
            train_per_domain: 200,
            runs: 5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.lr_multiplier_domain_specific > 0.0) {
            return Err(Error::InvalidArg(
                "FinetuneConfig: lr multiplier must be positive".into(),
            ));
        }
        if self.sgd.milestones.iter().any(|&m| m >= self.iterations) && self.iterations > 0 {
            return Err(Error::InvalidArg(format!(
                "FinetuneConfig: milestones {:?} outside [0, {})",
                self.sgd.milestones, self.iterations
            )));
        }
        Ok(())
    }
}

/// Everything one experiment needs: architecture, both training phases,
/// and the balanced-batch cap for joint training.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub arch: crate::cdnet::ArchConfig,
    pub contrastive: ContrastiveConfig,
    /// Schedule of the pretraining phase (self-supervised or supervised).
    pub pretrain_sgd: SgdConfig,
    pub finetune: FinetuneConfig,
    /// Per-iteration per-domain sample cap for joint training; pools larger
    /// than this are subsampled so每 domain contributes equally.
    pub joint_batch_per_domain: usize,
}

/// Default gradient clip for the training pipelines. Full-batch gradients
/// through fresh 1e-3-scale layers can be orders of magnitude larger than
/// the weights; bounding the global norm keeps the prescribed step sizes
/// usable without touching the schedule.
pub const DEFAULT_GRAD_CLIP: f64 = 0.1;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: crate::cdnet::ArchConfig::default(),
            contrastive: ContrastiveConfig::default(),
            pretrain_sgd: SgdConfig {
                max_grad_norm: Some(DEFAULT_GRAD_CLIP),
                ..SgdConfig::default()
            },
            finetune: FinetuneConfig::default(),
            joint_batch_per_domain: 200,
        }
    }
}

/// The four training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Scratch,
    CdScratch,
    SupPretrain,
    SelfSup,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Scratch => "scratch",
            Regime::CdScratch => "cd-scratch",
            Regime::SupPretrain => "sup-pretrain",
            Regime::SelfSup => "self-sup",
        };
        f.write_str(s)
    }
}

/// One row of a supervised training history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Effective rate of the shared group.
    pub lr: f64,
    /// Effective rate of the domain-specific group.
    pub lr_domain: f64,
    pub loss: f64,
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

fn reset_state<S: Scalar>(pt: &mut ParamTensor<S>) {
    for g in &mut pt.grad {
        *g = S::zero();
    }
    for m in &mut pt.momentum {
        *m = S::zero();
    }
}

/// Build a single-domain model for `target` from a pretrained one: the
/// shared trunk is copied bit-exactly (momentum cleared), while the encoder
/// and head are freshly initialized for the target's bands and classes.
pub fn transfer<S: Scalar>(
    pretrained: &CdcnnParams<S>,
    target: &DomainSpec,
    seed: u64,
) -> Result<CdcnnParams<S>> {
    if target.num_classes == 0 {
        return Err(Error::InvalidArg(format!(
            "transfer target `{}` has no classes",
            target.domain_id
        )));
    }
    let arch = pretrained.arch.clone();
    arch.validate()?;
    let mut trunk = pretrained.trunk.clone();
    for m in &mut trunk.res_modules {
        reset_state(&mut m.conv1.weight);
        reset_state(&mut m.conv1.bias);
        reset_state(&mut m.conv2.weight);
        reset_state(&mut m.conv2.bias);
    }
    reset_state(&mut trunk.c3.weight);
    reset_state(&mut trunk.c3.bias);
    reset_state(&mut trunk.c4.weight);
    reset_state(&mut trunk.c4.bias);

    let mut rng = rng_from(seed, "transfer", 0);
    let mut encoders = std::collections::BTreeMap::new();
    encoders.insert(target.domain_id.clone(), init_encoder(&arch, target, &mut rng));
    let mut heads = std::collections::BTreeMap::new();
    heads.insert(target.domain_id.clone(), init_head(&arch, target, &mut rng));

    Ok(CdcnnParams {
        arch,
        encoders,
        trunk,
        heads,
    })
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

/// Center patches (optionally eight-fold augmented) for the given labeled
/// pixel indices, as a network input batch plus 0-based labels.
fn supervised_batch<S: Scalar>(
    cube: &HyperCube,
    indices: &[usize],
    patch_side: usize,
    augment: bool,
    input_scale: f64,
) -> Result<(Tensor4<S>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::InsufficientData(
            "supervised batch has no samples".into(),
        ));
    }
    let reps = if augment { 8 } else { 1 };
    let bands = cube.bands;
    let sample_len = bands * patch_side * patch_side;
    let mut data = Vec::with_capacity(indices.len() * reps * sample_len);
    let mut labels = Vec::with_capacity(indices.len() * reps);
    for &flat in indices {
        let (r, c) = cube.flat_to_rc(flat);
        let label = cube.label_at(r, c);
        if label == 0 {
            return Err(Error::InvalidArg(format!(
                "pixel {flat} of `{}` is unlabeled",
                cube.domain_id
            )));
        }
        let patch = extract_patch(cube, r, c, patch_side)?;
        for k in 0..reps {
            let p = if k == 0 {
                patch.clone()
            } else {
                dihedral_augment(&patch, k)?
            };
            data.extend(
                p.channel_major()
                    .into_iter()
                    .map(|v| S::from_f64(v * input_scale)),
            );
            labels.push(label as usize - 1);
        }
    }
    let n = labels.len();
    Ok((
        Tensor4::from_vec(n, bands, patch_side, patch_side, data)?,
        labels,
    ))
}

/// Full-batch supervised training of the `cube.domain_id` model in `params`.
///
/// Every iteration runs one optimization step over the whole (augmented)
/// training set: forward logits, softmax cross-entropy, exact backward, SGD
/// honoring the learning-rate groups. The input cube is z-scored per band
/// internally.
pub fn train_supervised<S: Scalar>(
    params: &mut CdcnnParams<S>,
    cube: &HyperCube,
    train_idx: &[usize],
    cfg: &FinetuneConfig,
    domain_lr_multiplier: f64,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let normed = normalize_cube(cube);
    let side = params.arch.patch_side();
    let (batch, labels) =
        supervised_batch::<S>(&normed, train_idx, side, cfg.augment, params.arch.input_scale)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        params.zero_grads();
        let (logits, cache) = forward_logits(params, &cube.domain_id, &batch)?;
        let (loss, xc) = match softmax_xent_forward(&logits, &labels) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::NumericAbort {
                    iteration: iter,
                    what: "cross-entropy loss".into(),
                })
            }
            Err(e) => return Err(e),
        };
        let dlogits = softmax_xent_backward(&xc, &labels)?;
        backward(params, &cache, dlogits.data())?;
        sgd_step(params.params_mut(), &cfg.sgd, iter, domain_lr_multiplier)?;
        let lr = lr_at(iter, &cfg.sgd);
        history.push(TrainRecord {
            iteration: iter,
            lr,
            lr_domain: lr * domain_lr_multiplier,
            loss: loss.to_f64(),
        });
    }
    Ok(history)
}

/// Joint supervised training over several domains with a shared trunk.
///
/// Per iteration each domain contributes an equal number of samples (its
/// whole pool, or a seeded random subset when the pool exceeds the balanced
/// batch size); per-domain losses are averaged so every domain weighs the
/// same. Returns the history and, per iteration, the L2 norm of each
/// domain's contribution to the trunk gradient.
fn train_joint<S: Scalar>(
    params: &mut CdcnnParams<S>,
    pools: &[(&HyperCube, Vec<usize>)],
    sgd: &SgdConfig,
    iterations: usize,
    batch_cap: usize,
    augment: bool,
    seed: u64,
) -> Result<(Vec<TrainRecord>, Vec<Vec<f64>>)> {
    if pools.is_empty() {
        return Err(Error::InsufficientData("joint training needs domains".into()));
    }
    let normed: Vec<HyperCube> = pools.iter().map(|(c, _)| normalize_cube(c)).collect();
    let side = params.arch.patch_side();
    let min_pool = pools.iter().map(|(_, idx)| idx.len()).min().unwrap_or(0);
    if min_pool == 0 {
        return Err(Error::InsufficientData(
            "a joint-training domain has no labeled samples".into(),
        ));
    }
    let per_domain = batch_cap.min(min_pool);
    let num_domains = pools.len();
    let inv_d = S::from_f64(1.0 / num_domains as f64);

    let mut history = Vec::with_capacity(iterations);
    let mut grad_norms = Vec::with_capacity(iterations);
    for iter in 0..iterations {
        params.zero_grads();
        let mut loss_total = 0.0f64;
        let mut domain_norms = Vec::with_capacity(num_domains);
        let mut trunk_prev: Vec<Vec<S>> = params
            .trunk_params()
            .iter()
            .map(|p| p.grad.clone())
            .collect();
        for (d, (cube, pool)) in pools.iter().enumerate() {
            let subset: Vec<usize> = if pool.len() > per_domain {
                let mut rng = rng_from(
                    seed,
                    "joint.batch",
                    (iter * num_domains + d) as u64,
                );
                let mut picks: Vec<usize> = index_sample(&mut rng, pool.len(), per_domain)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                picks.sort_unstable();
                picks
            } else {
                pool.clone()
            };
            let (batch, labels) = supervised_batch::<S>(
                &normed[d],
                &subset,
                side,
                augment,
                params.arch.input_scale,
            )?;
            let (logits, cache) = forward_logits(params, &cube.domain_id, &batch)?;
            let (loss, xc) = match softmax_xent_forward(&logits, &labels) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NumericAbort {
                        iteration: iter,
                        what: format!("cross-entropy loss of `{}`", cube.domain_id),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut dlogits = softmax_xent_backward(&xc, &labels)?;
            for g in dlogits.data_mut() {
                *g *= inv_d;
            }
            backward(params, &cache, dlogits.data())?;
            loss_total += loss.to_f64() / num_domains as f64;

            // per-domain trunk contribution
            let mut sq = 0.0f64;
            for (p, prev) in params.trunk_params().iter().zip(trunk_prev.iter()) {
                for (g, pg) in p.grad.iter().zip(prev.iter()) {
                    let d = (*g - *pg).to_f64();
                    sq += d * d;
                }
            }
            domain_norms.push(sq.sqrt());
            trunk_prev = params
                .trunk_params()
                .iter()
                .map(|p| p.grad.clone())
                .collect();
        }
        sgd_step(params.params_mut(), sgd, iter, 1.0)?;
        let lr = lr_at(iter, sgd);
        history.push(TrainRecord {
            iteration: iter,
            lr,
            lr_domain: lr,
            loss: loss_total,
        });
        grad_norms.push(domain_norms);
    }
    Ok((history, grad_norms))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Confusion matrix plus overall / average accuracy for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// confusion[true][predicted], classes 1..=C mapped to 0-based rows.
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    /// Per-class recall; NaN for classes absent from the test set.
    pub per_class: Vec<f64>,
    pub run_index: usize,
}

impl EvalReport {
    /// Build a report from raw (predicted, true) 1-based class pairs.
    /// Classes with no test samples are excluded from the AA mean.
    pub fn from_pairs(pairs: &[(u16, u16)], num_classes: u16, run_index: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("evaluation has no samples".into()));
        }
        let c = num_classes as usize;
        let mut confusion = vec![vec![0u64; c]; c];
        for &(pred, truth) in pairs {
            if pred == 0 || pred > num_classes || truth == 0 || truth > num_classes {
                return Err(Error::InvalidArg(format!(
                    "class pair ({pred},{truth}) outside 1..={num_classes}"
                )));
            }
            confusion[truth as usize - 1][pred as usize - 1] += 1;
        }
        let total: u64 = pairs.len() as u64;
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let oa = trace as f64 / total as f64;
        let per_class: Vec<f64> = (0..c)
            .map(|i| {
                let row: u64 = confusion[i].iter().sum();
                if row == 0 {
                    f64::NAN
                } else {
                    confusion[i][i] as f64 / row as f64
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        Ok(EvalReport {
            confusion,
            oa,
            aa,
            per_class,
            run_index,
        })
    }
}

/// Classify the test pixels of `cube` and report the confusion matrix, OA,
/// AA, and per-class recalls. Argmax ties break to the lowest class index.
pub fn evaluate<S: Scalar>(
    params: &CdcnnParams<S>,
    cube: &HyperCube,
    test_idx: &[usize],
    run_index: usize,
) -> Result<EvalReport> {
    let normed = normalize_cube(cube);
    let side = params.arch.patch_side();
    let mut pairs = Vec::with_capacity(test_idx.len());
    for chunk in test_idx.chunks(256) {
        let (batch, labels) =
            supervised_batch::<S>(&normed, chunk, side, false, params.arch.input_scale)?;
        let (logits, _) = forward_logits(params, &cube.domain_id, &batch)?;
        let (n, c, _, _) = logits.dims();
        for i in 0..n {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            pairs.push((best as u16 + 1, labels[i] as u16 + 1));
        }
    }
    EvalReport::from_pairs(&pairs, cube.num_classes, run_index)
}

/// Mean OA/AA over several runs plus the per-run reports.
#[derive(Debug, Clone)]
pub struct RunAggregate {
    pub mean_oa: f64,
    pub mean_aa: f64,
    pub reports: Vec<EvalReport>,
}

impl RunAggregate {
    pub fn from_reports(reports: Vec<EvalReport>) -> Self {
        let n = reports.len().max(1) as f64;
        let mean_oa = reports.iter().map(|r| r.oa).sum::<f64>() / n;
        let mean_aa = reports.iter().map(|r| r.aa).sum::<f64>() / n;
        RunAggregate {
            mean_oa,
            mean_aa,
            reports,
        }
    }
}

// ---------------------------------------------------------------------------
// Regimes and experiments
// ---------------------------------------------------------------------------

/// Pretraining output reused across the downstream runs of one experiment.
pub struct Pretrained<S> {
    pub params: CdcnnParams<S>,
    pub history: Vec<IterRecord>,
}

/// Run the pretraining phase a regime needs, if any. Self-supervised
/// pretraining ignores labels; supervised pretraining trains jointly on all
/// labeled pixels of the source domains under the same schedule.
pub fn prepare_pretrained<S: Scalar>(
    regime: Regime,
    sources: &[HyperCube],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Option<Pretrained<S>>> {
    match regime {
        Regime::Scratch | Regime::CdScratch => Ok(None),
        Regime::SelfSup => {
            let (params, history) = pretrain::<S>(
                sources,
                &cfg.arch,
                &cfg.contrastive,
                &cfg.pretrain_sgd,
                seed,
            )?;
            Ok(Some(Pretrained { params, history }))
        }
        Regime::SupPretrain => {
            let specs: Vec<DomainSpec> = sources.iter().map(DomainSpec::from_cube).collect();
            if specs.iter().any(|s| s.num_classes == 0) {
                return Err(Error::InsufficientData(
                    "supervised pretraining needs labeled source domains".into(),
                ));
            }
            let mut params: CdcnnParams<S> =
                init_params(&cfg.arch, &specs, subseed(seed, "sup.init", 0))?;
            let pools: Vec<(&HyperCube, Vec<usize>)> = sources
                .iter()
                .map(|c| (c, c.labeled_indices()))
                .collect();
            let (records, _) = train_joint(
                &mut params,
                &pools,
                &cfg.pretrain_sgd,
                cfg.contrastive.iterations,
                cfg.joint_batch_per_domain,
                cfg.finetune.augment,
                subseed(seed, "sup.pretrain", 0),
            )?;
            let history = records
                .into_iter()
                .map(|r| IterRecord {
                    iteration: r.iteration,
                    lr: r.lr,
                    loss: r.loss,
                })
                .collect();
            Ok(Some(Pretrained { params, history }))
        }
    }
}

/// The model, history, and joint-training instrumentation of one run.
pub struct TrainedRun<S> {
    pub params: CdcnnParams<S>,
    pub history: Vec<TrainRecord>,
    /// For cd-scratch: per iteration, each domain's trunk-gradient norm.
    pub joint_grad_norms: Vec<Vec<f64>>,
}

/// Train one downstream model under `regime` for the given split.
pub fn train_regime<S: Scalar>(
    regime: Regime,
    target: &HyperCube,
    sources: &[HyperCube],
    cfg: &ExperimentConfig,
    seed: u64,
    run_index: u32,
    train_idx: &[usize],
    pretrained: Option<&CdcnnParams<S>>,
) -> Result<TrainedRun<S>> {
    let target_spec = DomainSpec::from_cube(target);
    if target_spec.num_classes == 0 {
        return Err(Error::InsufficientData(format!(
            "target `{}` has no labels",
            target.domain_id
        )));
    }
    match regime {
        Regime::Scratch => {
            let mut params: CdcnnParams<S> = init_params(
                &cfg.arch,
                std::slice::from_ref(&target_spec),
                subseed(seed, "init", u64::from(run_index)),
            )?;
            let history = train_supervised(&mut params, target, train_idx, &cfg.finetune, 1.0)?;
            Ok(TrainedRun {
                params,
                history,
                joint_grad_norms: Vec::new(),
            })
        }
        Regime::CdScratch => {
            let mut specs: Vec<DomainSpec> =
                sources.iter().map(DomainSpec::from_cube).collect();
            specs.push(target_spec);
            if specs.iter().any(|s| s.num_classes == 0) {
                return Err(Error::InsufficientData(
                    "cd-scratch needs labels on every domain".into(),
                ));
            }
            let mut params: CdcnnParams<S> =
                init_params(&cfg.arch, &specs, subseed(seed, "init", u64::from(run_index)))?;
            let mut pools: Vec<(&HyperCube, Vec<usize>)> = sources
                .iter()
                .map(|c| (c, c.labeled_indices()))
                .collect();
            pools.push((target, train_idx.to_vec()));
            let (history, joint_grad_norms) = train_joint(
                &mut params,
                &pools,
                &cfg.finetune.sgd,
                cfg.finetune.iterations,
                cfg.joint_batch_per_domain,
                cfg.finetune.augment,
                subseed(seed, "cdscratch", u64::from(run_index)),
            )?;
            Ok(TrainedRun {
                params,
                history,
                joint_grad_norms,
            })
        }
        Regime::SupPretrain | Regime::SelfSup => {
            let base = pretrained.ok_or_else(|| {
                Error::InvalidArg(format!("regime {regime} needs a pretrained model"))
            })?;
            let mut params = transfer(base, &target_spec, subseed(seed, "transfer", u64::from(run_index)))?;
            let history = train_supervised(
                &mut params,
                target,
                train_idx,
                &cfg.finetune,
                cfg.finetune.lr_multiplier_domain_specific,
            )?;
            Ok(TrainedRun {
                params,
                history,
                joint_grad_norms: Vec::new(),
            })
        }
    }
}

/// Result of the multi-run experiment for one regime.
pub struct ExperimentResult<S> {
    pub regime: Regime,
    pub aggregate: RunAggregate,
    pub histories: Vec<Vec<TrainRecord>>,
    pub pretrain_history: Option<Vec<IterRecord>>,
    pub models: Vec<CdcnnParams<S>>,
    pub joint_grad_norms: Vec<Vec<Vec<f64>>>,
}

/// Train and evaluate `runs` models with fresh splits per run index, then
/// aggregate. Pretraining (when the regime has it) happens once and is
/// shared by all runs; a caller-provided checkpoint takes its place. With
/// `threads > 1` the independent runs execute in parallel, which leaves all
/// outputs bit-identical to the sequential order.
pub fn run_experiment<S: Scalar>(
    regime: Regime,
    target: &HyperCube,
    sources: &[HyperCube],
    cfg: &ExperimentConfig,
    seed: u64,
    external_pretrained: Option<CdcnnParams<S>>,
    threads: usize,
) -> Result<ExperimentResult<S>> {
    cfg.finetune.validate()?;
    let pretrained = match external_pretrained {
        Some(params) => Some(Pretrained {
            params,
            history: Vec::new(),
        }),
        None => prepare_pretrained(regime, sources, cfg, seed)?,
    };

    let runs = cfg.finetune.runs.max(1);
    let run_one = |run: u32| -> Result<(TrainedRun<S>, EvalReport)> {
        let spec = SplitSpec {
            seed,
            train_per_domain: cfg.finetune.train_per_domain,
            run_index: run,
        };
        let (train_idx, test_idx) = make_split(target, &spec, false)?;
        let trained = train_regime(
            regime,
            target,
            sources,
            cfg,
            seed,
            run,
            &train_idx,
            pretrained.as_ref().map(|p| &p.params),
        )?;
        let report = evaluate(&trained.params, target, &test_idx, run as usize)?;
        Ok((trained, report))
    };

    let workers = threads.max(1).min(runs);
    let mut outcomes: Vec<Option<Result<(TrainedRun<S>, EvalReport)>>> =
        (0..runs).map(|_| None).collect();
    if workers <= 1 {
        for (run, slot) in outcomes.iter_mut().enumerate() {
            *slot = Some(run_one(run as u32));
        }
    } else {
        let slots = std::sync::Mutex::new(&mut outcomes);
        std::thread::scope(|scope| {
            for w in 0..workers {
                let slots = &slots;
                let run_one = &run_one;
                scope.spawn(move || {
                    for run in (w..runs).step_by(workers) {
                        let out = run_one(run as u32);
                        let mut guard = slots.lock().expect("slot lock");
                        guard[run] = Some(out);
                    }
                });
            }
        });
    }

    let mut models = Vec::with_capacity(runs);
    let mut histories = Vec::with_capacity(runs);
    let mut reports = Vec::with_capacity(runs);
    let mut joint = Vec::with_capacity(runs);
    for slot in outcomes {
        let (trained, report) = slot.expect("run executed")?;
        models.push(trained.params);
        histories.push(trained.history);
        joint.push(trained.joint_grad_norms);
        reports.push(report);
    }

    Ok(ExperimentResult {
        regime,
        aggregate: RunAggregate::from_reports(reports),
        histories,
        pretrain_history: pretrained.and_then(|p| {
            if p.history.is_empty() {
                None
            } else {
                Some(p.history)
            }
        }),
        models,
        joint_grad_norms: joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdnet::ArchConfig;
    use crate::hsdata::{synth_domains, SynthConfig};

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            arch: ArchConfig {
                channels: 6,
                n_res_modules: 1,
                ..ArchConfig::default()
            },
            contrastive: ContrastiveConfig {
                p: 2,
                iterations: 6,
                ..ContrastiveConfig::default()
            },
            pretrain_sgd: SgdConfig {
                milestones: vec![3, 5],
                ..SgdConfig::default()
            },
            finetune: FinetuneConfig {
                iterations: 4,
                sgd: SgdConfig {
                    milestones: vec![2, 3],
                    ..SgdConfig::default()
                },
                train_per_domain: 6,
                runs: 2,
                ..FinetuneConfig::default()
            },
            joint_batch_per_domain: 8,
        }
    }

    fn tiny_domains() -> Vec<HyperCube> {
        let mut cfg = SynthConfig::new(vec![3, 4, 5], vec![2, 2, 2], 12, 17);
        cfg.noise_sigma = 0.05;
        synth_domains(&cfg).unwrap()
    }

    fn tiny_target() -> HyperCube {
        let mut cfg = SynthConfig::new(vec![6], vec![3], 12, 41);
        cfg.noise_sigma = 0.05;
        cfg.id_prefix = "target".into();
        synth_domains(&cfg).unwrap().pop().unwrap()
    }

    #[test]
    fn transfer_copies_trunk_bit_exactly() {
        let sources = tiny_domains();
        let cfg = tiny_cfg();
        let (pre, _) = pretrain::<f32>(
            &sources,
            &cfg.arch,
            &cfg.contrastive,
            &cfg.pretrain_sgd,
            5,
        )
        .unwrap();
        let spec = DomainSpec::new("ip", 200, 16);
        let t = transfer(&pre, &spec, 1).unwrap();
        for (a, b) in pre.trunk_params().iter().zip(t.trunk_params().iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
            assert!(b.momentum.iter().all(|&m| m == 0.0));
        }
        match &t.encoders["ip"] {
            crate::cdnet::EncoderParams::Single(c) => {
                assert_eq!(c.weight.shape, vec![6, 200, 5, 5])
            }
            _ => panic!("expected single encoder"),
        }
        // different seeds share the trunk but differ in encoder/head
        let t2 = transfer(&pre, &spec, 2).unwrap();
        for (a, b) in t.trunk_params().iter().zip(t2.trunk_params().iter()) {
            assert_eq!(a.value, b.value);
        }
        let enc_t = match &t.encoders["ip"] {
            crate::cdnet::EncoderParams::Single(c) => c.weight.value.clone(),
            _ => unreachable!(),
        };
        let enc_t2 = match &t2.encoders["ip"] {
            crate::cdnet::EncoderParams::Single(c) => c.weight.value.clone(),
            _ => unreachable!(),
        };
        assert_ne!(enc_t, enc_t2);
    }

    #[test]
    fn eval_report_hand_examples() {
        // confusion [[9,1],[4,6]] -> OA 0.75, AA 0.75
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat((1u16, 1u16)).take(9));
        pairs.push((2, 1));
        pairs.extend(std::iter::repeat((1, 2)).take(4));
        pairs.extend(std::iter::repeat((2, 2)).take(6));
        let r = EvalReport::from_pairs(&pairs, 2, 0).unwrap();
        assert_eq!(r.confusion, vec![vec![9, 1], vec![4, 6]]);
        assert!((r.oa - 0.75).abs() < 1e-12);
        assert!((r.aa - 0.75).abs() < 1e-12);

        // confusion [[5,0],[5,10]] -> OA 0.75, AA (1.0 + 0.6667)/2
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat((1u16, 1u16)).take(5));
        pairs.extend(std::iter::repeat((1, 2)).take(5));
        pairs.extend(std::iter::repeat((2, 2)).take(10));
        let r = EvalReport::from_pairs(&pairs, 2, 0).unwrap();
        assert!((r.oa - 0.75).abs() < 1e-12);
        assert!((r.aa - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn eval_report_excludes_absent_classes_from_aa() {
        let pairs = vec![(1u16, 1u16), (1, 1), (2, 1)];
        let r = EvalReport::from_pairs(&pairs, 3, 0).unwrap();
        assert!(r.per_class[0] > 0.0);
        assert!(r.per_class[1].is_nan());
        assert!(r.per_class[2].is_nan());
        assert!((r.aa - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_report() {
        let pairs: Vec<(u16, u16)> = (1..=3).flat_map(|c| vec![(c, c); 4]).collect();
        let r = EvalReport::from_pairs(&pairs, 3, 0).unwrap();
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.aa, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(r.confusion[i][j], 0);
                }
            }
        }
    }

    #[test]
    fn augmentation_multiplies_sample_count_by_eight() {
        let target = tiny_target();
        let normed = normalize_cube(&target);
        let idx = target.labeled_indices()[..5].to_vec();
        let (batch8, labels8) = supervised_batch::<f32>(&normed, &idx, 5, true, 1.0).unwrap();
        assert_eq!(batch8.batch(), 40);
        assert_eq!(labels8.len(), 40);
        let (batch1, _) = supervised_batch::<f32>(&normed, &idx, 5, false, 1.0).unwrap();
        assert_eq!(batch1.batch(), 5);
    }

    #[test]
    fn zero_iterations_leaves_params_unchanged() {
        let target = tiny_target();
        let spec = DomainSpec::from_cube(&target);
        let mut cfg = tiny_cfg();
        cfg.finetune.iterations = 0;
        cfg.finetune.sgd.milestones = vec![];
        let mut params: CdcnnParams<f32> =
            init_params(&cfg.arch, std::slice::from_ref(&spec), 3).unwrap();
        let before: Vec<Vec<f32>> = params.params().iter().map(|p| p.value.clone()).collect();
        let idx = target.labeled_indices()[..4].to_vec();
        let history =
            train_supervised(&mut params, &target, &idx, &cfg.finetune, 1.0).unwrap();
        assert!(history.is_empty());
        let after: Vec<Vec<f32>> = params.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn initial_loss_is_near_ln_c() {
        let target = tiny_target(); // 3 classes
        let spec = DomainSpec::from_cube(&target);
        let mut cfg = tiny_cfg();
        cfg.finetune.iterations = 1;
        cfg.finetune.sgd.milestones = vec![];
        let mut params: CdcnnParams<f64> =
            init_params(&cfg.arch, std::slice::from_ref(&spec), 3).unwrap();
        let idx = target.labeled_indices()[..6].to_vec();
        let history =
            train_supervised(&mut params, &target, &idx, &cfg.finetune, 1.0).unwrap();
        // near-zero logits at init: loss within a hair of ln(3)
        assert!((history[0].loss - 3.0f64.ln()).abs() < 1e-3, "{}", history[0].loss);
    }

    #[test]
    fn scratch_regime_equals_manual_train_supervised() {
        let target = tiny_target();
        let cfg = tiny_cfg();
        let seed = 99;
        let spec = SplitSpec {
            seed,
            train_per_domain: cfg.finetune.train_per_domain,
            run_index: 0,
        };
        let (train_idx, _) = make_split(&target, &spec, false).unwrap();
        let trained = train_regime::<f32>(
            Regime::Scratch,
            &target,
            &[],
            &cfg,
            seed,
            0,
            &train_idx,
            None,
        )
        .unwrap();

        let mut manual: CdcnnParams<f32> = init_params(
            &cfg.arch,
            &[DomainSpec::from_cube(&target)],
            subseed(seed, "init", 0),
        )
        .unwrap();
        train_supervised(&mut manual, &target, &train_idx, &cfg.finetune, 1.0).unwrap();
        for (a, b) in trained.params.params().iter().zip(manual.params().iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn cd_scratch_trunk_sees_gradients_from_every_domain() {
        let sources = tiny_domains();
        let target = tiny_target();
        let cfg = tiny_cfg();
        let spec = SplitSpec {
            seed: 5,
            train_per_domain: cfg.finetune.train_per_domain,
            run_index: 0,
        };
        let (train_idx, _) = make_split(&target, &spec, false).unwrap();
        let trained = train_regime::<f32>(
            Regime::CdScratch,
            &target,
            &sources,
            &cfg,
            5,
            0,
            &train_idx,
            None,
        )
        .unwrap();
        assert_eq!(trained.joint_grad_norms.len(), cfg.finetune.iterations);
        for iter_norms in &trained.joint_grad_norms {
            assert_eq!(iter_norms.len(), sources.len() + 1);
            for &n in iter_norms {
                assert!(n > 0.0, "a domain contributed no trunk gradient");
            }
        }
    }

    #[test]
    fn run_experiment_aggregates_means() {
        let target = tiny_target();
        let cfg = tiny_cfg();
        let result =
            run_experiment::<f32>(Regime::Scratch, &target, &[], &cfg, 31, None, 1).unwrap();
        assert_eq!(result.aggregate.reports.len(), 2);
        let mean: f64 = result.aggregate.reports.iter().map(|r| r.oa).sum::<f64>() / 2.0;
        assert!((result.aggregate.mean_oa - mean).abs() < 1e-12);
        // single-run aggregate equals the single report
        let mut cfg1 = cfg.clone();
        cfg1.finetune.runs = 1;
        let r1 = run_experiment::<f32>(Regime::Scratch, &target, &[], &cfg1, 31, None, 1).unwrap();
        assert_eq!(r1.aggregate.mean_oa, r1.aggregate.reports[0].oa);
    }

    #[test]
    fn parallel_runs_match_sequential() {
        let target = tiny_target();
        let cfg = tiny_cfg();
        let seq =
            run_experiment::<f32>(Regime::Scratch, &target, &[], &cfg, 13, None, 1).unwrap();
        let par =
            run_experiment::<f32>(Regime::Scratch, &target, &[], &cfg, 13, None, 2).unwrap();
        assert_eq!(seq.aggregate.mean_oa, par.aggregate.mean_oa);
        for (a, b) in seq.models.iter().zip(par.models.iter()) {
            for (x, y) in a.params().iter().zip(b.params().iter()) {
                assert_eq!(x.value, y.value);
            }
        }
    }
}
