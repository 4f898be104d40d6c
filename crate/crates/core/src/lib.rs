//! Cross-domain hyperspectral representation learning at desk scale.
//!
//! The crate learns a shared per-pixel representation over multiple
//! unlabeled hyperspectral images by multi-positive contrastive training of
//! a cross-domain CNN (per-domain spectral encoders around a shared
//! pointwise-residual trunk), then transfers it to per-pixel classification.
//! All network kernels carry hand-derived exact gradients and are verified
//! against central finite differences.
//!
//! Modules:
//! - [`hsdata`]: cube container, normalization, patches, dihedral
//!   augmentation, splits, synthetic domains
//! - [`tensorops`]: conv2d / relu / pooling / normalization /
//!   cross-entropy kernels with backward passes, SGD and its schedule
//! - [`cdnet`]: the network itself plus FLOPs accounting
//! - [`checkpoint`]: the HCP1 parameter container
//! - [`selfsup`]: pseudo-label region sampling, multi-positive InfoNCE,
//!   contrastive pretraining
//! - [`downstream`]: transfer, finetuning, the four training regimes,
//!   OA/AA evaluation

pub mod cdnet;
pub mod checkpoint;
pub mod downstream;
pub mod error;
pub mod hsdata;
pub mod rng;
pub mod selfsup;
pub mod tensorops;

pub use cdnet::{ArchConfig, CdcnnParams, DomainSpec, EmbeddingBatch};
pub use downstream::{
    evaluate, run_experiment, transfer, EvalReport, ExperimentConfig, ExperimentResult,
    FinetuneConfig, Regime, RunAggregate,
};
pub use error::{Error, Result};
pub use hsdata::{HyperCube, Patch, SplitSpec, SynthConfig};
pub use selfsup::{infonce_multi, pretrain, sample_regions, ContrastiveConfig, RegionBatch};
pub use tensorops::{Scalar, SgdConfig, Tensor4};
