pub mod eval;
pub mod flops;
pub mod import;
pub mod pretrain;
pub mod sweep;
pub mod synth;
pub mod train;
pub mod util;
