//! In-context conditional diffusion transformer: reshape, single-head
//! blocks, time/condition tokens, the latent encoder/decoder variant,
//! parameter norms and checkpoints.

mod block;
mod checkpoint;
mod dit;
mod norms;
mod reshape;

pub use block::{softmax_columns, BlockCache, TransformerParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dit::{
    dit_forward, latent_forward, time_features, DiTConfig, DiTModel, Tape, TIME_FEATURES,
    TIME_FREQS,
};
pub use norms::{
    norm_report, norm_report_with, spectral_norm, two_inf_norm, MatrixNorm, NormReport,
    NormSampling,
};
pub use reshape::ReshapeSpec;
