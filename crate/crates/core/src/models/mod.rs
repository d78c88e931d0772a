//! The autoencoder zoo: one [`Model`] type covering every objective, each
//! split into reconstruction, regularization and auxiliary terms.

mod config;
mod losses;
mod model;

pub use config::{ModelConfig, ModelKind, ReconstructionLoss, COMMON_KEYS};
pub use losses::{
    fd_jacobian_penalty, iwae_log_bound, log_normal_pairwise, max_msssim_scales, msssim, nearest_codes, permute_dims,
    reconstruction_per_row, tc_decomposition, AuxTerm, AuxVar, Codebook, LossBreakdown, LossTerms, TcDecomposition,
};
pub use model::{Extra, Model, ModelOutput};
