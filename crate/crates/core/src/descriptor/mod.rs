//! Semantic scene descriptors built from occurrence-model posteriors.

pub mod hard;
pub mod pca;
pub mod pyramid;
pub mod soft;

pub use hard::{encode_hard, hard_descriptor_len, posterior_matrix, HardDescriptor, PosteriorMatrix};
pub use pca::{fit_pca, PcaTransform};
pub use pyramid::{assign_region, Level, PyramidLayout};
pub use soft::{
    encode_soft, fit_codebook, normalize_vlad, patch_matrices, projected_patches, soft_assign, vlad_accumulate,
    PatchPosteriorMatrix, SoftDescriptor, VladCodebook, VladNormalization,
};
