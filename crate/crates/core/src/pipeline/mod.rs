//! The unsupervised adaptation procedure: pseudo-labels from clustering,
//! mutual losses, and the pre-training and adaptation loops.

pub mod kmeans;
pub mod losses;
pub mod sampler;
pub mod train;

pub use kmeans::{kmeans, l2_normalize_rows, PseudoLabels};
pub use losses::{mutual_losses, supervised_loss, LossParts, LossWeights, StudentOut, TeacherOut};
pub use sampler::{BatchConfig, PkSampler};
pub use train::{adapt, source_pretrain, AdaptConfig, EpochHook, EpochRecord, Phase, PretrainConfig};
