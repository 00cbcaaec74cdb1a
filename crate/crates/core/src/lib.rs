//! Diffusion-based synthesis of out-of-distribution samples on 2-D toy data,
//! guided by classifier energy and k-NN feature distance, plus outlier
//! exposure fine-tuning and detection metrics.

// Parameter checks use negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod diffusion;
mod error;
pub mod evaldetect;
pub mod guidance;
pub mod numcore;
pub mod oe;
pub mod scores;

pub use datagen::{LabeledDataset, OodKind, Split};
pub use diffusion::{Condition, Denoiser, NoiseSchedule};
pub use error::{Error, Result};
pub use evaldetect::{ScoreKind, ScoreReport};
pub use guidance::{GuidanceConfig, GuidanceTarget, GuidedBatchResult};
pub use numcore::{DenseMatrix, Mlp, Rng};
pub use oe::{OeTrainConfig, PsiHead};
pub use scores::{Classifier, EmbeddingBank};
