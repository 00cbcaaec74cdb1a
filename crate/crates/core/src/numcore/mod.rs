//! Dense linear algebra, seeded randomness, and a small MLP with exact
//! forward and backward passes.

pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use matrix::{dot, norm, DenseMatrix};
pub use mlp::{Activation, ForwardPass, Layer, Mlp, MlpDocument, MlpGrads};
pub use optim::{cosine_lr, Adam, Optimizer, SgdMomentum};
pub use rng::{indexed_seed, sub_seed, NoiseSource, Rng};
