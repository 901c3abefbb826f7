//! Sequence generation and filtered augmentation for tiny sequence
//! classification tasks.
//!
//! The crate bundles:
//! - a minimal dense-tensor stack with reverse-mode autodiff ([`tensor`],
//!   [`autodiff`], [`nn`]),
//! - multimodal condition encoders and block-matching motion extraction
//!   ([`conditioning`]),
//! - temporal attention machinery: sequential, key-frame, and motion-pathway
//!   attention ([`sam`]),
//! - a latent-diffusion generator with two-stage training, 2d-to-3d
//!   inflation, and a deterministic DDIM sampler ([`diffusion`]),
//! - a three-stage quality filter for synthetic clips plus sequence metrics
//!   ([`filter`]),
//! - a toy dataset, a small 3-d CNN classifier, evaluation, and experiment
//!   orchestration ([`pipeline`]).

pub mod autodiff;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod filter;
pub mod io;
pub mod kmeans;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod sam;
pub mod tensor;

pub use autodiff::{attention as attention_var, grad_check, no_grad, Var};
pub use error::{Error, Result};
pub use kmeans::{kmeans_1d, KMeansResult};
pub use ops::{conv_pseudo3d, cosine_similarity, scaled_dot_product_attention};
pub use rng::{Rng, RngState};
pub use tensor::{Real, Tensor};
