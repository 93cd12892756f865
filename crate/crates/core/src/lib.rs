//! Desk-scale laboratory for iterative magnitude pruning of small Vision
//! Transformers under label noise, with online detection of the sparse
//! double descent phenomenon and ℓ2-regularization sweeps.

pub mod data;
pub mod detector;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod params;
pub mod pruning;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod vit;
