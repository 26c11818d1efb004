//! Laboratory for the symmetric-KL family of adversarially trained latent
//! variable models. One generator pair (encoder + decoder) and one
//! discriminator are shared across every objective variant; the variants
//! differ only in which expectation terms they keep and how the optimal
//! log-ratio discriminator enters the generator update.

pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod identities;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod training;
