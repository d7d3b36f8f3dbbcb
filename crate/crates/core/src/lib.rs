//! Shifted-window video transformer with parameter-efficient transfer
//! learning modules, exact parameter accounting and a synthetic
//! fine-tuning harness.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod layers;
pub mod network;
pub mod petl;
pub mod registry;
pub mod tensor;

pub use backbone::{ModelConfig, SwinModel};
pub use error::{Error, Result};
pub use network::Network;
pub use petl::{Mechanism, PetlSpec, Sites};
pub use registry::{CountFilter, ParameterRegistry};
pub use tensor::{Tape, Tensor, Var};
