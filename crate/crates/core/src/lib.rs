//! Deterministic simulator for federated fine-tuning with LoRA adapters.
//!
//! The crate covers the whole pipeline at desk scale: a dense kernel
//! ([`linalg`]), a small classifier with LoRA adapters and exact
//! backpropagation ([`model`]), AdamW ([`optim`]), synthetic non-IID data
//! ([`data`]), the federated round loop and aggregation strategies
//! ([`flcore`]), adaptive rank selection ([`ranksel`]), differential privacy
//! ([`dp`]) and measurement ([`metrics`]).

pub mod data;
pub mod dp;
pub mod error;
pub mod flcore;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ranksel;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
