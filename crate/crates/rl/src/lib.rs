//! Learning-based reservation: a small dense-network engine, the
//! reservation game and federated soft actor-critic agents.

pub mod agents;
pub mod env;
pub mod neural;

pub use agents::{train_decsac, train_fedsac, AgentConfig, Scheme, TrainingRun};
pub use env::{EnvConfig, ProvisioningEnv};
pub use neural::{Adam, Mlp};
