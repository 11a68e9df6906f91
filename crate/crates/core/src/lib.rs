//! Policy-gradient variance lab: exact tabular variance theory, rewindable
//! environments, learned world models and a shared PPO core.

pub mod agents;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod ndiff;
pub mod policy;
pub mod probe;
pub mod spg;
pub mod variance;

pub use agents::{AgentConfig, Variant};
pub use envs::{Action, ActionSpace, Env, RewindToken, TabularMdp, Transition};
pub use error::{Error, Result};
pub use ndiff::{ParamVector, Tape, Tensor};
pub use probe::{BiasVarianceRow, ProbeConfig};
pub use spg::{Batch, GradientEstimate, Method};
pub use variance::{DeltaReport, VarianceReport};
