//! Scale-free symbolic control of infinite networks.
//!
//! A network is described by finitely many subsystem classes and a topology
//! pattern. Every design quantity (gains, small-gain weights, local
//! precisions, grid pitches, symbolic models, safety controllers) is computed
//! per class, so a finite truncation of any size only instantiates results
//! that already exist.

pub mod abstraction;
pub mod designer;
pub mod gains;
pub mod kfun;
pub mod netspec;
pub mod num;
pub mod pipeline;
pub mod sim;
pub mod synthesis;

use thiserror::Error;

pub use abstraction::{check_local_asf, eval_global_asf, Grid, OutRule, SymbolicModel};
pub use designer::{design_precisions, verify_design, DesignOptions, QuantDesign, VerificationReport};
pub use gains::{check_small_gain, DeltaIssCertificate, SmallGainCertificate};
pub use kfun::KFn;
pub use netspec::{instantiate, parse_network, validate, BoxSet, NetworkSpec, TruncatedNetwork};
pub use pipeline::{Analysis, PipelineOptions, BUNDLED_TRAFFIC_CONFIG};
pub use sim::{SimNetwork, TrajectoryLog};
pub use synthesis::{compose, refine, synthesize_safety, SafetyController};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] netspec::SpecError),
    #[error(transparent)]
    Gain(#[from] gains::GainError),
    #[error(transparent)]
    Design(#[from] designer::DesignError),
    #[error(transparent)]
    Abstraction(#[from] abstraction::AbstractionError),
    #[error(transparent)]
    Synthesis(#[from] synthesis::SynthesisError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// True for errors in the input rather than in the problem itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Spec(netspec::SpecError::Config(_)))
    }
}
