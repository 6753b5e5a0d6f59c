//! Evolutionary conversion-rate optimisation.
//!
//! A web page is a [`SearchSpace`] of elements with alternative values. The
//! engine keeps a population of candidate designs, routes live traffic to them
//! until each reaches its impression quota, then keeps the best, breeds
//! replacements and repeats. Everything that changes an experiment is an
//! append-only [`LogRecord`], so any state can be rebuilt by replaying its log.

pub mod allocator;
pub mod config;
pub mod evolution;
pub mod experiment;
pub mod persistence;
pub mod report;
pub mod simulator;
pub mod space;
pub mod stats;

pub use allocator::{Assignment, AssignmentRecord, ConversionOutcome, Shortfall};
pub use config::{ConfigError, ExperimentConfig, FieldError};
pub use evolution::{
    Candidate, CandidateStatus, EvolutionConfig, GenerationReport, StopReason, StoppingConfig,
};
pub use experiment::{Experiment, ExperimentError, ExperimentState, ExperimentStatus};
pub use persistence::{ExperimentStore, FileLog, LogRecord, MemoryLog, RecordBody, RecordSink};
pub use report::Report;
pub use simulator::{GroundTruthModel, SimulationScenario, SimulationTrace};
pub use space::{ElementSpec, Genome, SearchSpace};
pub use stats::{FitnessEstimate, IntervalMethod};
