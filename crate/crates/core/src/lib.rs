//! Communication-pattern modeling for distributed LLM inference.
//!
//! The crate predicts, simulates and validates the collective and
//! point-to-point traffic generated by tensor, pipeline and hybrid
//! parallelism during a single request's prefill and decode phases.
//!
//! - [`arch`] holds the model, layout and sequence types plus built-in presets.
//! - [`analytic`] evaluates the closed-form volume formulas.
//! - [`schedule`] replays the communication schedule event by event.
//! - [`latency`] attributes events to link classes and estimates the
//!   communication component of TTFT/TPOT/E2E.
//! - [`trace`] diffs observed operation counts against predictions.
//! - [`cli`] binds everything into the `commscope` command.

pub mod analytic;
pub mod arch;
pub mod cli;
pub mod error;
pub mod latency;
pub mod schedule;
pub mod trace;

pub use analytic::{CollectiveKind, GatherConvention, VolumeBreakdown};
pub use arch::{ModelArch, ParallelismLayout, SequenceSpec};
pub use error::{Error, Result};
pub use schedule::{CommEvent, EventLog, Phase, ScheduleSummary};
