//! A danger-theory artificial immune system over system-call traces.
//!
//! Process and host metrics become PAMP, danger, safe and inflammation
//! signals. A population of dendritic cells fuses those signals while
//! sampling syscall n-grams, migrates once enough costimulation has
//! accumulated, and presents its n-grams to naive T cells in a mature
//! (dangerous) or semi-mature (safe) context. T cells that gather enough
//! activation become `deny` effectors, those that gather enough tolerance
//! become `permit` effectors, and every effector contributes a statement to
//! a permit/deny policy layered on top of a user-written base policy.

pub mod config;
pub mod dendritic;
pub mod engine;
pub mod error;
pub mod lymph;
pub mod records;
pub mod response;
pub mod scenario;
pub mod signals;
pub mod tissue;

pub use config::EngineConfig;
pub use dendritic::{DcContext, DendriticCell, MigratedDC, Peptide, WeightMatrix};
pub use engine::{replay, run_replay, Engine, ReplayOutcome, RunReport, TickSummary};
pub use error::{Error, Result};
pub use lymph::{match_tcr, NaiveTCell, PatternItem, Tcr};
pub use response::{Action, ActionEvent, DefaultAction, EffectorTCell, PolicySet, PolicyStatement};
pub use signals::{HostSample, MetricSample, SignalVector};
pub use tissue::{AntigenEvent, TissueStore};
