//! Manifest-driven, checksum-verified, resumable bulk file staging from
//! a fleet of data nodes, with per-node throughput metrics.

pub mod checksum;
pub mod clock;
pub mod config;
pub mod credential;
pub mod engine;
pub mod manifest;
pub mod metrics;
pub mod scheduler;
pub mod session;
pub mod simnode;
pub mod units;

pub use checksum::ChecksumType;
pub use clock::{Clock, ManualClock, OffsetClock, SharedClock, SystemClock};
pub use config::StageConfig;
pub use credential::{Credential, CredentialManager, CredentialPolicy, LocalIssuer};
pub use engine::{Engine, FileTask, RetryPolicy, StatusJournal, TransferState, VerifyMode};
pub use manifest::{
    parse_manifest, DatasetSummary, FileEntry, Location, Manifest, NodeId, ReplicaSet,
};
pub use metrics::{NodeAggregate, Recorder, RunSummary, ThroughputSample};
pub use scheduler::{build_plan, RunReport, SchedulerConfig, TransferPlan};
pub use session::Session;
