//! Two-party protocol: traffic accounting, transports, party state machines
//! and session drivers.

pub mod ledger;
pub mod party;
pub mod session;
pub mod transport;

pub use ledger::{Counter, Party, PhaseCounters, TrafficLedger};
pub use party::{BatchStats, FeatureOwner, LabelOwner, OptimizerConfig};
pub use session::{
    run_feature_owner, run_inference, run_label_owner, run_training, EpochRecord, InferenceReport,
    LocalLink, RunStatus, Schedule, TrainingHistory,
};
pub use transport::{inproc_pair, tcp_loopback_pair, Bucket, InProcTransport, Metered, TcpTransport, Transport};
