//! Model-assisted annotation service: prefilled tasks, human corrections,
//! per-batch time and shift metrics, and retraining on the corrected pool.

pub mod clock;
pub mod error;
pub mod metrics;
pub mod prefill;
pub mod server;
pub mod service;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use error::AnnotateError;
pub use metrics::{BatchMetrics, TimeSummary};
pub use prefill::{CascadeTrainer, CheckpointPrefill, PrefillSource, RunDirResolver, SourceResolver, Trainer};
pub use server::{router, serve, serve_on};
pub use service::{snapshot_hash, Annotator, AnnotatorConfig, CorrectionRequest, Pool, TaskView};
