//! The master: a sans-IO scheduler plus the tokio server that drives it.

pub mod scheduler;
pub mod server;

pub use scheduler::{
    ms_to_us, us_to_ms, Action, Micros, RegisterError, Scheduler, SchedulerConfig, SubmitError, TaskFailure,
    TaskRecord, TaskState, Transition, WorkerRecord,
};
pub use server::{spawn_master, MasterConfig, MasterHandle};
