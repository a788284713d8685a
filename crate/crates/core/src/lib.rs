pub mod detection;
pub mod master;
pub mod preprocess;
pub mod protocol;
pub mod worker;
pub mod metrics;
pub mod harness;
