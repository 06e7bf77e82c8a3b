//! Harness library behind the `mergeforge` binary: synthetic tasks, the
//! end-to-end pipeline, standalone jobs, and report emission.

pub mod jobs;
pub mod pipeline;
pub mod report;
pub mod tasks;
