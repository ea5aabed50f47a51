//! Two-device hash-join co-processing engine.
//!
//! Joins run as series of fine-grained data-parallel steps over a pair of
//! modeled compute devices: a narrow multi-core device and a wide lockstep
//! device. Plans assign each step a workload split, an analytic cost model
//! predicts elapsed time for any split vector, and the scheduler searches
//! the split space and replays plans on a logical-time simulator backed by
//! real data structures. Real wall clocks appear only in calibration and
//! the latch micro-benchmark.

pub mod arena;
pub mod cli;
pub mod costmodel;
pub mod device;
pub mod hashtable;
pub mod relation;
pub mod report;
pub mod scheduler;
pub mod steps;
