//! Deterministic discrete-event simulator of a serverless-function-based
//! distributed file system metadata service.
//!
//! The crate models the full stack: a FaaS platform with per-deployment
//! instance pools and cold starts, a hybrid HTTP/TCP client RPC layer,
//! trie-structured metadata caches kept coherent by an ACK-INV protocol,
//! a transactional namespace store, bursty workload generation, and
//! pay-per-use cost accounting. Runs are pure functions of a seed and a
//! scenario; independent checkers replay and verify recorded histories.

pub mod cache;
pub mod client;
pub mod coherence;
pub mod engine;
pub mod kernel;
pub mod metrics;
pub mod partition;
pub mod path;
pub mod scenario;
pub mod store;
pub mod trace;
pub mod verify;
pub mod workload;
