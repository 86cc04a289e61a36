//! Real-time perioperative complication risk pipeline.
//!
//! Source CSVs are scanned on an interval and joined per admission
//! ([`ingest`]), published to a partitioned log ([`streambus`]), turned into
//! model input ([`features`]), scored by eight additive models against
//! fixed cutoffs ([`models`], [`engine`]), kept in a sealed versioned store
//! ([`store`]) and served over HTTP ([`api`]). [`synthbench`] generates
//! synthetic cohorts, calibrates models and wires everything together.

pub mod api;
pub mod canonical;
pub mod domain;
pub mod engine;
pub mod features;
pub mod ingest;
pub mod models;
pub mod store;
pub mod streambus;
pub mod synthbench;
