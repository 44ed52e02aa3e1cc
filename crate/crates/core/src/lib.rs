//! Mining toolkit for machine-learning model hubs: a rate-limited crawler,
//! an append-only snapshot store, preprocessing into analysis attributes,
//! commit classification, stratified sampling and cohort statistics.

pub mod classifier;
pub mod cli;
pub mod fixture;
pub mod hub_client;
pub mod mock_hub;
pub mod cohort_stats;
pub mod preprocess;
pub mod record;
pub mod store;
pub mod stratifier;
