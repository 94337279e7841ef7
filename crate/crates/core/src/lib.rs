//! Contention-window tuning for saturated CSMA networks through in-context
//! learning with a one-layer softmax attention model.

pub mod analytic_model;
pub mod experiment_harness;
pub mod icl_transformer;
pub mod mac_simulator;
pub mod prompt_pipeline;
