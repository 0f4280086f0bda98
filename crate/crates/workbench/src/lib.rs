//! Command-line pipeline and labelling-triage service.

pub mod cli;
pub mod service;
