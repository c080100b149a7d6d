//! Command-line pipeline around `stsgt-core`: prepare data, build the graph,
//! train, evaluate, forecast and export plot data.

pub mod commands;
pub mod config;
