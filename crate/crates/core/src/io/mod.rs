//! Configuration files, z-score tables and report writers.

pub mod config;
pub mod data;
pub mod report;
pub mod svg;
