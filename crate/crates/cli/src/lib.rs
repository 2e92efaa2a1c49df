//! Command-line and HTTP front ends over one `datadock-core` platform.

pub mod cli;
pub mod ops;
pub mod server;
