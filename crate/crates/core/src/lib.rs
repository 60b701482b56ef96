//! Simulated kernel I/O stack with chained storage functions.

pub mod bench;
pub mod blockdev;
pub mod btree;
pub mod cli;
pub mod config;
pub mod iostack;
pub mod sfunc;
pub mod xcache;
