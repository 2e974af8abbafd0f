//! File formats, logging, and run orchestration around `ecgtext-core`.

pub mod checkpoint;
pub mod commands;
pub mod corpus_io;
pub mod error;
pub mod logs;
pub mod runspec;
