pub mod archscan;
pub mod collector;
pub mod corpus;
pub mod emulation;
pub mod error;
pub mod fixtures;
pub mod fsroot;
pub mod fsutil;
pub mod scanner;
pub mod pipeline;
pub mod staticintake;
pub mod triage;
pub mod webscan;
pub mod workspace;
