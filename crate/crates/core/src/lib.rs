//! Pure analysis logic for firmware web-interface assessment.
//!
//! Everything here operates on in-memory data (byte slices, path strings,
//! manifests, log text) and needs only `alloc`. Filesystem access, HTTP and
//! emulation live in the `firmscope` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod aggregate;
pub mod arch;
pub mod finding;
pub mod paths;
pub mod probe;
pub mod report;
pub mod rootfs;
pub mod selection;
pub mod session;
pub mod snapshot;
pub mod stats;
pub mod triage;
pub mod web;

pub use arch::{ArchFamily, ArchId, ArchitectureGuess, Endianness};
pub use finding::{Category, Finding, Locator, Severity, Source};
pub use stats::{ProportionEstimate, SamplePlan, StatsError};
