//! Std companion to `ctxagg-core`: checkpoint and config files, map and log
//! export, the verification suites and the pieces behind the `ctxagg` binary.

pub mod archive;
pub mod cli_support;
pub mod config;
pub mod export;
pub mod gradsuite;
pub mod invariants;
pub mod oracle;
pub mod parallel;
pub mod selftest;
