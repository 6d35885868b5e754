//! Configuration, commands and manifests behind the `filtertube` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod selftest;
