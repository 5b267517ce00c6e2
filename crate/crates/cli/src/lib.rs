//! Command implementations behind the `bsp` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fitdir;
pub mod manifest;
pub mod report;
