//! Supervisor HTTP service and command-line tools over the `skillchain`
//! engine.

pub mod cli;
pub mod server;

pub use server::{router, AppState};
