//! Config-driven experiment runner and oracle verification for the
//! `stsl-core` samplers.
//!
//! - [`config`]: TOML experiment configuration with line-numbered diagnostics.
//! - [`experiment`]: building priors, tasks and run artifacts from a config.
//! - [`commands`]: the `invert`, `bias-study`, `edit` and `sample` drivers.
//! - [`verify`]: oracle property suites behind `stsl verify`.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod verify;
