//! Session service and command-line front end for `gpreg`.
//!
//! [`session`] implements the active-registration loop (add or remove
//! landmark pairs, refit, inspect uncertainty slices, export); [`api`] exposes
//! it over HTTP/JSON; [`cli`] holds the batch subcommands behind the `gpreg`
//! binary.

pub mod api;
pub mod cli;
pub mod session;
