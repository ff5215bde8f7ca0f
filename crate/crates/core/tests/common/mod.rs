//! Helpers shared by the integration tests and the acceptance target.

#![allow(dead_code)]

pub mod checks;
pub mod oracle;
