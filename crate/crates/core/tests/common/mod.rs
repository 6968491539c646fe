//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod reference;
