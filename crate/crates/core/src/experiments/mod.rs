//! Reproducible experiment drivers shared by the CLI and the acceptance
//! suite.

pub mod gradcheck;
pub mod runs;
