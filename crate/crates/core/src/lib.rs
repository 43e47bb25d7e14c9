pub mod cell;
pub mod error;
pub mod harness;
pub mod modesum;
pub mod oracle;
pub mod regular_pole;
pub mod singular_asym;
pub mod transverse;

pub use error::{Error, Result};
