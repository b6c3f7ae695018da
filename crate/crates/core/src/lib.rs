//! Characteristic-specific partial fine-tuning laboratory for toy codec
//! language models.

mod error;

pub mod charprobe;
pub mod codeclm;
pub mod evalkit;
pub mod ftstrat;
pub mod gradcore;
pub mod labcli;
pub mod synthworld;

pub use error::{Error, Result};
