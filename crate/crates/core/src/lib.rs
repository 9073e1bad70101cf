//! Reversible spiking neurons with memory-free backpropagation through time.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod dd;
pub mod error;
pub mod grad;
pub mod ledger;
pub mod lif;
pub mod net;
pub mod node;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
