//! Dataset persistence and the colored classification data.

pub mod colored;
pub mod idx;
pub mod table;

pub use table::{read_dataset, sidecar_path, write_dataset};
