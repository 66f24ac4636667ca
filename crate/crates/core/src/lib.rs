pub mod bench;
pub mod data;
pub mod error;
pub mod init;
pub mod metrics;
pub mod model_select;
pub mod pln;
pub mod simulate;
pub mod tree_algebra;
pub mod vem;

pub use data::CountDataset;
pub use error::{Error, Result};
