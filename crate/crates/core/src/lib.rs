//! Global workspace fusion with a top-down modality selector, trained and
//! evaluated on a synthetic shapes dataset under latent-space corruption.

pub mod attention;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod gw;
pub mod modality;
pub mod objectives;
pub mod pipeline;
pub mod probes;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use modality::{Modality, Task};
