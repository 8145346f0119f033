pub mod error;
pub mod field;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod par;
pub mod rollout;
pub mod scene;
pub mod solver;
pub mod train;

pub use error::{LssError, Result};
