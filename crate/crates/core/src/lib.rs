pub mod backbone;
pub mod data;
pub mod episodic;
pub mod error;
pub mod exec;
pub mod fed;
pub mod head;
pub mod numerics;

pub use error::{FitError, Result};
pub use numerics::Matrix;
