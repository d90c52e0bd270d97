pub mod belief;
pub mod budget;
pub mod error;
pub mod loss;
pub mod model;
pub mod par;
pub mod toy;
pub mod uncertainty;

pub use error::{Result, RslmError};
pub use par::Execution;
