pub mod error;
pub mod ias;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod quadrature;
pub mod select;
pub mod special;
pub mod stop;
pub mod uq;
pub mod vias;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
