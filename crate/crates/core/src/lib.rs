pub mod abft;
pub mod attention;
pub mod campaign;
pub mod error;
pub mod fault;
pub mod io;
pub mod matrix;
pub mod numerics;
pub mod schedule;

pub use error::{Error, Result};
