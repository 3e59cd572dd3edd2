pub mod curate;
pub mod distill;
pub mod error;
pub mod eval;
mod io;
pub mod nets;
pub mod seed;
pub mod teacher;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use io::sha256_hex;
