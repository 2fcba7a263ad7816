//! Device-independent quantum randomness expansion: CHSH model, estimation-factor
//! optimization, the spot-checking protocol and Toeplitz extraction.

pub mod bits;
pub mod error;
pub mod extractor;
pub mod hp;
pub mod io;
pub mod mle;
pub mod model;
pub mod pef;
pub mod protocol;
pub mod qef;
pub mod reference;
pub mod sim;

pub use error::{Error, Result};
pub use hp::Hp;
