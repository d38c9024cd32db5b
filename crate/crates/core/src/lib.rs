pub mod checkpoint;
pub mod diffcore;
pub mod divoracle;
pub mod error;
pub mod evalsuite;
pub mod latentadv;
pub mod nanolm;
pub mod nn;
pub mod prefdata;
pub mod prefloss;
pub mod trainer;

pub use error::{Error, Result};
