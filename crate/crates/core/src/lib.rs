pub mod atlas;
pub mod avatar;
pub mod error;
pub mod image;
pub mod io;
pub mod loss;
pub mod math;
pub mod nn;
pub mod optim;
pub mod render;
pub mod rig;
pub mod train;

pub use error::{Error, Result};
