pub mod backbone;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod maskhead;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod querydec;
pub mod roofgen;
pub mod tape;

pub use error::{Error, Result};
