//! Named parameter storage, tape binding and shared layer helpers.

mod graph;
pub mod io;
pub mod layers;
mod params;

pub use graph::{GradBuffer, Graph};
pub use params::{Init, ParamStore};
