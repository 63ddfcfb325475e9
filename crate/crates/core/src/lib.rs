pub mod error;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod hypergraph;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod probe;
pub mod projector;
pub mod run;
pub mod structqa;
pub mod table;
pub mod text;

pub use error::{Error, Result};
