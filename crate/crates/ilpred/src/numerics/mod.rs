//! Dense arrays, reverse-mode autodiff, and checkpoint serialization.

pub mod array;
pub mod checkpoint;
pub mod tape;

pub use array::{DenseArray, Param, ParamStore};
pub use tape::{NodeId, Tape};
