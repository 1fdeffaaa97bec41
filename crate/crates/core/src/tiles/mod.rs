//! Tensor tiles, layouts and their placement on the mesh.

pub mod io;
mod layout;
mod matrix;
mod placement;

pub use layout::{DimMap, DimMode, Layout};
pub use matrix::{Matrix, Tile};
pub use placement::{
    gather, partition, replicate, replicated_layout, GridShape, PlacedTensor, Placement,
};
