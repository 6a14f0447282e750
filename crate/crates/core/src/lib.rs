pub mod circuit_graph;
pub mod cli;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod ged_exact;
pub mod ged_gnn;
pub mod labeled;
pub mod netlist;
pub mod primitive;
pub mod symmetry;

pub use error::{Error, NetlistError, Result};
