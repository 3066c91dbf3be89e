//! Einsum networks: tensorized probabilistic circuits over region graphs.
//!
//! A [`structures::RegionGraph`] is compiled into a [`compiler::LayeredCircuit`],
//! parameterized as a [`model::EinsumNetwork`], evaluated by [`engine`] and
//! trained by [`trainer`].

pub mod bench;
pub mod compiler;
pub mod engine;
pub mod error;
pub mod expfam;
pub mod io;
pub mod model;
pub mod oracle;
pub mod simplex;
pub mod structures;
pub mod trainer;

pub use compiler::{compile, LayeredCircuit};
pub use error::{CompileError, EngineError, PersistError, StructureError, TrainError};
pub use expfam::{ExpFamily, LeafProjection};
pub use model::{EinsumNetwork, InitOptions};
pub use structures::{RegionGraph, StructureConfig};
