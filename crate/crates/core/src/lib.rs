//! Diversified visual attention for fine-grained classification.
//!
//! The pipeline crops a sequence of multi-scale canvases from an image
//! ([`canvas`]), extracts a convolutional feature map for each
//! ([`backbone`]), and runs an LSTM with soft spatial attention over the
//! sequence ([`attention`]). Training minimises a per-step classification
//! loss plus a penalty on the similarity of consecutive attention maps
//! ([`loss`], [`train`]).

pub mod attention;
pub mod backbone;
pub mod canvas;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
