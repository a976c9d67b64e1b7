//! Few-shot graph classification with structure-aware GIN embeddings.
//!
//! A GIN encoder produces per-layer graph readouts. Attention models weight
//! those layers (global structure) and fuse the graph with its substructures
//! (local structure). Training is episodic with a prototype loss; at test time
//! embeddings are centered by the meta-train mean, L2-normalized and classified
//! by nearest class centroid.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod gin;
pub mod gradsuite;
pub mod graph;
pub mod meta;
pub mod params;
pub mod train;

pub use error::{Error, Result};
