//! Conversational recommendation over an incomplete knowledge graph, with a
//! latent dialogue-specific subgraph inferred per turn.

pub mod config;
pub mod context_encoder;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph_encoder;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod recommender;
pub mod refactor;
pub mod subgraph_select;
pub mod synthetic;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
