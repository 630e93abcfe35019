//! Training pipeline, checkpoints, inference engine and the chat service.

pub mod checkpoint;
pub mod engine;
pub mod pipeline;
pub mod service;
pub mod session;

pub use engine::Engine;
pub use pipeline::{evaluate, Corpus, Evaluation, Workspace};
