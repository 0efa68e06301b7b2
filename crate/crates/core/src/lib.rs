//! Reflective retrieval-augmented answering over an entity knowledge base.
//!
//! A multimodal model first decides whether a question about an image needs
//! external knowledge (`<RET>` / `<NORET>`). If so, documents are retrieved by
//! image similarity, every passage of those documents is judged `<REL>` or
//! `<NOREL>`, and the answer is generated from the relevant passages.
//!
//! The model itself lives behind [`backend::GenerativeBackend`]; this crate
//! provides the protocol, the knowledge base and index, training-data
//! construction, and evaluation.

pub mod backend;
pub mod engine;
pub mod eval;
pub mod forge;
pub mod index;
pub mod io;
pub mod kb;
pub mod prompt;
pub mod remote;
pub mod rng;
pub mod sample;
pub mod similarity;
pub mod synthetic;
pub mod text;

pub use backend::{GenerativeBackend, MockBackend, ReflectiveToken};
pub use engine::{Engine, PipelineConfig, PipelineTrace};
pub use index::{DenseIndex, RetrievalMode};
pub use kb::{KnowledgeBase, Passage};
pub use sample::QuerySample;
