//! Similar-question generation toolkit.
//!
//! Expands the question side of a retrieval chatbot's knowledge base: every
//! QA pair holds one answer and several equivalent phrasings, and this crate
//! generates more phrasings through a pluggable completion model, measures
//! them, and simulates how the expanded knowledge base retrieves.
//!
//! Interchangeable pieces (generation strategies, completion providers and
//! embedders) live behind traits and are looked up by name in a
//! [`registry::Registry`], so a run is selected entirely from configuration.

pub mod embed;
pub mod generate;
pub mod kb;
pub mod metrics;
pub mod prompt;
pub mod registry;
pub mod retrieval;
pub mod review;

pub use generate::{CompletionProvider, GenerationBatch, GenerationStrategy, SamplingParams};
pub use kb::{KnowledgeBase, QAPair};
pub use prompt::Mode;
pub use registry::Registry;
