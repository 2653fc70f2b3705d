//! Construction of long-context training sequences whose dependencies are
//! verified by entropy reduction.
//!
//! The pipeline runs four stages per root document:
//!
//! 1. score every position with a next-token model and keep the positions
//!    whose entropy exceeds `mean + alpha * std` ([`selection`]);
//! 2. embed a window around each such position and pull the top-K most
//!    similar chunks from a retrieval corpus ([`retrieval`]);
//! 3. prepend each candidate to the root document and keep the best one
//!    whose relative entropy reduction exceeds `epsilon` ([`verification`]);
//! 4. order the verified chunks and concatenate them ahead of the root
//!    document into a token-bounded sample ([`assembly`]).
//!
//! [`pipeline::run_pipeline`] drives all of it over a corpus.

pub mod assembly;
pub mod corpus;
pub mod exec;
mod http;
pub mod pipeline;
pub mod retrieval;
pub mod scoring;
pub mod selection;
pub mod verification;

pub use assembly::{AssemblyConfig, Strategy, TrainingSample};
pub use http::RemoteConfig;
pub use corpus::{Document, TokenSequence, Tokenizer, WordTokenizer};
pub use pipeline::{run_pipeline, DatasetStats, PipelineConfig};
pub use retrieval::{Candidate, EmbeddingVector, Query, RetrievalIndex};
pub use scoring::{entropy, EntropyProfile, NGramModel, NGramScorer, NextTokenDistribution, Scorer};
pub use selection::HighEntropySet;
pub use verification::VerifiedDependency;
