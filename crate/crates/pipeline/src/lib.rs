//! Matching front end: dense top-1 retrieval over a verified knowledge base,
//! the similarity-threshold baseline, the judgment prompt, and clients that
//! collect binary votes from OpenAI-compatible judge services.

pub mod cache;
pub mod client;
pub mod error;
pub mod kb;
pub mod pipeline;
pub mod prompt;
pub mod votes;

pub use cache::JudgeCache;
pub use client::{parse_vote, EmbeddingClient, Endpoint, JudgeClient};
pub use error::{PipelineError, Result};
pub use kb::{threshold_judge, KbEntry, KnowledgeBase, DEFAULT_TAU};
pub use pipeline::{EmbeddingConfig, MatchOutcome, Pipeline, PipelineConfig};
pub use prompt::JudgmentPrompt;
pub use votes::{collect_votes, CollectOptions, JudgeFailure, VoteOutcome};
