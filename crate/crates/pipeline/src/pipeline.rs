//! Embed, retrieve, prompt and judge: turns a raw query into a dataset row.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ral2m_core::LabeledInstance;
use serde::{Deserialize, Serialize};

use crate::cache::{prompt_hash, JudgeCache};
use crate::client::{EmbeddingClient, Endpoint, JudgeClient};
use crate::error::{PipelineError, Result};
use crate::kb::{KbEntry, KnowledgeBase, DEFAULT_TAU};
use crate::prompt::JudgmentPrompt;
use crate::votes::{collect_votes, CollectOptions, JudgeFailure, DEFAULT_PARALLELISM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    #[serde(flatten)]
    pub endpoint: Endpoint,
    pub dim: usize,
}

/// JSON configuration of the matching front end. Relative paths are resolved
/// against the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kb: PathBuf,
    pub embedding: EmbeddingConfig,
    /// In dataset judge order.
    pub judges: Vec<Endpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub strict: bool,
    /// Pass the retrieved entry's supporting document to the judges.
    #[serde(default)]
    pub include_document: bool,
    #[serde(default = "default_tau")]
    pub threshold: f64,
    #[serde(default)]
    pub prompt: JudgmentPrompt,
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.kb.is_relative() {
            cfg.kb = base.join(&cfg.kb);
        }
        if let Some(dir) = cfg.cache_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = base.join(&*dir);
        }
        Ok(cfg)
    }
}

/// Result of running one query through retrieval and the judges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub embedding: Vec<f64>,
    pub entry: KbEntry,
    pub score: f64,
    /// Similarity-only baseline decision.
    pub threshold_decision: u8,
    pub votes: Vec<u8>,
    pub failures: Vec<JudgeFailure>,
}

#[derive(Debug)]
pub struct Pipeline {
    pub kb: KnowledgeBase,
    pub embedder: EmbeddingClient,
    pub judges: Vec<JudgeClient>,
    pub prompt: JudgmentPrompt,
    pub options: CollectOptions,
    pub include_document: bool,
    pub threshold: f64,
}

impl Pipeline {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let kb = KnowledgeBase::load(&cfg.kb)?;
        let cache = Arc::new(match &cfg.cache_dir {
            Some(dir) => JudgeCache::open(dir)?,
            None => JudgeCache::in_memory(),
        });
        Self::new(
            kb,
            EmbeddingClient::new(cfg.embedding.endpoint.clone(), cfg.embedding.dim),
            cfg.judges
                .iter()
                .map(|ep| JudgeClient::new(ep.clone(), cache.clone()))
                .collect(),
            cfg.prompt.clone(),
            CollectOptions {
                parallelism: cfg.parallelism,
                strict: cfg.strict,
            },
            cfg.include_document,
            cfg.threshold,
        )
    }

    pub fn new(
        kb: KnowledgeBase,
        embedder: EmbeddingClient,
        judges: Vec<JudgeClient>,
        prompt: JudgmentPrompt,
        options: CollectOptions,
        include_document: bool,
        threshold: f64,
    ) -> Result<Self> {
        prompt.validate()?;
        if judges.is_empty() {
            return Err(PipelineError::Config("no judges configured".into()));
        }
        if !kb.is_empty() && kb.dim() != embedder.dim() {
            return Err(PipelineError::Config(format!(
                "knowledge base has dimension {}, encoder {}",
                kb.dim(),
                embedder.dim()
            )));
        }
        Ok(Pipeline {
            kb,
            embedder,
            judges,
            prompt,
            options,
            include_document,
            threshold,
        })
    }

    pub fn judge_names(&self) -> Vec<String> {
        self.judges.iter().map(|j| j.endpoint().name.clone()).collect()
    }

    pub async fn run(&self, query: &str) -> Result<MatchOutcome> {
        if self.kb.is_empty() {
            return Err(PipelineError::EmptyKnowledgeBase);
        }
        let embedding = self.embedder.embed(query).await?;
        let (entry, score) = self.kb.retrieve_top1(&embedding)?;
        let document = if self.include_document {
            entry.document.as_deref()
        } else {
            None
        };
        let prompt = self
            .prompt
            .render(query, &entry.question, &entry.answer, document)?;
        let outcome = collect_votes(&prompt, &self.judges, self.options).await?;
        Ok(MatchOutcome {
            threshold_decision: crate::kb::threshold_judge(score, self.threshold),
            entry: entry.clone(),
            score,
            embedding,
            votes: outcome.votes,
            failures: outcome.failures,
        })
    }

    /// Builds a dataset row for `query`. Without a label the row is only usable
    /// for inference. The id defaults to a hash of the query text.
    pub async fn build_instance(
        &self,
        query: &str,
        id: Option<&str>,
        label: Option<u8>,
    ) -> Result<(LabeledInstance, MatchOutcome)> {
        if let Some(l) = label.filter(|l| *l > 1) {
            return Err(PipelineError::Config(format!("label {l} is not 0 or 1")));
        }
        let outcome = self.run(query).await?;
        let instance = LabeledInstance {
            id: id.map_or_else(|| format!("q-{}", &prompt_hash(query)[..16]), str::to_string),
            embedding: outcome.embedding.clone(),
            votes: outcome.votes.clone(),
            label,
            domain_tag: None,
            query_text: Some(query.to_string()),
        };
        Ok((instance, outcome))
    }
}
