//! Concurrent collection of one vote per judge.

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::client::JudgeClient;
use crate::error::{PipelineError, Result};

pub const DEFAULT_PARALLELISM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectOptions {
    /// Maximum judge requests in flight.
    pub parallelism: usize,
    /// Fail on the first judge error instead of abstaining.
    pub strict: bool,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions {
            parallelism: DEFAULT_PARALLELISM,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub index: usize,
    pub judge: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// One vote per judge in judge order; failed judges abstain with 0.
    pub votes: Vec<u8>,
    pub failures: Vec<JudgeFailure>,
}

/// Asks every judge about `prompt`, at most `opts.parallelism` at a time.
pub async fn collect_votes(
    prompt: &str,
    judges: &[JudgeClient],
    opts: CollectOptions,
) -> Result<VoteOutcome> {
    if judges.is_empty() {
        return Err(PipelineError::Config("no judges configured".into()));
    }
    let permits = Semaphore::new(opts.parallelism.max(1));
    // join_all yields results in input order whatever the completion order.
    let results = join_all(judges.iter().enumerate().map(|(i, j)| {
        let permits = &permits;
        async move {
            let _permit = permits.acquire().await.expect("semaphore is never closed");
            (i, j.judge(prompt).await)
        }
    }))
    .await;

    let mut votes = Vec::with_capacity(judges.len());
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(v) => votes.push(v),
            Err(e) => {
                if opts.strict {
                    return Err(e);
                }
                let judge = judges[i].endpoint().name.clone();
                log::warn!("judge {judge} abstains (vote 0): {e}");
                failures.push(JudgeFailure {
                    index: i,
                    judge,
                    error: e.to_string(),
                });
                votes.push(0);
            }
        }
    }
    if failures.len() == judges.len() {
        let summary = failures
            .iter()
            .map(|f| format!("{}: {}", f.judge, f.error))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(PipelineError::AllJudgesFailed {
            n: judges.len(),
            summary,
        });
    }
    Ok(VoteOutcome { votes, failures })
}
