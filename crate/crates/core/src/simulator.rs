//! Generative model of heterogeneous, topic-dependent and correlated binary
//! judges, with an exact Bayes-optimal posterior.
//!
//! Per instance: a topic is drawn uniformly and a label from the prior. Each
//! clique draws one shared vote that is correct with the clique's mean accuracy
//! on that topic; each member copies it with probability `rho`, otherwise votes
//! independently with its own accuracy. The embedding is the topic one-hot
//! padded to `embed_dim` plus Gaussian noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{default_judge_names, Dataset, LabeledInstance};
use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    #[serde(default)]
    pub name: String,
    pub k: usize,
    pub topics: usize,
    /// `acc[i][t]`: probability judge `i` votes the label on topic `t`.
    pub acc: Vec<Vec<f64>>,
    /// Partition of the judges; singletons are independent judges.
    pub cliques: Vec<Vec<usize>>,
    /// Copy probability per clique.
    pub rho: Vec<f64>,
    pub label_prior: f64,
    pub embed_dim: usize,
    pub embed_noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judges: Option<Vec<String>>,
}

pub const NAMED_CONFIGS: [&str; 4] = [
    "single-strong-judge",
    "correlated-clique",
    "query-dependent-competence",
    "uniform-iid",
];

/// Shipped population configs by name.
pub fn named_config(name: &str) -> Result<PopulationConfig> {
    let text = match name {
        "single-strong-judge" => include_str!("../configs/single-strong-judge.json"),
        "correlated-clique" => include_str!("../configs/correlated-clique.json"),
        "query-dependent-competence" => include_str!("../configs/query-dependent-competence.json"),
        "uniform-iid" => include_str!("../configs/uniform-iid.json"),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown population config {other:?}; known: {}",
                NAMED_CONFIGS.join(", ")
            )))
        }
    };
    let cfg: PopulationConfig =
        serde_json::from_str(text).expect("embedded population configs are valid JSON");
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a named config or, failing that, a JSON file at `name_or_path`.
pub fn load_population(name_or_path: &str) -> Result<PopulationConfig> {
    if NAMED_CONFIGS.contains(&name_or_path) {
        return named_config(name_or_path);
    }
    let path = Path::new(name_or_path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: PopulationConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 || self.topics == 0 {
            return bad("k and topics must be >= 1".into());
        }
        if self.acc.len() != self.k || self.acc.iter().any(|r| r.len() != self.topics) {
            return bad(format!("acc must be a {} x {} matrix", self.k, self.topics));
        }
        if self.acc.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("accuracies must lie in [0, 1]".into());
        }
        let mut seen = vec![false; self.k];
        for c in &self.cliques {
            if c.is_empty() {
                return bad("cliques must be non-empty".into());
            }
            for &j in c {
                if j >= self.k || seen[j] {
                    return bad(format!("cliques must partition 0..{}; judge {j} is out of range or repeated", self.k));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad(format!("cliques must partition 0..{}", self.k));
        }
        if self.rho.len() != self.cliques.len() || self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("rho needs one value in [0, 1] per clique".into());
        }
        if !(self.label_prior > 0.0 && self.label_prior < 1.0) {
            return bad("label_prior must lie in (0, 1)".into());
        }
        if self.embed_dim < self.topics {
            return bad("embed_dim must be >= topics".into());
        }
        if !(self.embed_noise_sigma >= 0.0) {
            return bad("embed_noise_sigma must be >= 0".into());
        }
        if let Some(j) = &self.judges {
            if j.len() != self.k {
                return bad("judges must name every judge".into());
            }
        }
        Ok(())
    }

    pub fn judge_names(&self) -> Vec<String> {
        self.judges.clone().unwrap_or_else(|| default_judge_names(self.k))
    }

    /// Mean member accuracy of clique `c` on topic `t`.
    pub fn clique_accuracy(&self, c: usize, t: usize) -> f64 {
        let members = &self.cliques[c];
        members.iter().map(|&j| self.acc[j][t]).sum::<f64>() / members.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimInstanceTruth {
    pub topic: usize,
    pub label: u8,
    pub clique_shared_votes: Vec<u8>,
}

fn vote_for(label: u8, correct: bool) -> u8 {
    if correct {
        label
    } else {
        1 - label
    }
}

fn simulate_one(cfg: &PopulationConfig, index: usize, seed: u64) -> (LabeledInstance, SimInstanceTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let topic = rng.gen_range(0..cfg.topics);
    let label = u8::from(rng.gen::<f64>() < cfg.label_prior);
    let mut votes = vec![0u8; cfg.k];
    let mut shared = Vec::with_capacity(cfg.cliques.len());
    for (c, members) in cfg.cliques.iter().enumerate() {
        let sv = vote_for(label, rng.gen::<f64>() < cfg.clique_accuracy(c, topic));
        shared.push(sv);
        for &j in members {
            // Both draws are always taken so the stream layout is fixed.
            let copy = rng.gen::<f64>() < cfg.rho[c];
            let own = vote_for(label, rng.gen::<f64>() < cfg.acc[j][topic]);
            votes[j] = if copy { sv } else { own };
        }
    }
    let mut embedding = vec![0.0; cfg.embed_dim];
    embedding[topic] = 1.0;
    if cfg.embed_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.embed_noise_sigma).expect("sigma validated");
        for e in embedding.iter_mut() {
            *e += noise.sample(&mut rng);
        }
    }
    let mut inst = LabeledInstance::new(format!("sim-{index}"), embedding, votes, label);
    inst.domain_tag = Some(format!("topic-{topic}"));
    (
        inst,
        SimInstanceTruth {
            topic,
            label,
            clique_shared_votes: shared,
        },
    )
}

/// Draws `n` instances; row `i` depends only on `(seed, i)`.
pub fn simulate(cfg: &PopulationConfig, n: usize, seed: u64) -> Result<(Dataset, Vec<SimInstanceTruth>)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let (rows, truth): (Vec<_>, Vec<_>) = (0..n)
        .into_par_iter()
        .map(|i| simulate_one(cfg, i, seed))
        .unzip();
    Ok((
        Dataset::new(cfg.embed_dim, cfg.k, cfg.judge_names(), rows)?,
        truth,
    ))
}

/// Exact `P(y = 1 | s, topic)` under the generative model.
///
/// Given the label, cliques are independent, so the likelihood factorizes into
/// a product over cliques of a two-term sum over that clique's shared vote.
/// This equals the full enumeration over all `2^{#cliques}` shared-vote
/// configurations.
pub fn bayes_oracle(cfg: &PopulationConfig, s: &[u8], topic: usize) -> Result<f64> {
    if topic >= cfg.topics {
        return Err(Error::InvalidArgument(format!(
            "topic {topic} out of range (topics = {})",
            cfg.topics
        )));
    }
    if s.len() != cfg.k {
        return Err(Error::Dimension {
            what: "votes",
            expected: cfg.k,
            actual: s.len(),
        });
    }
    let like = |y: u8| -> f64 {
        cfg.cliques
            .iter()
            .enumerate()
            .map(|(c, members)| {
                let a = cfg.clique_accuracy(c, topic);
                let rho = cfg.rho[c];
                [0u8, 1u8]
                    .iter()
                    .map(|&sv| {
                        let p_shared = if sv == y { a } else { 1.0 - a };
                        p_shared
                            * members
                                .iter()
                                .map(|&j| {
                                    let aj = cfg.acc[j][topic];
                                    let own = if s[j] == y { aj } else { 1.0 - aj };
                                    rho * f64::from(u8::from(s[j] == sv)) + (1.0 - rho) * own
                                })
                                .product::<f64>()
                    })
                    .sum::<f64>()
            })
            .product()
    };
    let l1 = cfg.label_prior * like(1);
    let l0 = (1.0 - cfg.label_prior) * like(0);
    if l0 + l1 == 0.0 {
        return Ok(cfg.label_prior);
    }
    Ok(l1 / (l0 + l1))
}

/// Oracle decisions (`P(y=1) > 0.5`) for a simulated dataset.
pub fn oracle_predictions(cfg: &PopulationConfig, ds: &Dataset, truth: &[SimInstanceTruth]) -> Result<Vec<u8>> {
    ds.instances()
        .iter()
        .zip(truth)
        .map(|(r, t)| Ok(u8::from(bayes_oracle(cfg, &r.votes, t.topic)? > 0.5)))
        .collect()
}

/// Topic index recorded in a simulated row's `domain` tag (`topic-<t>`).
pub fn topic_from_tag(inst: &LabeledInstance) -> Option<usize> {
    inst.domain_tag.as_deref()?.strip_prefix("topic-")?.parse().ok()
}

/// Oracle decisions for a simulated dataset read back from disk, using the
/// topic tags in place of the generation-time truth.
pub fn oracle_predictions_tagged(cfg: &PopulationConfig, ds: &Dataset) -> Result<Vec<u8>> {
    ds.instances()
        .iter()
        .map(|r| {
            let topic = topic_from_tag(r).ok_or_else(|| {
                Error::InvalidArgument(format!("row {:?} has no topic tag", r.id))
            })?;
            Ok(u8::from(bayes_oracle(cfg, &r.votes, topic)? > 0.5))
        })
        .collect()
}

/// Accuracy of the thresholded oracle on a fresh simulated set.
pub fn oracle_accuracy(cfg: &PopulationConfig, n: usize, seed: u64) -> Result<f64> {
    let (ds, truth) = simulate(cfg, n, seed)?;
    let preds = oracle_predictions(cfg, &ds, &truth)?;
    let hits = preds.iter().zip(&truth).filter(|(p, t)| **p == t.label).count();
    Ok(hits as f64 / n as f64)
}
