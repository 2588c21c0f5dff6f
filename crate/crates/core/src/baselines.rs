//! Decision-level comparison methods: majority vote, accuracy-weighted vote and
//! a query-gated neural aggregator (gate network over the embedding, then a
//! linear classifier on the gated votes).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledInstance};
use crate::energy::{Head, HeadCache};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, logistic, mix_seed, AdamW};

/// 1 iff strictly more than half of the votes are 1; ties fall back to 0.
pub fn majority_vote(s: &[u8]) -> u8 {
    let ones = s.iter().filter(|&&v| v != 0).count();
    u8::from(2 * ones > s.len())
}

/// Normalized, non-negative per-judge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

/// Accuracy floor applied before normalizing.
pub const WEIGHT_FLOOR: f64 = 0.01;

/// `w_i ∝ max(accuracy_i, 0.01)` on the labeled rows of `train`, summing to 1.
pub fn fit_weights(train: &Dataset) -> Result<WeightVector> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit weights on an empty dataset".into()));
    }
    let labels = train.labels()?;
    let n = train.len() as f64;
    let acc: Vec<f64> = (0..train.k())
        .map(|i| {
            let hits = train
                .instances()
                .iter()
                .zip(&labels)
                .filter(|(r, &y)| r.votes[i] == y)
                .count();
            (hits as f64 / n).max(WEIGHT_FLOOR)
        })
        .collect();
    Ok(weights_from_accuracies(&acc))
}

pub fn weights_from_accuracies(acc: &[f64]) -> WeightVector {
    let floored: Vec<f64> = acc.iter().map(|a| a.max(WEIGHT_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    WeightVector(floored.iter().map(|a| a / total).collect())
}

/// Relative margin below which yes/no vote mass counts as a tie.
const TIE_TOLERANCE: f64 = 1e-12;

/// 1 iff `Σ w_i s_i / Σ w_i > 0.5` strictly.
///
/// Yes and no mass are summed separately and compared with a relative
/// tolerance, so decimal weights such as 0.4 + 0.1 vs 0.2 + 0.15 + 0.15 tie
/// (and fall back to 0) instead of being decided by rounding.
pub fn weighted_vote(s: &[u8], w: &WeightVector) -> u8 {
    let (mut yes, mut no) = (0.0, 0.0);
    for (&v, &wi) in s.iter().zip(&w.0) {
        if v != 0 {
            yes += wi;
        } else {
            no += wi;
        }
    }
    u8::from(yes - no > TIE_TOLERANCE * (yes + no))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralAggConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// BCE weights for (negative, positive) rows.
    pub class_weights: (f64, f64),
    pub seed: u64,
}

impl Default for NeuralAggConfig {
    fn default() -> Self {
        NeuralAggConfig {
            hidden: 512,
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            class_weights: (1.0, 1.0),
            seed: 0,
        }
    }
}

/// Gate network `d -> hidden (ReLU) -> k (logistic)` and classifier `k -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralAggParams {
    pub gate: Head,
    pub w: Vec<f64>,
    pub b: f64,
}

impl NeuralAggParams {
    /// Random gate hidden and output layers, zero classifier.
    pub fn init(d: usize, k: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gate = Head::zeros(d, hidden, k, false);
        gate.w1 = fan_in_uniform(&mut rng, hidden, d);
        gate.w2 = fan_in_uniform(&mut rng, k, hidden);
        NeuralAggParams {
            gate,
            w: vec![0.0; k],
            b: 0.0,
        }
    }

    fn zeros_like(&self) -> Self {
        NeuralAggParams {
            gate: Head::zeros(self.gate.n_in, self.gate.hidden, self.gate.n_out, false),
            w: vec![0.0; self.w.len()],
            b: 0.0,
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.gate.w1,
            &self.gate.b1,
            &self.gate.w2,
            &self.gate.b2,
            &self.w,
            std::slice::from_ref(&self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.gate.w1,
            &mut self.gate.b1,
            &mut self.gate.w2,
            &mut self.gate.b2,
            &mut self.w,
            std::slice::from_mut(&mut self.b),
        ]
    }

    fn check(&self, e_q: &[f64], s: &[u8]) -> Result<()> {
        if e_q.len() != self.gate.n_in {
            return Err(Error::Dimension {
                what: "embedding",
                expected: self.gate.n_in,
                actual: e_q.len(),
            });
        }
        if s.len() != self.w.len() {
            return Err(Error::Dimension {
                what: "votes",
                expected: self.w.len(),
                actual: s.len(),
            });
        }
        Ok(())
    }
}

/// `p = logistic(w · (s ⊙ logistic(gate(e_q))) + b)`, decision `p > 0.5`.
pub fn neural_agg_infer(params: &NeuralAggParams, e_q: &[f64], s: &[u8]) -> Result<(f64, u8)> {
    params.check(e_q, s)?;
    let gates = params.gate.output(e_q);
    let z = params.b
        + s.iter()
            .zip(&gates)
            .zip(&params.w)
            .map(|((&v, &g), &w)| w * f64::from(v) * logistic(g))
            .sum::<f64>();
    let p = logistic(z);
    Ok((p, u8::from(p > 0.5)))
}

/// Weighted BCE on one row; accumulates gradients, returns the loss.
fn row_objective(
    params: &NeuralAggParams,
    row: &LabeledInstance,
    y: u8,
    class_weights: (f64, f64),
    grad: &mut NeuralAggParams,
) -> f64 {
    let mut cache = HeadCache::default();
    params.gate.forward(&row.embedding, None, &mut cache);
    let g: Vec<f64> = cache.out.iter().map(|&l| logistic(l)).collect();
    let x: Vec<f64> = row.votes.iter().zip(&g).map(|(&v, &gi)| f64::from(v) * gi).collect();
    let z = params.b + x.iter().zip(&params.w).map(|(a, b)| a * b).sum::<f64>();
    let p = logistic(z);
    let (weight, target) = if y == 1 {
        (class_weights.1, 1.0)
    } else {
        (class_weights.0, 0.0)
    };
    let pc = p.clamp(1e-12, 1.0 - 1e-12);
    let loss = -weight * (target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
    let dz = weight * (p - target);
    grad.b += dz;
    let mut dlogit = vec![0.0; g.len()];
    for i in 0..g.len() {
        grad.w[i] += dz * x[i];
        let dx = dz * params.w[i];
        dlogit[i] = dx * f64::from(row.votes[i]) * g[i] * (1.0 - g[i]);
    }
    params
        .gate
        .backward(&row.embedding, None, &cache, &dlogit, &mut grad.gate);
    loss
}

/// Mini-batch training with AdamW; deterministic given `cfg.seed`.
pub fn neural_agg_train(train: &Dataset, cfg: &NeuralAggConfig) -> Result<NeuralAggParams> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::InvalidArgument(
            "epochs, batch_size and hidden must be >= 1".into(),
        ));
    }
    let labels = train.labels()?;
    let mut params = NeuralAggParams::init(train.d(), train.k(), cfg.hidden, cfg.seed);
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let rows = train.instances();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            for &i in idx {
                loss += row_objective(&params, &rows[i], labels[i], cfg.class_weights, &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            let n = idx.len() as f64;
            let mut g = grad;
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|x| *x /= n);
            }
            opt.step(&mut params.tensors_mut(), &g.tensors());
        }
    }
    Ok(params)
}
