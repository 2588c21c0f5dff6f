//! Online inference: damped fixed-point refinement of the latent competence
//! means, Monte Carlo marginalization over the Gaussian posterior, and the
//! thresholded accept / fallback decision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{label_posterior_given_z, EnsembleParams, GateVector, PriorParams};
use crate::error::{Error, Result};
use crate::nn::{logistic, mix_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub iterations: usize,
    /// Damping α; must exceed 0.5.
    pub damping: f64,
    pub mc_samples: usize,
    pub convergence_tol: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl InferenceConfig {
    /// 10 fixed-point iterations, 256 samples.
    pub fn training() -> Self {
        InferenceConfig {
            iterations: 10,
            mc_samples: 256,
            ..Self::evaluation()
        }
    }

    /// 60 fixed-point iterations, 1024 samples.
    pub fn evaluation() -> Self {
        InferenceConfig {
            iterations: 60,
            damping: 0.7,
            mc_samples: 1024,
            convergence_tol: 1e-6,
            threshold: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
        }
        if !(self.damping > 0.5 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0.5, 1], got {}",
                self.damping
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidArgument("convergence_tol must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::evaluation()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_hat: f64,
    pub decision: u8,
    pub posterior: PosteriorState,
}

/// `v_i = 1 / (1/σ_i² + 1)`.
pub fn posterior_variance(sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    1.0 / (1.0 / s2 + 1.0)
}

/// `E_{y ~ P(y|Z)}[θ_λ,y]` with the label posterior evaluated at `z`.
pub fn expected_theta(params: &EnsembleParams, z: &[f64], g: &GateVector) -> f64 {
    let u: Vec<f64> = z.iter().zip(&g.0).map(|(a, b)| a * b).collect();
    let c = params.interaction.eval(&u);
    let p1 = logistic(params.theta_lambda() * c);
    p1 * params.theta_lambda1() + (1.0 - p1) * params.theta_lambda0()
}

/// Fixed-point refinement given an already evaluated prior and gate.
///
/// Each sweep computes
/// `μ_new,i = (μ_i(e_q)/σ_i² + θ_φ,i + W_φ,i s_i + g_i E[θ_λ,y]) / (1/σ_i² + 1)`
/// with the label expectation taken at the previous iterate, then damps
/// `μ ← α μ_new + (1-α) μ`. Stops once the largest coordinate change drops
/// below `cfg.convergence_tol`.
pub fn refine(
    params: &EnsembleParams,
    prior: &PriorParams,
    g: &GateVector,
    s: &[u8],
    cfg: &InferenceConfig,
) -> Result<PosteriorState> {
    let k = params.k();
    let alpha = cfg.damping;
    let v: Vec<f64> = prior.sigma.iter().map(|&s| posterior_variance(s)).collect();
    // Context and compatibility terms do not change across sweeps.
    let base: Vec<f64> = (0..k)
        .map(|i| {
            prior.mu[i] / prior.variance(i) + params.theta_phi[i] + params.w_phi[i] * f64::from(s[i])
        })
        .collect();
    let mut mu = prior.mu.clone();
    let mut converged = false;
    let mut iterations_run = 0;
    for t in 0..cfg.iterations {
        let e_theta = expected_theta(params, &mu, g);
        let mut max_change: f64 = 0.0;
        for i in 0..k {
            let target = (base[i] + g.0[i] * e_theta) * v[i];
            let next = alpha * target + (1.0 - alpha) * mu[i];
            if !next.is_finite() {
                return Err(Error::NonFinite { iteration: t + 1 });
            }
            max_change = max_change.max((next - mu[i]).abs());
            mu[i] = next;
        }
        iterations_run = t + 1;
        if max_change < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    Ok(PosteriorState {
        mu,
        v,
        iterations_run,
        converged,
    })
}

pub fn fixed_point_posterior(
    params: &EnsembleParams,
    s: &[u8],
    e_q: &[f64],
    cfg: &InferenceConfig,
) -> Result<PosteriorState> {
    cfg.validate()?;
    params.check_votes(s)?;
    let prior = params.prior_params(e_q)?;
    let g = params.gate(e_q)?;
    refine(params, &prior, &g, s, cfg)
}

/// `p̂ = (1/M) Σ_m logistic(θ_λ · f_int(g ⊙ z_m))`, `z_m = μ + √v ⊙ ε_m`, `ε_m ~ N(0, I)`.
///
/// Draws come from a ChaCha8 stream seeded with `seed`, sample-major.
pub fn mc_marginal(
    params: &EnsembleParams,
    post: &PosteriorState,
    g: &GateVector,
    samples: usize,
    seed: u64,
) -> f64 {
    let k = post.mu.len();
    let theta = params.theta_lambda();
    let sd: Vec<f64> = post.v.iter().map(|v| v.sqrt()).collect();
    // A point-mass posterior needs no sampling; averaging identical terms
    // would also drift from the plug-in value by rounding.
    if sd.iter().all(|s| *s == 0.0) {
        return label_posterior_given_z(params, &post.mu, g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; k];
    let mut h = vec![0.0; params.interaction.hidden];
    let mut total = 0.0;
    for _ in 0..samples {
        for i in 0..k {
            let eps: f64 = StandardNormal.sample(&mut rng);
            u[i] = g.0[i] * (post.mu[i] + sd[i] * eps);
        }
        total += logistic(theta * params.interaction.forward(&u, &mut h));
    }
    total / samples as f64
}

/// Accept (1) only when `p_hat` strictly exceeds `tau`; ties fall back to 0.
pub fn decide(p_hat: f64, tau: f64) -> u8 {
    u8::from(p_hat > tau)
}

pub fn infer(
    params: &EnsembleParams,
    e_q: &[f64],
    s: &[u8],
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    params.check_votes(s)?;
    let prior = params.prior_params(e_q)?;
    let g = params.gate(e_q)?;
    let posterior = refine(params, &prior, &g, s, cfg)?;
    let p_hat = mc_marginal(params, &posterior, &g, cfg.mc_samples, cfg.seed);
    Ok(Prediction {
        p_hat,
        decision: decide(p_hat, cfg.threshold),
        posterior,
    })
}

/// Seed used for row `index` of a batch; serial and parallel runs agree.
pub fn instance_seed(base: u64, index: usize) -> u64 {
    mix_seed(base, index as u64)
}

/// Runs [`infer`] on every row with per-row seeds derived from `cfg.seed`.
pub fn infer_dataset(
    params: &EnsembleParams,
    ds: &Dataset,
    cfg: &InferenceConfig,
) -> Result<Vec<Prediction>> {
    ds.instances()
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let cfg = InferenceConfig {
                seed: instance_seed(cfg.seed, i),
                ..*cfg
            };
            infer(params, &inst.embedding, &inst.votes, &cfg)
        })
        .collect()
}
