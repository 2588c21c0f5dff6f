//! End-to-end training of the latent ensemble.
//!
//! The objective per instance is a label-smoothed focal BCE on the Monte Carlo
//! marginal `p̂` plus an annealed KL term pulling the refined posterior towards
//! the query-conditioned prior. Gradients are computed by a hand-written reverse
//! pass through the reparameterized samples and through every unrolled
//! fixed-point sweep; [`grad_check`] compares them with central differences.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledInstance};
use crate::energy::{EnsembleParams, HeadCache, ModelDims, PriorParams};
use crate::error::{Error, Result};
use crate::inference::{infer_dataset, posterior_variance, InferenceConfig, PosteriorState};
use crate::metrics::evaluate;
use crate::nn::{logistic, mix_seed, softplus, AdamW};

/// Bound applied to `p̂` before taking logs.
pub const P_CLAMP: f64 = 1e-7;

/// Instances per gradient-accumulation chunk; chunks are reduced in order so the
/// summed gradient does not depend on the thread count.
const CHUNK: usize = 16;

/// Missing fields take their [`Default`] values when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub label_smoothing: f64,
    /// Plateau weight of the KL term. The focal term is small (about 0.087 at
    /// `p̂ = 0.5`), so weights near 1 let the KL term pin the posterior to the
    /// prior and the votes stop mattering.
    pub kl_beta_max: f64,
    pub kl_warmup_epochs: usize,
    /// Dropout on the hidden layers of the three amortized heads.
    pub dropout: f64,
    pub hidden: usize,
    pub hidden_int: usize,
    pub epsilon: f64,
    /// Fixed-point sweeps and sample count used inside the training objective.
    /// The sweep count is always run in full (no early stop) so the objective is smooth.
    pub inference: InferenceConfig,
    /// Settings for the per-epoch evaluation pass.
    pub eval_inference: InferenceConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            label_smoothing: 0.1,
            kl_beta_max: 0.01,
            kl_warmup_epochs: 20,
            dropout: 0.3,
            hidden: crate::energy::DEFAULT_HIDDEN,
            hidden_int: crate::energy::DEFAULT_HIDDEN_INT,
            epsilon: crate::energy::DEFAULT_EPSILON,
            inference: InferenceConfig::training(),
            eval_inference: InferenceConfig::evaluation(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal_alpha must lie in (0, 1]");
        }
        if !(self.label_smoothing >= 0.0 && self.label_smoothing < 0.5) {
            return bad("label_smoothing must lie in [0, 0.5)");
        }
        if !(self.kl_beta_max >= 0.0) {
            return bad("kl_beta_max must be >= 0");
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return bad("dropout must lie in [0, 1)");
        }
        self.inference.validate()?;
        self.eval_inference.validate()
    }

    pub fn model_dims(&self, d: usize, k: usize) -> ModelDims {
        ModelDims {
            d,
            k,
            hidden: self.hidden,
            hidden_int: self.hidden_int,
            epsilon: self.epsilon,
        }
    }

    /// KL weight for a zero-based epoch index: linear warmup to `kl_beta_max`.
    pub fn kl_beta(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            return self.kl_beta_max;
        }
        self.kl_beta_max * (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
    }
}

/// Focal BCE with a label-smoothed target
/// `ỹ = y(1-ε) + (1-y)ε`:
/// `-α [ỹ (1-p)^γ ln p + (1-ỹ) p^γ ln(1-p)]`, with `p` clamped to `[1e-7, 1-1e-7]`.
pub fn focal_bce(p_hat: f64, y: u8, gamma: f64, alpha: f64, eps_ls: f64) -> f64 {
    focal_bce_with_grad(p_hat, y, gamma, alpha, eps_ls).0
}

/// Loss and `d loss / d p_hat` (zero where the clamp is active).
pub fn focal_bce_with_grad(p_hat: f64, y: u8, gamma: f64, alpha: f64, eps_ls: f64) -> (f64, f64) {
    let clamped = p_hat.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let p = clamped;
    let yt = if y == 1 { 1.0 - eps_ls } else { eps_ls };
    let q = 1.0 - p;
    let (lp, lq) = (p.ln(), q.ln());
    let (qg, pg) = (q.powf(gamma), p.powf(gamma));
    let loss = -alpha * (yt * qg * lp + (1.0 - yt) * pg * lq);
    if clamped != p_hat {
        return (loss, 0.0);
    }
    let d_pos = if gamma == 0.0 {
        1.0 / p
    } else {
        -gamma * q.powf(gamma - 1.0) * lp + qg / p
    };
    let d_neg = if gamma == 0.0 {
        -1.0 / q
    } else {
        gamma * p.powf(gamma - 1.0) * lq - pg / q
    };
    (loss, -alpha * (yt * d_pos + (1.0 - yt) * d_neg))
}

/// `KL(N(μ, diag v) ‖ N(μ_prior, diag σ²))`.
pub fn kl_regularizer(post: &PosteriorState, prior: &PriorParams) -> f64 {
    (0..post.mu.len())
        .map(|i| {
            let s2 = prior.variance(i);
            let v = post.v[i];
            let dm = post.mu[i] - prior.mu[i];
            0.5 * (v / s2 + dm * dm / s2 - 1.0 + (s2 / v).ln())
        })
        .sum()
}

/// Stable 64-bit FNV-1a of an instance id; keeps per-instance noise tied to the
/// row rather than its position in a batch.
fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn noise_seed(cfg: &TrainConfig, epoch: usize, inst: &LabeledInstance) -> u64 {
    mix_seed(mix_seed(cfg.seed, epoch as u64), id_hash(&inst.id))
}

struct Objective {
    loss: f64,
    p_hat: f64,
}

/// Training-time forward pass for one instance; accumulates `d loss / d params`
/// into `grad` when given.
fn instance_objective(
    params: &EnsembleParams,
    inst: &LabeledInstance,
    y: u8,
    cfg: &TrainConfig,
    beta: f64,
    seed: u64,
    grad: Option<&mut EnsembleParams>,
) -> Objective {
    let k = params.k();
    let h_int = params.interaction.hidden;
    let icfg = &cfg.inference;
    let (iters, m_samples, alpha) = (icfg.iterations, icfg.mc_samples, icfg.damping);
    let x = inst.embedding.as_slice();
    let s = inst.votes.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let masks: Option<[Vec<f64>; 3]> = (cfg.dropout > 0.0).then(|| {
        let keep = 1.0 / (1.0 - cfg.dropout);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < cfg.dropout { 0.0 } else { keep })
                .collect()
        };
        [
            draw(params.mu_net.hidden),
            draw(params.sigma_net.hidden),
            draw(params.gate_net.hidden),
        ]
    });
    let mask = |i: usize| masks.as_ref().map(|m| m[i].as_slice());

    let (mut cm, mut cs, mut cg) = (HeadCache::default(), HeadCache::default(), HeadCache::default());
    params.mu_net.forward(x, mask(0), &mut cm);
    params.sigma_net.forward(x, mask(1), &mut cs);
    params.gate_net.forward(x, mask(2), &mut cg);

    let mp = &cm.out;
    let sigma: Vec<f64> = cs.out.iter().map(|&r| softplus(r) + params.dims.epsilon).collect();
    let s2: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let v: Vec<f64> = sigma.iter().map(|&s| posterior_variance(s)).collect();
    let sd: Vec<f64> = v.iter().map(|v| v.sqrt()).collect();
    let g: Vec<f64> = cg.out.iter().map(|&l| logistic(l)).collect();
    let (th0, th1) = (params.theta_lambda0(), params.theta_lambda1());
    let theta = params.theta_lambda();

    let base: Vec<f64> = (0..k)
        .map(|i| mp[i] / s2[i] + params.theta_phi[i] + params.w_phi[i] * f64::from(s[i]))
        .collect();

    // Unrolled sweeps: trajectory, consensus and label posterior per sweep.
    let mut traj: Vec<Vec<f64>> = Vec::with_capacity(iters + 1);
    traj.push(mp.clone());
    let mut sweep_hidden = vec![0.0; iters * h_int];
    let mut sweep_c = vec![0.0; iters];
    let mut sweep_p = vec![0.0; iters];
    let mut u = vec![0.0; k];
    for t in 0..iters {
        let mu = &traj[t];
        for i in 0..k {
            u[i] = mu[i] * g[i];
        }
        let c = params
            .interaction
            .forward(&u, &mut sweep_hidden[t * h_int..(t + 1) * h_int]);
        let p1 = logistic(theta * c);
        let e = p1 * th1 + (1.0 - p1) * th0;
        sweep_c[t] = c;
        sweep_p[t] = p1;
        let next: Vec<f64> = (0..k)
            .map(|i| alpha * ((base[i] + g[i] * e) * v[i]) + (1.0 - alpha) * mu[i])
            .collect();
        traj.push(next);
    }
    let mu = traj[iters].clone();

    // Reparameterized samples.
    let mut eps = vec![0.0; m_samples * k];
    let mut sample_u = vec![0.0; m_samples * k];
    let mut sample_hidden = vec![0.0; m_samples * h_int];
    let mut sample_c = vec![0.0; m_samples];
    let mut sample_q = vec![0.0; m_samples];
    let mut total = 0.0;
    for m in 0..m_samples {
        for i in 0..k {
            let e: f64 = StandardNormal.sample(&mut rng);
            eps[m * k + i] = e;
            sample_u[m * k + i] = g[i] * (mu[i] + sd[i] * e);
        }
        let c = params.interaction.forward(
            &sample_u[m * k..(m + 1) * k],
            &mut sample_hidden[m * h_int..(m + 1) * h_int],
        );
        let q = logistic(theta * c);
        sample_c[m] = c;
        sample_q[m] = q;
        total += q;
    }
    let p_hat = total / m_samples as f64;

    let (focal, dp_hat) = focal_bce_with_grad(
        p_hat,
        y,
        cfg.focal_gamma,
        cfg.focal_alpha,
        cfg.label_smoothing,
    );
    let kl: f64 = (0..k)
        .map(|i| {
            let dm = mu[i] - mp[i];
            0.5 * (v[i] / s2[i] + dm * dm / s2[i] - 1.0 + (s2[i] / v[i]).ln())
        })
        .sum();
    let loss = focal + beta * kl;

    let Some(grad) = grad else {
        return Objective { loss, p_hat };
    };

    let mut d_mu = vec![0.0; k];
    let mut d_g = vec![0.0; k];
    let mut d_v = vec![0.0; k];
    let mut d_sd = vec![0.0; k];
    let mut d_s2 = vec![0.0; k];
    let mut d_mp = vec![0.0; k];
    let mut d_base = vec![0.0; k];
    let (mut d_theta, mut d_th0, mut d_th1) = (0.0, 0.0, 0.0);
    let mut du = vec![0.0; k];

    if dp_hat != 0.0 {
        let dq = dp_hat / m_samples as f64;
        for m in 0..m_samples {
            let q = sample_q[m];
            let dlogit = dq * q * (1.0 - q);
            d_theta += dlogit * sample_c[m];
            du.iter_mut().for_each(|x| *x = 0.0);
            let um = &sample_u[m * k..(m + 1) * k];
            params.interaction.backward(
                um,
                &sample_hidden[m * h_int..(m + 1) * h_int],
                dlogit * theta,
                &mut grad.interaction,
                &mut du,
            );
            for i in 0..k {
                let z = mu[i] + sd[i] * eps[m * k + i];
                d_g[i] += du[i] * z;
                let dz = du[i] * g[i];
                d_mu[i] += dz;
                d_sd[i] += dz * eps[m * k + i];
            }
        }
    }
    if beta != 0.0 {
        for i in 0..k {
            let dm = mu[i] - mp[i];
            d_mu[i] += beta * dm / s2[i];
            d_mp[i] -= beta * dm / s2[i];
            d_v[i] += beta * 0.5 * (1.0 / s2[i] - 1.0 / v[i]);
            d_s2[i] += beta * 0.5 * (1.0 / s2[i] - (v[i] + dm * dm) / (s2[i] * s2[i]));
        }
    }
    for i in 0..k {
        if sd[i] > 0.0 {
            d_v[i] += d_sd[i] / (2.0 * sd[i]);
        }
    }

    // Reverse through the sweeps.
    for t in (0..iters).rev() {
        let mu_t = &traj[t];
        let p1 = sweep_p[t];
        let e = p1 * th1 + (1.0 - p1) * th0;
        let mut d_e = 0.0;
        for i in 0..k {
            let d_next = alpha * d_mu[i];
            d_mu[i] *= 1.0 - alpha;
            d_base[i] += d_next * v[i];
            d_v[i] += d_next * (base[i] + g[i] * e);
            d_g[i] += d_next * e * v[i];
            d_e += d_next * g[i] * v[i];
        }
        d_th1 += d_e * p1;
        d_th0 += d_e * (1.0 - p1);
        let dlogit = d_e * (th1 - th0) * p1 * (1.0 - p1);
        d_theta += dlogit * sweep_c[t];
        for i in 0..k {
            u[i] = mu_t[i] * g[i];
        }
        du.iter_mut().for_each(|x| *x = 0.0);
        params.interaction.backward(
            &u,
            &sweep_hidden[t * h_int..(t + 1) * h_int],
            dlogit * theta,
            &mut grad.interaction,
            &mut du,
        );
        for i in 0..k {
            d_g[i] += du[i] * mu_t[i];
            d_mu[i] += du[i] * g[i];
        }
    }
    for i in 0..k {
        d_mp[i] += d_mu[i];
        d_mp[i] += d_base[i] / s2[i];
        d_s2[i] -= d_base[i] * mp[i] / (s2[i] * s2[i]);
        grad.theta_phi[i] += d_base[i];
        grad.w_phi[i] += d_base[i] * f64::from(s[i]);
        let one_plus = 1.0 + s2[i];
        d_s2[i] += d_v[i] / (one_plus * one_plus);
    }
    d_th0 += d_theta;
    d_th1 -= d_theta;
    grad.a0 += d_th0 * -logistic(params.a0);
    grad.a1 += d_th1 * logistic(params.a1);

    let d_raw_sigma: Vec<f64> = (0..k)
        .map(|i| d_s2[i] * 2.0 * sigma[i] * logistic(cs.out[i]))
        .collect();
    let d_gate_logit: Vec<f64> = (0..k).map(|i| d_g[i] * g[i] * (1.0 - g[i])).collect();
    params.mu_net.backward(x, mask(0), &cm, &d_mp, &mut grad.mu_net);
    params
        .sigma_net
        .backward(x, mask(1), &cs, &d_raw_sigma, &mut grad.sigma_net);
    params
        .gate_net
        .backward(x, mask(2), &cg, &d_gate_logit, &mut grad.gate_net);

    Objective { loss, p_hat }
}

struct BatchResult {
    loss: f64,
    grads: Option<EnsembleParams>,
    p_hats: Vec<f64>,
}

fn batch_objective(
    params: &EnsembleParams,
    batch: &[&LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
    with_grad: bool,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let beta = cfg.kl_beta(epoch);
    let chunks: Vec<(f64, Option<EnsembleParams>, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = with_grad.then(|| params.zeros_like());
            let mut loss = 0.0;
            let mut p_hats = Vec::with_capacity(chunk.len());
            for inst in chunk {
                let y = inst.label.ok_or_else(|| {
                    Error::InvalidArgument(format!("instance {:?} has no label", inst.id))
                })?;
                params.check_embedding(&inst.embedding)?;
                params.check_votes(&inst.votes)?;
                let obj = instance_objective(
                    params,
                    inst,
                    y,
                    cfg,
                    beta,
                    noise_seed(cfg, epoch, inst),
                    grad.as_mut(),
                );
                if !obj.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        id: inst.id.clone(),
                    });
                }
                loss += obj.loss;
                p_hats.push(obj.p_hat);
            }
            Ok((loss, grad, p_hats))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = with_grad.then(|| params.zeros_like());
    let mut p_hats = Vec::with_capacity(batch.len());
    for (l, g, p) in chunks {
        loss += l;
        if let (Some(total), Some(g)) = (grads.as_mut(), g.as_ref()) {
            total.add_scaled(g, 1.0);
        }
        p_hats.extend(p);
    }
    if let Some(g) = grads.as_mut() {
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(BatchResult {
        loss: loss / n,
        grads,
        p_hats,
    })
}

/// Mean objective over `batch` at zero-based `epoch` and its gradient.
pub fn loss_on_batch(
    params: &EnsembleParams,
    batch: &[LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, EnsembleParams)> {
    let refs: Vec<&LabeledInstance> = batch.iter().collect();
    let r = batch_objective(params, &refs, cfg, epoch, true)?;
    Ok((r.loss, r.grads.expect("gradient requested")))
}

/// Mean objective only.
pub fn loss_value(
    params: &EnsembleParams,
    batch: &[LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let refs: Vec<&LabeledInstance> = batch.iter().collect();
    Ok(batch_objective(params, &refs, cfg, epoch, false)?.loss)
}

/// Training-time `p̂` for each row (same noise as the objective).
pub fn training_predictions(
    params: &EnsembleParams,
    batch: &[LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<f64>> {
    let refs: Vec<&LabeledInstance> = batch.iter().collect();
    Ok(batch_objective(params, &refs, cfg, epoch, false)?.p_hats)
}

/// Compares analytic gradients with central differences on `n_coords` randomly
/// chosen coordinates; returns the largest `|a - f| / max(|a|, |f|, 1e-8)`.
///
/// Coordinates whose `±step_h` probe flips the sign of any ReLU pre-activation
/// are skipped (the loss is not differentiable across the kink) and replaced by
/// further random coordinates.
pub fn grad_check(
    params: &EnsembleParams,
    batch: &[LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
    step_h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    Ok(grad_check_detailed(params, batch, cfg, epoch, step_h, n_coords, seed)?
        .iter()
        .filter(|c| !c.crosses_kink)
        .map(|c| c.relative_error())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub crosses_kink: bool,
}

impl CoordinateCheck {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
            / self.analytic.abs().max(self.numeric.abs()).max(1e-8)
    }
}

/// Signs of every head pre-activation over the batch.
fn relu_pattern(params: &EnsembleParams, batch: &[LabeledInstance]) -> Vec<bool> {
    let mut out = Vec::new();
    let mut cache = HeadCache::default();
    for inst in batch {
        for head in [&params.mu_net, &params.sigma_net, &params.gate_net] {
            head.forward(&inst.embedding, None, &mut cache);
            out.extend(cache.pre.iter().map(|&a| a > 0.0));
        }
    }
    out
}

/// Per-coordinate results of [`grad_check`], including skipped kink crossings.
/// Stops once `n_coords` differentiable coordinates have been checked.
pub fn grad_check_detailed(
    params: &EnsembleParams,
    batch: &[LabeledInstance],
    cfg: &TrainConfig,
    epoch: usize,
    step_h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<Vec<CoordinateCheck>> {
    let (_, grads) = loss_on_batch(params, batch, cfg, epoch)?;
    let names: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut coords: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, len))| (0..*len).map(move |o| (ti, o)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);

    let base_pattern = relu_pattern(params, batch);
    let grad_tensors = grads.tensors();
    let mut out = Vec::new();
    let mut valid = 0;
    let mut probe = params.clone();
    for (ti, offset) in coords {
        if valid >= n_coords {
            break;
        }
        let orig = params.tensors()[ti].1[offset];
        probe.tensors_mut()[ti][offset] = orig + step_h;
        let plus = loss_value(&probe, batch, cfg, epoch)?;
        let mut crosses_kink = relu_pattern(&probe, batch) != base_pattern;
        probe.tensors_mut()[ti][offset] = orig - step_h;
        let minus = loss_value(&probe, batch, cfg, epoch)?;
        crosses_kink |= relu_pattern(&probe, batch) != base_pattern;
        probe.tensors_mut()[ti][offset] = orig;
        valid += usize::from(!crosses_kink);
        out.push(CoordinateCheck {
            tensor: names[ti].0.clone(),
            offset,
            analytic: grad_tensors[ti].1[offset],
            numeric: (plus - minus) / (2.0 * step_h),
            crosses_kink,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_hallucination: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// One-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub optimizer: String,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        fn opt(x: Option<f64>) -> String {
            x.map_or_else(|| "undefined".to_string(), |v| v.to_string())
        }
        writeln!(w, "# optimizer: {}", self.optimizer)?;
        writeln!(w, "epoch,train_loss,train_acc,eval_acc,eval_hallu")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.eval_accuracy),
                opt(r.eval_hallucination)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// Candidate ranking: higher eval accuracy, then lower hallucination, then earlier epoch.
fn better(candidate: &EpochRecord, best: &EpochRecord) -> bool {
    let acc = |r: &EpochRecord| r.eval_accuracy.unwrap_or(f64::NEG_INFINITY);
    let hallu = |r: &EpochRecord| r.eval_hallucination.unwrap_or(f64::INFINITY);
    if acc(candidate) != acc(best) {
        return acc(candidate) > acc(best);
    }
    hallu(candidate) < hallu(best)
}

/// Trains from a fresh seeded initialization. Returns the parameters of the best
/// epoch on `eval_set` (the last epoch when `eval_set` is empty) and the report.
pub fn train(
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EnsembleParams, TrainReport)> {
    let params = EnsembleParams::init(cfg.model_dims(train_set.d(), train_set.k()), cfg.seed)?;
    train_from(params, train_set, eval_set, cfg)
}

pub fn train_from(
    mut params: EnsembleParams,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EnsembleParams, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if !eval_set.is_empty() && (eval_set.d() != train_set.d() || eval_set.k() != train_set.k()) {
        return Err(Error::InvalidArgument(format!(
            "train (d={}, k={}) and eval (d={}, k={}) datasets disagree",
            train_set.d(),
            train_set.k(),
            eval_set.d(),
            eval_set.k()
        )));
    }
    let train_labels = train_set.labels()?;
    let eval_labels = eval_set.labels()?;
    params.check_embedding(&vec![0.0; train_set.d()])?;

    let start = Instant::now();
    let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &shapes);
    let optimizer = format!(
        "AdamW(lr={}, betas=({}, {}), eps={}, weight_decay={})",
        opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let rows = train_set.instances();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EpochRecord, EnsembleParams)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledInstance> = idx.iter().map(|&i| &rows[i]).collect();
            let r = batch_objective(&params, &batch, cfg, epoch, true).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                },
                other => other,
            })?;
            loss_sum += r.loss * idx.len() as f64;
            correct += idx
                .iter()
                .zip(&r.p_hats)
                .filter(|(&i, &p)| u8::from(p > cfg.inference.threshold) == train_labels[i])
                .count();
            let grads = r.grads.expect("gradient requested");
            let grad_refs = grads.tensors();
            let grad_slices: Vec<&[f64]> = grad_refs.iter().map(|(_, t)| *t).collect();
            opt.step(&mut params.tensors_mut(), &grad_slices);
            if params.tensors().iter().any(|(_, t)| t.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
        }

        let (eval_accuracy, eval_hallucination) = if eval_set.is_empty() {
            (None, None)
        } else {
            let preds: Vec<u8> = infer_dataset(&params, eval_set, &cfg.eval_inference)?
                .into_iter()
                .map(|p| p.decision)
                .collect();
            let report = evaluate(&preds, &eval_labels)?;
            (Some(report.accuracy), report.hallucination)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            eval_accuracy,
            eval_hallucination,
        };
        let take = match &best {
            None => true,
            Some(_) if eval_set.is_empty() => true,
            Some((b, _)) => better(&record, b),
        };
        if take {
            best = Some((record.clone(), params.clone()));
        }
        records.push(record);
    }
    let (best_record, best_params) = best.expect("at least one epoch");
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch: best_record.epoch,
            optimizer,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
