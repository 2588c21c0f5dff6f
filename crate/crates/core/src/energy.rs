//! Parameterization of the ensemble energy
//! `E(y, Z; s, e_q) = Φ(Z; e_q) + Λ(s, Z) + Ψ(y, Z; e_q)`.
//!
//! Three amortized heads read the query embedding: `f_mu` (prior means),
//! `f_sigma` (prior standard deviations through `softplus + ε`) and `f_gate`
//! (per-judge gates through the logistic). A small interaction network
//! `f_int` turns the gated latent vector into the scalar consensus score `c`.
//! The label couplings are kept sign-constrained by construction:
//! `θ_λ,0 = -softplus(a0) < 0 < softplus(a1) = θ_λ,1`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{affine, fan_in_uniform, inverse_softplus, logistic, softplus};

pub const PARAMS_SCHEMA: &str = "ral2m-params-v1";
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_HIDDEN_INT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub hidden_int: usize,
    pub epsilon: f64,
}

impl ModelDims {
    pub fn new(d: usize, k: usize) -> Self {
        ModelDims {
            d,
            k,
            hidden: DEFAULT_HIDDEN,
            hidden_int: DEFAULT_HIDDEN_INT,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One-hidden-layer ReLU network `d -> hidden -> k`.
///
/// When `gain` is present the output layer is weight-normalized: row `j` of the
/// effective weight matrix is `gain[j] * w2[j] / |w2[j]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub gain: Option<Vec<f64>>,
    pub b2: Vec<f64>,
}

/// Forward-pass intermediates kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
    pub w_eff: Vec<f64>,
    pub norms: Vec<f64>,
}

impl Head {
    pub fn zeros(n_in: usize, hidden: usize, n_out: usize, weight_norm: bool) -> Self {
        Head {
            n_in,
            hidden,
            n_out,
            w1: vec![0.0; hidden * n_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_out * hidden],
            gain: weight_norm.then(|| vec![0.0; n_out]),
            b2: vec![0.0; n_out],
        }
    }

    /// Writes the effective output weights and the row norms of `w2`.
    pub fn effective_output(&self, w_eff: &mut Vec<f64>, norms: &mut Vec<f64>) {
        w_eff.clear();
        norms.clear();
        match &self.gain {
            None => w_eff.extend_from_slice(&self.w2),
            Some(gain) => {
                for j in 0..self.n_out {
                    let row = &self.w2[j * self.hidden..(j + 1) * self.hidden];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    norms.push(norm);
                    let scale = if norm > 0.0 { gain[j] / norm } else { 0.0 };
                    w_eff.extend(row.iter().map(|x| x * scale));
                }
            }
        }
    }

    /// `mask` scales hidden activations (inverted dropout); `None` at inference.
    pub fn forward(&self, x: &[f64], mask: Option<&[f64]>, cache: &mut HeadCache) {
        cache.pre.resize(self.hidden, 0.0);
        cache.hidden.resize(self.hidden, 0.0);
        cache.out.resize(self.n_out, 0.0);
        affine(&self.w1, &self.b1, x, &mut cache.pre);
        for (h, &a) in cache.hidden.iter_mut().zip(&cache.pre) {
            *h = a.max(0.0);
        }
        if let Some(mask) = mask {
            for (h, m) in cache.hidden.iter_mut().zip(mask) {
                *h *= m;
            }
        }
        let mut w_eff = std::mem::take(&mut cache.w_eff);
        let mut norms = std::mem::take(&mut cache.norms);
        self.effective_output(&mut w_eff, &mut norms);
        affine(&w_eff, &self.b2, &cache.hidden, &mut cache.out);
        cache.w_eff = w_eff;
        cache.norms = norms;
    }

    /// Accumulates parameter gradients into `grad` given `dL/d out`.
    pub fn backward(
        &self,
        x: &[f64],
        mask: Option<&[f64]>,
        cache: &HeadCache,
        dout: &[f64],
        grad: &mut Head,
    ) {
        let h = self.hidden;
        let mut dhidden = vec![0.0; h];
        for (j, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[j] += g;
            let w_row = &cache.w_eff[j * h..(j + 1) * h];
            for (dh, &w) in dhidden.iter_mut().zip(w_row) {
                *dh += g * w;
            }
            match (&self.gain, grad.gain.as_mut()) {
                (Some(gain), Some(dgain)) => {
                    let norm = cache.norms[j];
                    if norm == 0.0 {
                        continue;
                    }
                    let v_row = &self.w2[j * h..(j + 1) * h];
                    // dW_eff row = g * hidden; project onto / off the direction.
                    let along: f64 = v_row
                        .iter()
                        .zip(&cache.hidden)
                        .map(|(v, hv)| v * hv)
                        .sum::<f64>()
                        / norm;
                    dgain[j] += g * along;
                    let scale = gain[j] / norm;
                    let dv_row = &mut grad.w2[j * h..(j + 1) * h];
                    for ((dv, &hv), &v) in dv_row.iter_mut().zip(&cache.hidden).zip(v_row) {
                        *dv += scale * g * (hv - along * v / norm);
                    }
                }
                _ => {
                    let dw_row = &mut grad.w2[j * h..(j + 1) * h];
                    for (dw, &hv) in dw_row.iter_mut().zip(&cache.hidden) {
                        *dw += g * hv;
                    }
                }
            }
        }
        if let Some(mask) = mask {
            for (dh, m) in dhidden.iter_mut().zip(mask) {
                *dh *= m;
            }
        }
        for (i, dh) in dhidden.iter_mut().enumerate() {
            if cache.pre[i] <= 0.0 {
                *dh = 0.0;
            }
        }
        crate::nn::affine_backward(&self.w1, x, &dhidden, &mut grad.w1, &mut grad.b1, None);
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = HeadCache::default();
        self.forward(x, None, &mut cache);
        cache.out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Linear hidden layer; used to build analytically tractable consensus maps.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// The consensus network `f_int: R^k -> R`, one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub k: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Interaction {
    fn zeros(k: usize, hidden: usize) -> Self {
        Interaction {
            k,
            hidden,
            activation: Activation::Tanh,
            w1: vec![0.0; hidden * k],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Returns `c` and leaves the hidden activations in `h` (length `hidden`).
    pub fn forward(&self, u: &[f64], h: &mut [f64]) -> f64 {
        let k = self.k;
        let mut c = self.b2;
        for j in 0..self.hidden {
            let row = &self.w1[j * k..(j + 1) * k];
            let a = self.b1[j] + row.iter().zip(u).map(|(w, x)| w * x).sum::<f64>();
            let y = self.activation.apply(a);
            h[j] = y;
            c += self.w2[j] * y;
        }
        c
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut h = vec![0.0; self.hidden];
        self.forward(u, &mut h)
    }

    /// Accumulates parameter gradients and `du += dc * dc/du`.
    pub fn backward(&self, u: &[f64], h: &[f64], dc: f64, grad: &mut Interaction, du: &mut [f64]) {
        if dc == 0.0 {
            return;
        }
        let k = self.k;
        grad.b2 += dc;
        for j in 0..self.hidden {
            grad.w2[j] += dc * h[j];
            let da = dc * self.w2[j] * self.activation.derivative_from_output(h[j]);
            if da == 0.0 {
                continue;
            }
            grad.b1[j] += da;
            let row = &self.w1[j * k..(j + 1) * k];
            let grow = &mut grad.w1[j * k..(j + 1) * k];
            for i in 0..k {
                grow[i] += da * u[i];
                du[i] += da * row[i];
            }
        }
    }
}

/// All learnable parameters of the latent ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    pub dims: ModelDims,
    pub mu_net: Head,
    pub sigma_net: Head,
    pub gate_net: Head,
    pub interaction: Interaction,
    pub theta_phi: Vec<f64>,
    pub w_phi: Vec<f64>,
    pub a0: f64,
    pub a1: f64,
}

/// Prior mean and standard deviation of the latent competences for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PriorParams {
    pub fn variance(&self, i: usize) -> f64 {
        self.sigma[i] * self.sigma[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector(pub Vec<f64>);

impl GateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn unit_rows(mut w: Vec<f64>, cols: usize) -> Vec<f64> {
    for row in w.chunks_mut(cols) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    w
}

impl EnsembleParams {
    /// All-zero parameters (also the gradient accumulator layout).
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            d,
            k,
            hidden,
            hidden_int,
            ..
        } = dims;
        EnsembleParams {
            dims,
            mu_net: Head::zeros(d, hidden, k, true),
            sigma_net: Head::zeros(d, hidden, k, true),
            gate_net: Head::zeros(d, hidden, k, false),
            interaction: Interaction::zeros(k, hidden_int),
            theta_phi: vec![0.0; k],
            w_phi: vec![0.0; k],
            a0: 0.0,
            a1: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = EnsembleParams::zeros(self.dims);
        z.interaction.activation = self.interaction.activation;
        z
    }

    /// Seeded initialization. Hidden layers are fan-in uniform; every output
    /// layer (including the consensus network's) starts at zero so a fresh
    /// model predicts exactly 0.5 everywhere.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.d == 0 || dims.k == 0 || dims.hidden == 0 || dims.hidden_int == 0 {
            return Err(Error::InvalidArgument(format!(
                "all model dimensions must be >= 1: {dims:?}"
            )));
        }
        if !(dims.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EnsembleParams::zeros(dims);
        let (d, k, h) = (dims.d, dims.k, dims.hidden);
        for head in [&mut p.mu_net, &mut p.sigma_net, &mut p.gate_net] {
            head.w1 = fan_in_uniform(&mut rng, h, d);
        }
        // Directions must be non-zero for the normalization; gains of zero keep
        // the effective weights at zero. Unit-norm rows keep the curvature of the
        // scale-invariant direction parameters moderate.
        p.mu_net.w2 = unit_rows(fan_in_uniform(&mut rng, k, h), h);
        p.sigma_net.w2 = unit_rows(fan_in_uniform(&mut rng, k, h), h);
        p.interaction.w1 = fan_in_uniform(&mut rng, dims.hidden_int, k);
        let a = inverse_softplus(1.0);
        p.a0 = a;
        p.a1 = a;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.dims.d
    }

    pub fn k(&self) -> usize {
        self.dims.k
    }

    pub fn theta_lambda0(&self) -> f64 {
        -softplus(self.a0)
    }

    pub fn theta_lambda1(&self) -> f64 {
        softplus(self.a1)
    }

    /// `θ_λ,0 - θ_λ,1`: `logistic(θ_λ · c)` is the two-label posterior `P(y=1 | Z)`.
    pub fn theta_lambda(&self) -> f64 {
        self.theta_lambda0() - self.theta_lambda1()
    }

    pub fn check_embedding(&self, e_q: &[f64]) -> Result<()> {
        if e_q.len() != self.dims.d {
            return Err(Error::Dimension {
                what: "embedding",
                expected: self.dims.d,
                actual: e_q.len(),
            });
        }
        Ok(())
    }

    pub fn check_votes(&self, s: &[u8]) -> Result<()> {
        if s.len() != self.dims.k {
            return Err(Error::Dimension {
                what: "votes",
                expected: self.dims.k,
                actual: s.len(),
            });
        }
        if let Some(v) = s.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("vote value {v} is not 0 or 1")));
        }
        Ok(())
    }

    /// Named flat tensors in a fixed order (the serialization and optimizer layout).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (name, head) in [
            ("mu", &self.mu_net),
            ("sigma", &self.sigma_net),
            ("gate", &self.gate_net),
        ] {
            out.push((format!("{name}.w1"), &head.w1));
            out.push((format!("{name}.b1"), &head.b1));
            out.push((format!("{name}.w2"), &head.w2));
            if let Some(g) = &head.gain {
                out.push((format!("{name}.gain"), g));
            }
            out.push((format!("{name}.b2"), &head.b2));
        }
        out.push(("int.w1".into(), &self.interaction.w1));
        out.push(("int.b1".into(), &self.interaction.b1));
        out.push(("int.w2".into(), &self.interaction.w2));
        out.push(("int.b2".into(), std::slice::from_ref(&self.interaction.b2)));
        out.push(("theta_phi".into(), &self.theta_phi));
        out.push(("w_phi".into(), &self.w_phi));
        out.push(("a0".into(), std::slice::from_ref(&self.a0)));
        out.push(("a1".into(), std::slice::from_ref(&self.a1)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for head in [&mut self.mu_net, &mut self.sigma_net, &mut self.gate_net] {
            out.push(&mut head.w1);
            out.push(&mut head.b1);
            out.push(&mut head.w2);
            if let Some(g) = head.gain.as_mut() {
                out.push(g);
            }
            out.push(&mut head.b2);
        }
        out.push(&mut self.interaction.w1);
        out.push(&mut self.interaction.b1);
        out.push(&mut self.interaction.w2);
        out.push(std::slice::from_mut(&mut self.interaction.b2));
        out.push(&mut self.theta_phi);
        out.push(&mut self.w_phi);
        out.push(std::slice::from_mut(&mut self.a0));
        out.push(std::slice::from_mut(&mut self.a1));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EnsembleParams, scale: f64) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }

    pub fn prior_params(&self, e_q: &[f64]) -> Result<PriorParams> {
        self.check_embedding(e_q)?;
        let mu = self.mu_net.output(e_q);
        let sigma = self
            .sigma_net
            .output(e_q)
            .into_iter()
            .map(|r| softplus(r) + self.dims.epsilon)
            .collect();
        Ok(PriorParams { mu, sigma })
    }

    pub fn gate(&self, e_q: &[f64]) -> Result<GateVector> {
        self.check_embedding(e_q)?;
        Ok(GateVector(
            self.gate_net.output(e_q).into_iter().map(logistic).collect(),
        ))
    }
}

/// `Φ = ½ Σ (μ² + σ² − ln σ² − 1)`, the KL divergence of the prior from N(0, I).
pub fn context_potential(prior: &PriorParams) -> f64 {
    0.5 * prior
        .mu
        .iter()
        .zip(&prior.sigma)
        .map(|(&m, &s)| {
            let s2 = s * s;
            m * m + s2 - s2.ln() - 1.0
        })
        .sum::<f64>()
}

/// `Λ = Σ (θ_φ,i + W_φ,i s_i) z_i`.
pub fn compatibility_potential(params: &EnsembleParams, s: &[u8], z: &[f64]) -> f64 {
    params
        .theta_phi
        .iter()
        .zip(&params.w_phi)
        .zip(s.iter().zip(z))
        .map(|((&t, &w), (&si, &zi))| t * zi + w * f64::from(si) * zi)
        .sum()
}

/// `c = f_int(Z ⊙ g)`.
pub fn consensus(params: &EnsembleParams, z: &[f64], g: &GateVector) -> f64 {
    let u: Vec<f64> = z.iter().zip(&g.0).map(|(a, b)| a * b).collect();
    params.interaction.eval(&u)
}

fn theta_for_label(params: &EnsembleParams, y: u8) -> f64 {
    if y == 1 {
        params.theta_lambda1()
    } else {
        params.theta_lambda0()
    }
}

/// `Ψ(y, Z; e_q) = θ_λ,y · c`.
pub fn interaction_potential(
    params: &EnsembleParams,
    y: u8,
    z: &[f64],
    e_q: &[f64],
) -> Result<f64> {
    let g = params.gate(e_q)?;
    Ok(theta_for_label(params, y) * consensus(params, z, &g))
}

pub fn total_energy(
    params: &EnsembleParams,
    y: u8,
    z: &[f64],
    s: &[u8],
    e_q: &[f64],
) -> Result<f64> {
    params.check_votes(s)?;
    if z.len() != params.k() {
        return Err(Error::Dimension {
            what: "latent vector",
            expected: params.k(),
            actual: z.len(),
        });
    }
    let prior = params.prior_params(e_q)?;
    Ok(context_potential(&prior)
        + compatibility_potential(params, s, z)
        + interaction_potential(params, y, z, e_q)?)
}

/// `P(y=1 | Z)` from the two-label Gibbs normalization: `logistic((θ_λ,0 − θ_λ,1) c)`.
pub fn label_posterior_given_z(params: &EnsembleParams, z: &[f64], g: &GateVector) -> f64 {
    logistic(params.theta_lambda() * consensus(params, z, g))
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    len: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    schema: String,
    d: usize,
    k: usize,
    #[serde(rename = "H")]
    hidden: usize,
    #[serde(rename = "H_int")]
    hidden_int: usize,
    epsilon: f64,
    interaction_activation: Activation,
    tensors: Vec<TensorRecord>,
}

pub fn save_params(params: &EnsembleParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ParamsFile {
        schema: PARAMS_SCHEMA.to_string(),
        d: params.dims.d,
        k: params.dims.k,
        hidden: params.dims.hidden,
        hidden_int: params.dims.hidden_int,
        epsilon: params.dims.epsilon,
        interaction_activation: params.interaction.activation,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                len: t.len(),
                data: t.to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::InvalidArgument(format!("parameters not serializable: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EnsembleParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, path)
}

/// Loads and checks the stored dimensions against what the caller expects.
pub fn load_params_expecting(path: impl AsRef<Path>, d: usize, k: usize) -> Result<EnsembleParams> {
    let p = load_params(path)?;
    if p.d() != d {
        return Err(Error::Dimension {
            what: "parameter file d",
            expected: d,
            actual: p.d(),
        });
    }
    if p.k() != k {
        return Err(Error::Dimension {
            what: "parameter file k",
            expected: k,
            actual: p.k(),
        });
    }
    Ok(p)
}

pub fn params_from_bytes(bytes: &[u8], path: &Path) -> Result<EnsembleParams> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
    let schema = value
        .get("schema")
        .and_then(|s| s.as_str())
        .ok_or_else(|| corrupt("missing schema tag".into()))?;
    if schema != PARAMS_SCHEMA {
        return Err(Error::Version {
            expected: PARAMS_SCHEMA.to_string(),
            found: schema.to_string(),
        });
    }
    let file: ParamsFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let dims = ModelDims {
        d: file.d,
        k: file.k,
        hidden: file.hidden,
        hidden_int: file.hidden_int,
        epsilon: file.epsilon,
    };
    let mut params = EnsembleParams::zeros(dims);
    params.interaction.activation = file.interaction_activation;
    let expected: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            expected.len(),
            file.tensors.len()
        )));
    }
    for ((name, len), rec) in expected.iter().zip(&file.tensors) {
        if &rec.name != name || rec.len != *len || rec.data.len() != *len {
            return Err(corrupt(format!(
                "tensor {:?}: expected {name} with {len} values, found {} with {} values",
                rec.name,
                rec.name,
                rec.data.len()
            )));
        }
        if rec.data.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(format!("tensor {name} has non-finite entries")));
        }
    }
    for (dst, rec) in params.tensors_mut().into_iter().zip(file.tensors) {
        dst.copy_from_slice(&rec.data);
    }
    Ok(params)
}

/// Hex SHA-256 of the parameter file bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
