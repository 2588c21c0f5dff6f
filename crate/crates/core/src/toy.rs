//! Hand-built three-judge fixture: prior means (0.2, 0.3, 0.9), gates
//! (0.3, 0.4, 0.9) and a consensus network with `c = 0.9` at `Z = μ`.
//! With votes (1, 1, 0) the posterior fixed point is exactly the prior mean,
//! and the ensemble rejects the match even though the majority accepts it.

use crate::data::{default_judge_names, Dataset, LabeledInstance};
use crate::energy::{Activation, EnsembleParams, Interaction, ModelDims};
use crate::nn::{inverse_softplus, logistic, logit};

pub const TOY_D: usize = 4;
pub const TOY_K: usize = 3;
pub const TOY_Z: [f64; 3] = [0.2, 0.3, 0.9];
pub const TOY_GATE: [f64; 3] = [0.3, 0.4, 0.9];
pub const TOY_VOTES: [u8; 3] = [1, 1, 0];
pub const TOY_CONSENSUS: f64 = 0.9;
/// Prior standard deviation of every judge in the fixture.
pub const TOY_SIGMA: f64 = 0.05;

pub fn toy_embedding() -> Vec<f64> {
    vec![0.1, -0.2, 0.3, 0.0]
}

pub fn toy_params() -> EnsembleParams {
    let dims = ModelDims {
        d: TOY_D,
        k: TOY_K,
        hidden: 2,
        hidden_int: 1,
        epsilon: 1e-4,
    };
    let mut p = EnsembleParams::zeros(dims);
    // Heads are constant: zero output weights, biases carry the values.
    for head in [&mut p.mu_net, &mut p.sigma_net] {
        head.w2 = vec![1.0; head.w2.len()];
    }
    p.mu_net.b2 = TOY_Z.to_vec();
    p.sigma_net.b2 = vec![inverse_softplus(TOY_SIGMA - dims.epsilon); TOY_K];
    p.gate_net.b2 = TOY_GATE.iter().map(|&g| logit(g)).collect();

    let sum: f64 = TOY_Z.iter().zip(TOY_GATE).map(|(z, g)| z * g).sum();
    p.interaction = Interaction {
        k: TOY_K,
        hidden: 1,
        activation: Activation::Tanh,
        w1: vec![1.0; TOY_K],
        b1: vec![0.0],
        w2: vec![TOY_CONSENSUS / sum.tanh()],
        b2: 0.0,
    };
    let a = inverse_softplus(1.0);
    p.a0 = a;
    p.a1 = a;

    // Pick the vote couplings so that Z = μ(e_q) is the fixed point for votes (1,1,0):
    // θ_φ,i + W_φ,i s_i + g_i E[θ_λ,y] = μ_i.
    let p1 = logistic(p.theta_lambda() * TOY_CONSENSUS);
    let expected_theta = p1 * p.theta_lambda1() + (1.0 - p1) * p.theta_lambda0();
    p.w_phi = vec![0.5; TOY_K];
    p.theta_phi = (0..TOY_K)
        .map(|i| {
            TOY_Z[i] - TOY_GATE[i] * expected_theta - p.w_phi[i] * f64::from(TOY_VOTES[i])
        })
        .collect();
    p
}

/// A few rows around the fixture (first row is the fixture itself, label 0).
pub fn toy_dataset() -> Dataset {
    let base = toy_embedding();
    let patterns: [([u8; 3], u8); 6] = [
        (TOY_VOTES, 0),
        ([1, 1, 1], 1),
        ([0, 0, 1], 1),
        ([0, 0, 0], 0),
        ([1, 0, 0], 0),
        ([0, 1, 1], 1),
    ];
    let rows = patterns
        .iter()
        .enumerate()
        .map(|(i, (votes, label))| {
            let mut e = base.clone();
            e[3] = i as f64 * 0.1;
            let mut inst = LabeledInstance::new(format!("toy-{i}"), e, votes.to_vec(), *label);
            inst.domain_tag = Some("covidqa".into());
            inst
        })
        .collect();
    Dataset::new(TOY_D, TOY_K, default_judge_names(TOY_K), rows).expect("toy rows are valid")
}
