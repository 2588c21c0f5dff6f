//! Criterion 1: every worked example of the component contracts.
//!
//! Closed-form arithmetic is held to 1e-9, iterative values to 1e-6. The few
//! statistical examples use their stated tolerances at reduced sample sizes
//! where the stated size is not part of the example.

use std::f64::consts::{E, LN_2};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ral2m_cli::run_cli;
use ral2m_cli::service::{router, LoadedModel, ServiceState};
use ral2m_core::baselines::{
    majority_vote, neural_agg_infer, neural_agg_train, weighted_vote, weights_from_accuracies, NeuralAggConfig,
    NeuralAggParams, WeightVector,
};
use ral2m_core::data::{default_judge_names, validate_instance, Violation};
use ral2m_core::energy::{
    compatibility_potential, consensus, content_hash, context_potential, interaction_potential, label_posterior_given_z,
    load_params, total_energy, Activation, GateVector, Interaction, PARAMS_SCHEMA,
};
use ral2m_core::inference::{decide, fixed_point_posterior, mc_marginal, posterior_variance};
use ral2m_core::metrics::{
    cohen_kappa, confusion, dependency_matrix, judge_agreement_histogram, pearson, ConfusionCounts,
};
use ral2m_core::nn::{inverse_softplus, logistic, logit};
use ral2m_core::simulator::{bayes_oracle, named_config, oracle_accuracy, simulate, PopulationConfig};
use ral2m_core::toy::{toy_dataset, toy_embedding, toy_params, TOY_VOTES, TOY_Z};
use ral2m_core::training::{focal_bce, grad_check, grad_check_detailed, kl_regularizer, loss_on_batch, loss_value};
use ral2m_core::{
    evaluate, infer, infer_dataset, load_dataset, save_dataset, save_params, split_dataset, train, Dataset,
    EnsembleParams, Error, InferenceConfig, LabeledInstance, MetricsReport, ModelDims, PosteriorState, PriorParams,
    TrainConfig,
};
use ral2m_pipeline::{
    collect_votes, parse_vote, threshold_judge, CollectOptions, EmbeddingClient, JudgeCache, JudgeClient,
    JudgmentPrompt, KbEntry, KnowledgeBase, Pipeline, PipelineError,
};
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::numeric::{random_params, random_rows};
use crate::stub::{fast_endpoint, start_stub, stub_embedding, ModelScript, StubState};
use crate::{Checks, Verdict};

const TOL: f64 = 1e-9;
const ITER: f64 = 1e-6;

pub fn run() -> anyhow::Result<Verdict> {
    let mut c = Checks::default();
    data(&mut c)?;
    energy(&mut c)?;
    inference(&mut c)?;
    training(&mut c)?;
    baselines(&mut c)?;
    metrics(&mut c)?;
    simulator(&mut c)?;
    tokio::runtime::Runtime::new()?.block_on(async {
        pipeline(&mut c).await?;
        service(&mut c).await
    })?;
    interface(&mut c)?;
    Ok(c.verdict())
}

fn inst(id: &str, label: u8) -> LabeledInstance {
    LabeledInstance::new(id, vec![0.1, -0.2, 0.3, 0.4], vec![1, 0, 1], label)
}

fn small(n: usize) -> Dataset {
    let rows = (0..n).map(|i| inst(&format!("q{i}"), (i % 2) as u8)).collect();
    Dataset::new(4, 3, default_judge_names(3), rows).expect("valid rows")
}

fn data(c: &mut Checks) -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("ds.jsonl");
    save_dataset(&small(2), &path)?;
    let back = load_dataset(&path, 4, 3)?;
    c.check("dataset: two valid lines load as two instances", back.len() == 2 && back == small(2));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        concat!(
            r#"{"schema":"ral2m-v1","d":2,"k":2,"judges":["a","b"]}"#,
            "\n",
            r#"{"id":"x","embedding":[0.0,1.0],"votes":[1,0],"label":1}"#,
            "\n",
            r#"{"id":"y","embedding":[0.0,1.0],"votes":[1,2],"label":1}"#,
            "\n"
        ),
    )?;
    c.check(
        "dataset: vote value 2 names line and field",
        matches!(load_dataset(&bad, 2, 2), Err(Error::Parse { line: 3, ref message }) if message.contains("votes[1]")),
    );
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "")?;
    c.check("dataset: empty file is an empty dataset", load_dataset(&empty, 4, 3)?.is_empty());

    let rows = random_rows(25, 4, 3, 1)
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            if i % 3 == 0 {
                r.domain_tag = Some(format!("tag-{i}"));
                r.query_text = Some(format!("text {i}"));
            }
            r
        })
        .collect();
    let ds = Dataset::new(4, 3, default_judge_names(3), rows)?;
    save_dataset(&ds, &path)?;
    c.check("dataset: round-trip identity", load_dataset(&path, 4, 3)? == ds);
    let mut a = inst("a", 0);
    a.label = None;
    let plain = Dataset::new(4, 3, default_judge_names(3), vec![a, inst("b", 1)])?;
    save_dataset(&plain, &path)?;
    let text = std::fs::read_to_string(&path)?;
    c.check(
        "dataset: absent optional fields stay absent",
        load_dataset(&path, 4, 3)? == plain && !text.contains("domain_tag") && !text.contains("query_text"),
    );
    c.check(
        "dataset: saving into a missing directory fails",
        matches!(save_dataset(&small(1), dir.path().join("nope/ds.jsonl")), Err(Error::Io { .. })),
    );

    let (tr, te) = split_dataset(&small(10), 0.7, 42, false)?;
    let again = split_dataset(&small(10), 0.7, 42, false)?;
    c.check("split: 10 rows at 0.7 give 7/3, repeatable", tr.len() == 7 && te.len() == 3 && (tr, te) == again);
    let (a, b) = split_dataset(&small(3), 0.5, 1, false)?;
    c.check("split: 0.5 of 3 rounds half up", (a.len(), b.len()) == (2, 1));
    let (a, _) = split_dataset(&small(40), 0.5, 1, false)?;
    let (b, _) = split_dataset(&small(40), 0.5, 2, false)?;
    c.check("split: other seed, same sizes, other membership", a.len() == b.len() && a != b);

    c.check("validate: valid instance", validate_instance(&inst("a", 1), 4, 3).is_ok());
    let mut x = inst("a", 1);
    x.embedding[2] = f64::NAN;
    c.check(
        "validate: NaN names its index",
        validate_instance(&x, 4, 3) == Err(vec![Violation::NonFiniteEmbedding { index: 2 }]),
    );
    let mut x = inst("a", 1);
    x.votes = vec![1, 0];
    x.label = Some(3);
    c.check("validate: wrong k and label 3 give two violations", validate_instance(&x, 4, 3).map_err(|v| v.len()) == Err(2));
    Ok(())
}

fn fresh(d: usize, k: usize) -> EnsembleParams {
    let mut dims = ModelDims::new(d, k);
    dims.hidden = 16;
    dims.hidden_int = 8;
    EnsembleParams::init(dims, 7).expect("valid dims")
}

/// Consensus map replaced by a linear unit-weight map with zero bias.
fn linear_consensus(k: usize) -> EnsembleParams {
    let mut p = fresh(2, k);
    p.interaction = Interaction {
        k,
        hidden: 1,
        activation: Activation::Identity,
        w1: vec![1.0; k],
        b1: vec![0.0],
        w2: vec![1.0],
        b2: 0.0,
    };
    p.dims.hidden_int = 1;
    p
}

fn energy(c: &mut Checks) -> anyhow::Result<()> {
    c.check("init: same seed, same parameters", fresh(4, 3) == fresh(4, 3));
    let p = fresh(4, 3);
    let prior = p.prior_params(&[0.3, -1.0, 2.0, 0.5])?;
    c.check("prior: fresh mean is zero", prior.mu == vec![0.0; 3]);
    for s in &prior.sigma {
        c.close("prior: fresh sigma = ln 2 + eps", *s, LN_2 + 1e-4, TOL);
    }
    c.close("theta_lambda0 = -1", p.theta_lambda0(), -1.0, TOL);
    c.close("theta_lambda1 = +1", p.theta_lambda1(), 1.0, TOL);

    let mut q = fresh(2, 2);
    q.sigma_net.gain = None;
    q.sigma_net.w2 = vec![0.0; q.sigma_net.w2.len()];
    q.sigma_net.b2 = vec![-20.0, 0.0];
    let s0 = q.prior_params(&[1.0, 1.0])?.sigma[0];
    c.close("prior: sigma floor at raw -20", s0, 1e-4 + (-20f64).exp().ln_1p(), TOL);
    c.close("prior: sigma floor value", s0 - 1e-4, 2.06e-9, 1e-11);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rp = random_params(3, 4, 2, 1.0);
    let all_positive = (0..1000).all(|_| {
        let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        rp.prior_params(&e).map(|pr| pr.sigma.iter().all(|s| *s > 0.0)).unwrap_or(false)
    });
    c.check("prior: sigma > 0 on 1000 random queries", all_positive);
    c.check("gate: zero head gives 0.5", p.gate(&[0.0; 4])?.0 == vec![0.5; 3]);

    let mut gp = fresh(2, 3);
    gp.gate_net.b2 = vec![logit(0.3), logit(0.4), logit(0.9)];
    let g = gp.gate(&[0.5, -0.5])?;
    for (a, b) in g.0.iter().zip([0.3, 0.4, 0.9]) {
        c.close("gate: handcrafted toy gate", *a, b, TOL);
    }
    let mut mono = fresh(2, 3);
    let mut last = 0.0;
    let mut monotone = true;
    for raw in [-3.0, -1.0, 0.0, 0.5, 2.0] {
        mono.gate_net.b2[0] = raw;
        let v = mono.gate(&[0.0, 0.0])?.0[0];
        monotone &= v > last;
        last = v;
    }
    c.check("gate: monotone in the raw logit", monotone);
    for (u, want) in TOY_Z.iter().zip(&g.0).map(|(z, g)| z * g).zip([0.06, 0.12, 0.81]) {
        c.close("consensus: toy gated vector", u, want, TOL);
    }
    let toy = toy_params();
    c.close("consensus: toy c", consensus(&toy, &TOY_Z, &g), 0.9, TOL);
    let mut bias = fresh(2, 3);
    bias.interaction.b1 = vec![0.3; 8];
    bias.interaction.w2 = vec![0.5; 8];
    bias.interaction.b2 = -0.1;
    let zero = GateVector(vec![0.0; 3]);
    c.close(
        "consensus: vanishing gate leaves f_int(0)",
        consensus(&bias, &[5.0, -2.0, 9.0], &zero),
        bias.interaction.eval(&[0.0; 3]),
        TOL,
    );
    c.close(
        "consensus: linear map, Z=(1,1), g=(1,1) gives 2",
        consensus(&linear_consensus(2), &[1.0, 1.0], &GateVector(vec![1.0, 1.0])),
        2.0,
        TOL,
    );

    let pp = |mu: Vec<f64>, sigma: Vec<f64>| PriorParams { mu, sigma };
    c.close("context: identical Gaussians", context_potential(&pp(vec![0.0; 3], vec![1.0; 3])), 0.0, TOL);
    c.close("context: k=2, mu=(1,0)", context_potential(&pp(vec![1.0, 0.0], vec![1.0, 1.0])), 0.5, TOL);
    c.close("context: k=1, sigma^2=e", context_potential(&pp(vec![0.0], vec![E.sqrt()])), (E - 2.0) / 2.0, TOL);
    c.close("context: (e-2)/2 value", (E - 2.0) / 2.0, 0.3591, 1e-4);

    let mut k1 = fresh(2, 1);
    k1.theta_phi = vec![0.1];
    k1.w_phi = vec![0.2];
    c.close("compatibility: s=1", compatibility_potential(&k1, &[1], &[0.5]), 0.15, TOL);
    c.close("compatibility: s=0", compatibility_potential(&k1, &[0], &[0.5]), 0.05, TOL);
    c.close("compatibility: Z=0", compatibility_potential(&k1, &[1], &[0.0]), 0.0, TOL);

    let f2 = fresh(2, 2);
    for y in [0, 1] {
        c.close("interaction: c=0 gives 0", interaction_potential(&f2, y, &[0.4, -1.0], &[1.0, 2.0])?, 0.0, TOL);
    }
    let te = toy_embedding();
    c.close("interaction: toy y=0", interaction_potential(&toy, 0, &TOY_Z, &te)?, -0.9, TOL);
    c.close("interaction: toy y=1", interaction_potential(&toy, 1, &TOY_Z, &te)?, 0.9, TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let signs = (0..200).all(|i| {
        let p = random_params(3, 3, i, 1.0);
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = interaction_potential(&p, 0, &z, &e).expect("dims");
        let b = interaction_potential(&p, 1, &z, &e).expect("dims");
        a * b <= 0.0
    });
    c.check("interaction: opposite signs across labels", signs);

    let mut tp = fresh(3, 2);
    tp.interaction.w2 = vec![0.4; 8];
    tp.interaction.b1 = vec![0.2; 8];
    tp.theta_phi = vec![0.1, -0.3];
    tp.w_phi = vec![0.5, 0.7];
    let (e, z, s) = ([0.2, -0.4, 1.0], [0.3, -0.8], [1, 0]);
    for y in [0, 1] {
        let parts = context_potential(&tp.prior_params(&e)?)
            + compatibility_potential(&tp, &s, &z)
            + interaction_potential(&tp, y, &z, &e)?;
        c.close("energy: sum of the three potentials", total_energy(&tp, y, &z, &s, &e)?, parts, 1e-12);
    }
    let f0 = tp.interaction.eval(&[0.0, 0.0]);
    let e0 = total_energy(&tp, 0, &[0.0, 0.0], &s, &e)?;
    let e1 = total_energy(&tp, 1, &[0.0, 0.0], &s, &e)?;
    c.close("energy: Z=0 label gap", e1 - e0, (tp.theta_lambda1() - tp.theta_lambda0()) * f0, TOL);
    let mut comp = linear_consensus(1);
    comp.mu_net.gain = Some(vec![0.0]);
    comp.sigma_net.b2 = vec![inverse_softplus(1.0 - comp.dims.epsilon)];
    comp.theta_phi = vec![0.1];
    comp.w_phi = vec![0.2];
    // Φ = 0 (unit prior at the origin), Λ = 0.15, Ψ(1) = θ1 · z · g = 0.5 · 0.5.
    c.close("energy: composed k=1 example", total_energy(&comp, 1, &[0.5], &[1], &[0.0, 0.0])?, 0.15 + 0.25, TOL);

    c.close("posterior: c=0 gives 0.5", label_posterior_given_z(&f2, &[1.0, -1.0], &GateVector(vec![0.5, 0.5])), 0.5, TOL);
    let tg = toy.gate(&te)?;
    let p1 = label_posterior_given_z(&toy, &TOY_Z, &tg);
    c.close("posterior: toy logistic(-1.8)", p1, logistic(-1.8), TOL);
    c.close("posterior: toy value", p1, 0.1419, 1e-4);
    let mut neg = linear_consensus(2);
    neg.a0 = 0.3;
    neg.a1 = -0.8;
    let g2 = GateVector(vec![0.7, 0.2]);
    c.close(
        "posterior: negated consensus complements",
        label_posterior_given_z(&neg, &[0.4, 1.1], &g2) + label_posterior_given_z(&neg, &[-0.4, -1.1], &g2),
        1.0,
        TOL,
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("p.json");
    let rp = random_params(3, 2, 9, 2.0);
    save_params(&rp, &path)?;
    c.check("params: round-trip identity", load_params(&path)? == rp);
    let text = std::fs::read_to_string(&path)?;
    std::fs::write(&path, text.replace(PARAMS_SCHEMA, "ral2m-params-v0"))?;
    c.check("params: wrong schema tag is a version error", matches!(load_params(&path), Err(Error::Version { .. })));
    std::fs::write(&path, &text[..text.len() / 2])?;
    c.check("params: truncated file is corrupt", matches!(load_params(&path), Err(Error::Corrupt { .. })));
    Ok(())
}

fn icfg(iterations: usize, damping: f64) -> InferenceConfig {
    InferenceConfig {
        iterations,
        damping,
        mc_samples: 64,
        convergence_tol: 1e-6,
        threshold: 0.5,
        seed: 5,
    }
}

fn inference(c: &mut Checks) -> anyhow::Result<()> {
    let p = fresh(3, 4);
    let post = fixed_point_posterior(&p, &[1, 0, 1, 1], &[0.3, -0.2, 1.0], &icfg(60, 0.7))?;
    c.check(
        "fixed point: fresh params converge to 0 within 2 sweeps",
        post.mu == vec![0.0; 4] && post.converged && post.iterations_run <= 2,
    );
    let mut single = fresh(2, 1);
    single.mu_net.b2 = vec![0.5];
    single.sigma_net.b2 = vec![inverse_softplus(1.0 - single.dims.epsilon)];
    single.theta_phi = vec![0.1];
    single.w_phi = vec![0.2];
    let step = fixed_point_posterior(&single, &[1], &[0.0, 0.0], &icfg(1, 1.0))?;
    c.close("fixed point: undamped step 0.4", step.mu[0], 0.4, ITER);
    let step = fixed_point_posterior(&single, &[1], &[0.0, 0.0], &icfg(1, 0.8))?;
    c.close("fixed point: damped step 0.42", step.mu[0], 0.42, ITER);
    c.close("variance: sigma^2 = 1", posterior_variance(1.0), 0.5, TOL);
    c.close("variance: sigma^2 = 3", posterior_variance(3f64.sqrt()), 0.75, TOL);

    let toy = toy_params();
    let g = toy.gate(&toy_embedding())?;
    let degenerate = PosteriorState {
        mu: TOY_Z.to_vec(),
        v: vec![0.0; 3],
        iterations_run: 0,
        converged: true,
    };
    let plug = label_posterior_given_z(&toy, &TOY_Z, &g);
    let same = [(1, 0), (17, 3), (1024, 99)]
        .iter()
        .all(|&(m, seed)| mc_marginal(&toy, &degenerate, &g, m, seed) == plug);
    c.check("marginal: v = 0 is the plug-in value for any M and seed", same);
    let pred = infer(&toy, &toy_embedding(), &TOY_VOTES, &InferenceConfig::evaluation())?;
    c.close("marginal: toy p_hat", pred.p_hat, 0.15, 0.02);
    let zc = fresh(2, 3);
    let zero_post = PosteriorState {
        mu: vec![0.3, -2.0, 1.0],
        v: vec![0.4, 0.2, 0.9],
        iterations_run: 1,
        converged: true,
    };
    c.close("marginal: zero consensus gives 0.5", mc_marginal(&zc, &zero_post, &zc.gate(&[0.1, 0.2])?, 100, 1), 0.5, 0.0);
    c.check("decide: (0.15, 0.5) -> 0", decide(0.15, 0.5) == 0);
    c.check("decide: (0.7, 0.5) -> 1", decide(0.7, 0.5) == 1);
    c.check("decide: (0.5, 0.5) -> 0", decide(0.5, 0.5) == 0);
    c.check("infer: toy decision 0 despite votes (1,1,0)", pred.decision == 0);
    let fp = infer(&fresh(3, 5), &[1.0, 2.0, -3.0], &[1, 1, 1, 0, 1], &InferenceConfig::training())?;
    c.check("infer: fresh params give 0.5 and decision 0", fp.p_hat == 0.5 && fp.decision == 0);
    let a = infer(&toy, &toy_embedding(), &[0, 1, 1], &InferenceConfig::evaluation())?;
    let b = infer(&toy, &toy_embedding(), &[0, 1, 1], &InferenceConfig::evaluation())?;
    c.check("infer: bitwise repeatable", a == b && a.p_hat.to_bits() == b.p_hat.to_bits());
    Ok(())
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        hidden_int: 6,
        dropout: 0.0,
        inference: InferenceConfig {
            iterations: 4,
            mc_samples: 16,
            convergence_tol: 0.0,
            ..InferenceConfig::training()
        },
        ..TrainConfig::default()
    }
}

fn perturbed(mut p: EnsembleParams, seed: u64) -> EnsembleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

fn small_train_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..crate::learning::train_cfg(seed, epochs)
    }
}

fn training(c: &mut Checks) -> anyhow::Result<()> {
    c.close("focal: plain BCE at 0.5", focal_bce(0.5, 1, 0.0, 1.0, 0.0), LN_2, TOL);
    c.close("focal: gamma 2 at 0.9", focal_bce(0.9, 1, 2.0, 1.0, 0.0), -(0.1f64).powi(2) * 0.9f64.ln(), TOL);
    c.close("focal: gamma 2 value", focal_bce(0.9, 1, 2.0, 1.0, 0.0), 0.001054, 1e-6);
    c.check("focal: p -> 1 limit", focal_bce(1.0 - 1e-12, 1, 2.0, 1.0, 0.0) < 1e-20);

    let prior = PriorParams {
        mu: vec![0.0],
        sigma: vec![1.0],
    };
    let post = |mu: f64, v: f64| PosteriorState {
        mu: vec![mu],
        v: vec![v],
        iterations_run: 0,
        converged: true,
    };
    c.close("kl: posterior equals prior", kl_regularizer(&post(0.0, 1.0), &prior), 0.0, TOL);
    c.close("kl: means 1 vs 0", kl_regularizer(&post(1.0, 1.0), &prior), 0.5, TOL);
    c.close("kl: v = 0.5", kl_regularizer(&post(0.0, 0.5), &prior), 0.5 * (0.5 - 1.0 - 0.5f64.ln()), TOL);
    c.close("kl: v = 0.5 value", kl_regularizer(&post(0.0, 0.5), &prior), 0.0966, 1e-4);

    let cfg = TrainConfig::default();
    c.check("beta: epoch 0 is 0", cfg.kl_beta(0) == 0.0);
    c.check(
        "beta: plateau after warmup",
        cfg.kl_beta(cfg.kl_warmup_epochs) == cfg.kl_beta_max && cfg.kl_beta(cfg.kl_warmup_epochs + 37) == cfg.kl_beta_max,
    );
    let tc = tiny_cfg();
    let mut params = EnsembleParams::init(tc.model_dims(3, 4), 2)?;
    params.mu_net.gain = Some(vec![0.7, -0.2, 0.4, 1.0]);
    let batch = random_rows(5, 3, 4, 1);
    let focal_only = TrainConfig {
        kl_beta_max: 0.0,
        ..tc.clone()
    };
    c.check(
        "loss: epoch 0 is the pure focal term",
        loss_value(&params, &batch, &tc, 0)? == loss_value(&params, &batch, &focal_only, 0)?,
    );

    let pp = perturbed(EnsembleParams::init(tc.model_dims(3, 4), 2)?, 4);
    let batch = random_rows(5, 3, 4, 3);
    let doubled: Vec<LabeledInstance> = batch.iter().chain(batch.iter()).cloned().collect();
    let (l1, g1) = loss_on_batch(&pp, &batch, &tc, 30)?;
    let (l2, g2) = loss_on_batch(&pp, &doubled, &tc, 30)?;
    let grads_same = g1
        .tensors()
        .iter()
        .zip(g2.tensors().iter())
        .all(|((_, a), (_, b))| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= TOL * x.abs().max(1.0)));
    c.close("loss: duplicated batch, same loss", l2, l1, TOL);
    c.check("loss: duplicated batch, same gradient", grads_same);

    let gcfg = TrainConfig {
        hidden: 16,
        hidden_int: 8,
        inference: InferenceConfig {
            iterations: 6,
            mc_samples: 8,
            convergence_tol: 0.0,
            ..InferenceConfig::training()
        },
        ..TrainConfig::default()
    };
    let worst = grad_check(&random_params(3, 4, 0, 0.3), &random_rows(4, 3, 4, 10), &gcfg, 30, 1e-3, 250, 0)?;
    c.check(&format!("grad check: random small params (worst {worst:.1e})"), worst < 1e-4);

    let mut z = perturbed(EnsembleParams::init(tc.model_dims(3, 2), 5)?, 8);
    for j in 0..z.interaction.hidden {
        z.interaction.w1[j * 2 + 1] = 0.0;
    }
    let checks = grad_check_detailed(&z, &random_rows(3, 3, 2, 2), &tc, 0, 1e-3, usize::MAX, 0)?;
    let row: Vec<_> = checks
        .iter()
        .filter(|k| k.tensor == "gate.w2" && k.offset >= z.gate_net.hidden)
        .collect();
    c.check(
        "grad check: zero-influence gate weights are 0 both ways",
        row.len() == z.gate_net.hidden && row.iter().all(|k| k.analytic == 0.0 && k.numeric == 0.0),
    );

    let pop = named_config("single-strong-judge")?;
    let (tr, _) = simulate(&pop, 3_000, 1)?;
    let (va, _) = simulate(&pop, 500, 2)?;
    let (te, _) = simulate(&pop, 2_000, 3)?;
    let scfg = small_train_cfg(1, 2);
    let (sp, r1) = train(&tr, &va, &scfg)?;
    let preds: Vec<u8> = infer_dataset(&sp, &te, &InferenceConfig::evaluation())?.iter().map(|p| p.decision).collect();
    let acc = evaluate(&preds, &te.labels()?)?.accuracy;
    c.check(&format!("train: single-strong-judge accuracy {acc:.3} >= 0.88"), acc >= 0.88);
    let (sp2, r2) = train(&tr, &va, &scfg)?;
    c.check("train: same seed, identical report and parameters", sp == sp2 && r1.epochs == r2.epochs);

    let (lr, _) = simulate(&named_config("query-dependent-competence")?, 400, 4)?;
    let lcfg = TrainConfig {
        eval_inference: InferenceConfig {
            mc_samples: 16,
            ..InferenceConfig::evaluation()
        },
        ..small_train_cfg(4, 20)
    };
    let (_, rep) = train(&lr, &Dataset::empty(lr.d(), lr.k()), &lcfg)?;
    c.check(
        &format!("train: loss at epoch 20 ({:.4}) < epoch 1 ({:.4})", rep.epochs[19].train_loss, rep.epochs[0].train_loss),
        rep.epochs[19].train_loss < rep.epochs[0].train_loss,
    );
    Ok(())
}

fn baselines(c: &mut Checks) -> anyhow::Result<()> {
    c.check("majority: (1,1,0,0,1) -> 1", majority_vote(&[1, 1, 0, 0, 1]) == 1);
    c.check("majority: all zero -> 0", majority_vote(&[0; 5]) == 0);
    c.check("majority: (1,1,0,0) tie -> 0", majority_vote(&[1, 1, 0, 0]) == 0);
    let w = weights_from_accuracies(&[0.9, 0.6, 0.5]);
    for (a, b) in w.0.iter().zip([0.45, 0.30, 0.25]) {
        c.close("weights: (0.9,0.6,0.5)", *a, b, TOL);
    }
    c.check("weights: equal accuracies are uniform", weights_from_accuracies(&[0.7; 4]).0.iter().all(|x| (x - 0.25).abs() < TOL));
    c.close("weights: accuracy 0 floors at 0.01", weights_from_accuracies(&[0.0, 0.5]).0[0], 0.01 / 0.51, TOL);
    c.check("weighted: (0.6,0.2,0.2) with (1,0,0) -> 1", weighted_vote(&[1, 0, 0], &WeightVector(vec![0.6, 0.2, 0.2])) == 1);
    let uniform = WeightVector(vec![0.2; 5]);
    let reduces = (0u32..32).all(|b| {
        let s: Vec<u8> = (0..5).map(|i| ((b >> i) & 1) as u8).collect();
        weighted_vote(&s, &uniform) == majority_vote(&s)
    });
    c.check("weighted: uniform weights reduce to majority", reduces);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zeros = (0..100).all(|_| {
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        weighted_vote(&[0; 5], &WeightVector(w)) == 0
    });
    c.check("weighted: all-zero votes -> 0", zeros);

    let p = NeuralAggParams::init(3, 3, 8, 0);
    c.check("neural: zero init predicts 0.5", neural_agg_infer(&p, &[0.1, 0.2, 0.3], &[1, 0, 1])? == (0.5, 0));
    let mut q = NeuralAggParams::init(3, 3, 8, 0);
    q.w = vec![1.0; 3];
    c.check("neural: zero votes, zero bias -> 0.5, 0", neural_agg_infer(&q, &[0.3, 0.2, 0.1], &[0, 0, 0])? == (0.5, 0));
    q.gate.w2.iter_mut().for_each(|w| *w = 0.0);
    q.gate.b2 = vec![60.0; 3];
    q.b = -1.5;
    let (prob, d) = neural_agg_infer(&q, &[0.3, 0.2, 0.1], &[1, 1, 0])?;
    c.close("neural: forced gate gives logistic(0.5)", prob, logistic(0.5), TOL);
    c.check("neural: forced gate decides 1", d == 1 && (prob - 0.6225).abs() < 1e-4);
    c.check("neural: repeated calls identical", neural_agg_infer(&q, &[0.3, 0.2, 0.1], &[1, 1, 0])? == (prob, d));

    let pop = named_config("query-dependent-competence")?;
    let (tr, _) = simulate(&pop, 4000, 1)?;
    let (te, _) = simulate(&pop, 2000, 2)?;
    let ncfg = NeuralAggConfig {
        hidden: 32,
        epochs: 10,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 3,
        ..NeuralAggConfig::default()
    };
    let net = neural_agg_train(&tr, &ncfg)?;
    c.check("neural: same seed, same parameters", net == neural_agg_train(&tr, &ncfg)?);
    let labels = te.labels()?;
    let np: Vec<u8> = te
        .instances()
        .iter()
        .map(|r| neural_agg_infer(&net, &r.embedding, &r.votes).map(|x| x.1))
        .collect::<ral2m_core::Result<_>>()?;
    let mp: Vec<u8> = te.instances().iter().map(|r| majority_vote(&r.votes)).collect();
    let gain = evaluate(&np, &labels)?.accuracy - evaluate(&mp, &labels)?.accuracy;
    c.check(&format!("neural: beats majority by {gain:.3} >= 0.05 on query-dependent competence"), gain >= 0.05);
    Ok(())
}

fn metrics_ds(rows: &[(&[u8], u8)]) -> Dataset {
    let k = rows[0].0.len();
    let inst = rows
        .iter()
        .enumerate()
        .map(|(i, (v, y))| LabeledInstance::new(format!("r{i}"), vec![0.0], v.to_vec(), *y))
        .collect();
    Dataset::new(1, k, default_judge_names(k), inst).expect("valid rows")
}

fn iid(acc: &[f64]) -> PopulationConfig {
    PopulationConfig {
        name: String::new(),
        k: acc.len(),
        topics: 1,
        acc: acc.iter().map(|&a| vec![a]).collect(),
        cliques: (0..acc.len()).map(|i| vec![i]).collect(),
        rho: vec![0.0; acc.len()],
        label_prior: 0.5,
        embed_dim: 2,
        embed_noise_sigma: 0.1,
        judges: None,
    }
}

fn metrics(c: &mut Checks) -> anyhow::Result<()> {
    let k = confusion(&[1, 1, 0, 0], &[1, 0, 0, 1])?;
    c.check("confusion: one of each", (k.tp, k.fp, k.tn, k.fn_) == (1, 1, 1, 1));
    let k = confusion(&[1; 6], &[1; 6])?;
    c.check("confusion: all true positives", (k.tp, k.fp, k.tn, k.fn_) == (6, 0, 0, 0));
    c.check("confusion: all false negatives", confusion(&[0; 4], &[1; 4])?.fn_ == 4);
    let r = MetricsReport::from_counts(ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 })?;
    c.close("report: accuracy", r.accuracy, 0.7, TOL);
    c.close("report: hallucination", r.hallucination.unwrap_or(f64::NAN), 0.2, TOL);
    c.close("report: precision", r.precision.unwrap_or(f64::NAN), 0.75, TOL);
    c.close("report: recall", r.recall.unwrap_or(f64::NAN), 0.6, TOL);
    c.close("report: f1", r.f1.unwrap_or(f64::NAN), 2.0 / 3.0, TOL);
    let perfect = evaluate(&[1, 0, 1, 0], &[1, 0, 1, 0])?;
    c.check("report: all correct", perfect.accuracy == 1.0 && perfect.hallucination == Some(0.0));
    let none = evaluate(&[0, 0, 0], &[1, 0, 1])?;
    c.check("report: no positives leaves precision and f1 undefined", none.precision.is_none() && none.f1.is_none());
    c.check("pearson: a = b", pearson(&[1, 0, 1, 1], &[1, 0, 1, 1])? == Some(1.0));
    c.check("pearson: opposite", pearson(&[1, 0, 1, 0], &[0, 1, 0, 1])? == Some(-1.0));
    c.check("pearson: orthogonal", pearson(&[1, 1, 0, 0], &[1, 0, 1, 0])? == Some(0.0));
    c.check("kappa: a = b", cohen_kappa(&[1, 0, 1, 1], &[1, 0, 1, 1])? == Some(1.0));
    c.check("kappa: perfect disagreement", cohen_kappa(&[1, 1, 0, 0], &[0, 0, 1, 1])? == Some(-1.0));
    c.check("kappa: chance agreement", cohen_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0])? == Some(0.0));
    let m = dependency_matrix(&metrics_ds(&[(&[1, 1, 0], 1), (&[0, 0, 1], 0), (&[1, 1, 1], 1), (&[0, 0, 0], 0)]))?;
    c.check("dependency: identical columns give 1 in both triangles", m.cells[0][1] == Some(1.0) && m.cells[1][0] == Some(1.0));

    let (ds, truth) = simulate(&iid(&[0.8, 0.6, 0.7]), 100_000, 9)?;
    let correct = |j: usize| -> Vec<u8> {
        ds.instances().iter().zip(&truth).map(|(r, t)| u8::from(r.votes[j] == t.label)).collect()
    };
    let mut worst = 0.0f64;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        worst = worst.max(pearson(&correct(i), &correct(j))?.unwrap_or(1.0).abs());
    }
    c.check(&format!("dependency: independent judges |r| = {worst:.4} < 0.02"), worst < 0.02);
    let mut clique = named_config("correlated-clique")?;
    clique.rho[0] = 1.0;
    let (cd, _) = simulate(&clique, 5000, 1)?;
    let cm = dependency_matrix(&cd)?;
    c.check("dependency: rho = 1 clique has r = 1", cm.cells[0][1] == Some(1.0) && cm.cells[1][2] == Some(1.0));

    let h = judge_agreement_histogram(&metrics_ds(&[(&[1, 1, 1], 1), (&[0, 0, 0], 0)]))?;
    c.check("histogram: all correct at m = k", h.counts == vec![0, 0, 0, 2]);
    let h = judge_agreement_histogram(&metrics_ds(&[(&[1, 0, 0], 1), (&[0, 1, 1], 0)]))?;
    c.check("histogram: one correct at m = 1", h.counts == vec![0, 2, 0, 0] && h.at_least_one_correct == 1.0);
    let acc = [0.9, 0.7, 0.6, 0.55, 0.8];
    let (hd, _) = simulate(&iid(&acc), 100_000, 5)?;
    let h = judge_agreement_histogram(&hd)?;
    let mut dist = vec![1.0];
    for a in acc {
        let mut next = vec![0.0; dist.len() + 1];
        for (m, p) in dist.iter().enumerate() {
            next[m] += p * (1.0 - a);
            next[m + 1] += p * a;
        }
        dist = next;
    }
    let hist_ok = h.counts.iter().zip(&dist).all(|(n, p)| (*n as f64 / 100_000.0 - p).abs() < 0.01);
    c.check("histogram: matches the Poisson-binomial expectation", hist_ok);
    Ok(())
}

fn simulator(c: &mut Checks) -> anyhow::Result<()> {
    let (ds, truth) = simulate(&iid(&[1.0, 0.0]), 2000, 3)?;
    let (mut perfect, mut flipped) = (true, true);
    for (r, t) in ds.instances().iter().zip(&truth) {
        perfect &= r.votes[0] == t.label;
        flipped &= r.votes[1] == 1 - t.label;
    }
    c.check("simulator: accuracy 1 votes the label", perfect);
    c.check("simulator: accuracy 0 votes the flipped label", flipped);
    let (ds, truth) = simulate(&iid(&[0.8]), 100_000, 4)?;
    let acc = ds.instances().iter().zip(&truth).filter(|(r, t)| r.votes[0] == t.label).count() as f64 / 100_000.0;
    c.close("simulator: configured accuracy 0.8", acc, 0.8, 0.01);
    c.close("oracle: single judge 0.9", bayes_oracle(&iid(&[0.9]), &[1], 0)?, 0.9, TOL);
    c.close("oracle: two judges at 0.8", bayes_oracle(&iid(&[0.8, 0.8]), &[1, 1], 0)?, 16.0 / 17.0, TOL);
    c.close("oracle: two judges value", 16.0 / 17.0, 0.9412, 1e-4);
    for v in [0, 1] {
        c.close("oracle: uninformative judge returns the prior", bayes_oracle(&iid(&[0.5]), &[v], 0)?, 0.5, TOL);
    }
    c.close("oracle: single-strong-judge accuracy", oracle_accuracy(&named_config("single-strong-judge")?, 100_000, 1)?, 0.9, 0.01);
    c.close("oracle: all judges at 0.5", oracle_accuracy(&iid(&[0.5; 5]), 100_000, 2)?, 0.5, 0.01);
    c.close("oracle: five judges at 0.8", oracle_accuracy(&iid(&[0.8; 5]), 100_000, 3)?, 0.942, 0.01);
    Ok(())
}

async fn pipeline(c: &mut Checks) -> anyhow::Result<()> {
    let st = Arc::new(StubState::default());
    *st.embed_dim.lock().unwrap() = 6;
    for (m, reply, delay) in [("a", "Yes", 30), ("b", "no.", 0), ("c", "yes!", 10), ("maybe", "Maybe", 0)] {
        st.models.lock().unwrap().insert(
            m.into(),
            ModelScript {
                reply: reply.into(),
                delay_ms: delay,
                ..ModelScript::default()
            },
        );
    }
    st.models.lock().unwrap().insert(
        "slow".into(),
        ModelScript {
            reply: "Yes".into(),
            delay_ms: 300,
            ..ModelScript::default()
        },
    );
    let base = start_stub(st.clone()).await;

    let enc = EmbeddingClient::new(fast_endpoint("enc", &base, "bge"), 6);
    let a = enc.embed("reset my password").await?;
    let b = enc.embed("reset my password").await?;
    c.check("embedding: repeated text served from cache", a == b && enc.network_calls() == 1);
    let wrong = EmbeddingClient::new(fast_endpoint("enc", &base, "bge"), 4);
    c.check(
        "embedding: wrong dimension names expected and actual",
        matches!(wrong.embed("hello").await, Err(PipelineError::DimensionMismatch { expected: 4, actual: 6, .. })),
    );
    st.embed_fail_first.store(1, Ordering::SeqCst);
    let before = st.embed_requests.load(Ordering::SeqCst);
    let retried = EmbeddingClient::new(fast_endpoint("enc", &base, "bge"), 6).embed("fresh text").await.is_ok();
    c.check("embedding: transient 500 is retried", retried && st.embed_requests.load(Ordering::SeqCst) == before + 2);

    let prompt = JudgmentPrompt::default();
    let full = prompt.render("QUERY", "CAND_Q", "CAND_A", Some("DOC"))?;
    let order = ["QUERY", "CAND_Q", "CAND_A", "Supporting Document:\nDOC"].map(|s| full.find(s));
    c.check(
        "prompt: four sections in template order",
        order.iter().all(Option::is_some) && order.windows(2).all(|w| w[0] < w[1]),
    );
    let bare = prompt.render("QUERY", "CAND_Q", "CAND_A", None)?;
    c.check("prompt: no document header without a document", !bare.contains("Supporting Document"));
    c.check("prompt: empty answer is an error", prompt.render("QUERY", "CAND_Q", "", None).is_err());
    c.check("reply: Yes -> 1", parse_vote("Yes").ok() == Some(1));
    c.check("reply: no. -> 0", parse_vote("no.").ok() == Some(0));
    c.check("reply: Maybe is a parse error", matches!(parse_vote("Maybe"), Err(PipelineError::Parse { .. })));

    let judges = |models: &[&str], cache: &Arc<JudgeCache>| -> Vec<JudgeClient> {
        models
            .iter()
            .map(|m| {
                let mut ep = fast_endpoint(&format!("judge-{m}"), &base, m);
                ep.timeout_ms = 100;
                ep.max_retries = 1;
                JudgeClient::new(ep, cache.clone())
            })
            .collect()
    };
    let cache = Arc::new(JudgeCache::in_memory());
    let out = collect_votes("p", &judges(&["maybe", "a"], &cache), CollectOptions::default()).await?;
    c.check("votes: Maybe abstains as 0", out.votes == vec![0, 1] && out.failures.len() == 1);
    let js = judges(&["a", "b", "c"], &cache);
    let first = collect_votes("q", &js, CollectOptions::default()).await?;
    let cached = collect_votes("q", &js, CollectOptions::default()).await?;
    c.check(
        "votes: all cached gives zero network calls, endpoint order",
        first.votes == vec![1, 0, 1] && cached == first && js.iter().all(|j| j.network_calls() == 1),
    );
    let out = collect_votes("r", &judges(&["a", "b", "slow"], &cache), CollectOptions::default()).await?;
    c.check(
        "votes: timed-out endpoint abstains at its position",
        out.votes == vec![1, 0, 0] && out.failures.len() == 1 && out.failures[0].index == 2,
    );
    let mut orders_ok = true;
    for parallelism in [1, 2, 8] {
        let fresh_cache = Arc::new(JudgeCache::in_memory());
        let opts = CollectOptions {
            parallelism,
            strict: false,
        };
        orders_ok &= collect_votes("s", &judges(&["a", "b", "c"], &fresh_cache), opts).await?.votes == vec![1, 0, 1];
    }
    c.check("votes: completion order never changes the vector", orders_ok);

    let kb = |entries: &[&str]| {
        KnowledgeBase::new(
            entries
                .iter()
                .enumerate()
                .map(|(i, t)| KbEntry {
                    id: format!("kb-{i}"),
                    question: t.to_string(),
                    answer: format!("Answer {i}"),
                    embedding: stub_embedding(t, 6),
                    document: None,
                })
                .collect(),
        )
    };
    let make = |kb: KnowledgeBase| {
        Pipeline::new(
            kb,
            EmbeddingClient::new(fast_endpoint("enc", &base, "bge"), 6),
            judges(&["a", "b", "c"], &Arc::new(JudgeCache::in_memory())),
            JudgmentPrompt::default(),
            CollectOptions::default(),
            false,
            0.85,
        )
    };
    let p = make(kb(&["How do I reset my password?", "Where is my invoice?"])?)?;
    let (x, ox) = p.build_instance("Where is my invoice?", Some("r1"), Some(1)).await?;
    let (y, oy) = p.build_instance("Where is my invoice?", Some("r1"), Some(1)).await?;
    c.check("pipeline: stubbed instance is deterministic", x == y && ox == oy && x.votes == vec![1, 0, 1]);
    let (u, _) = p.build_instance("Where is my invoice?", None, None).await?;
    let unlabeled = Dataset::new(6, 3, default_judge_names(3), vec![u])?;
    c.check(
        "pipeline: unlabeled instance is inference-only",
        unlabeled.instances()[0].label.is_none() && train(&unlabeled, &unlabeled, &tiny_cfg()).is_err(),
    );
    let empty = make(KnowledgeBase::new(vec![])?)?;
    c.check(
        "pipeline: empty knowledge base is an error",
        matches!(empty.build_instance("anything", None, None).await, Err(PipelineError::EmptyKnowledgeBase)),
    );
    let tiny = KnowledgeBase::new(vec![
        KbEntry {
            id: "e1".into(),
            question: "q1".into(),
            answer: "a1".into(),
            embedding: vec![1.0, 0.0],
            document: None,
        },
        KbEntry {
            id: "e2".into(),
            question: "q2".into(),
            answer: "a2".into(),
            embedding: vec![0.0, 1.0],
            document: None,
        },
    ])?;
    let (e, s) = tiny.retrieve_top1(&[1.0, 0.0])?;
    c.check("retrieval: (1,0) -> e1 at 1.0", e.id == "e1" && (s - 1.0).abs() < TOL);
    let (e, s) = tiny.retrieve_top1(&[0.6, 0.8])?;
    c.check("retrieval: (0.6,0.8) -> e2 at 0.8", e.id == "e2" && (s - 0.8).abs() < TOL);
    c.check("threshold: (0.86, 0.85) -> 1", threshold_judge(0.86, 0.85) == 1);
    c.check("threshold: (0.84, 0.85) -> 0", threshold_judge(0.84, 0.85) == 0);
    c.check("threshold: (0.85, 0.85) -> 1", threshold_judge(0.85, 0.85) == 1);
    Ok(())
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .expect("valid request");
    let resp = app.clone().oneshot(req).await.expect("infallible");
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.expect("body").to_vec())
}

async fn service(c: &mut Checks) -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.json");
    save_params(&toy_params(), &path)?;
    let hash = content_hash(&std::fs::read(&path)?);
    let state = Arc::new(ServiceState::new(Some(LoadedModel::load(&path)?), InferenceConfig::evaluation(), None));
    let app = router(state);
    let body = json!({"embedding": toy_embedding(), "votes": TOY_VOTES}).to_string().into_bytes();
    let (status, bytes) = call(&app, "POST", "/v1/judge", body.clone()).await;
    let v: Value = serde_json::from_slice(&bytes)?;
    c.check(
        "service: toy request gives p_hat near 0.15 and decision 0",
        status == StatusCode::OK && (v["p_hat"].as_f64().unwrap_or(1.0) - 0.15).abs() <= 0.02 && v["decision"] == 0,
    );
    c.check("service: identical body, identical bytes", call(&app, "POST", "/v1/judge", body).await.1 == bytes);
    let short = json!({"embedding": toy_embedding(), "votes": [1, 1]}).to_string().into_bytes();
    let (status, err) = call(&app, "POST", "/v1/judge", short).await;
    c.check(
        "service: k-1 votes is a 400 naming votes",
        status == StatusCode::BAD_REQUEST && String::from_utf8_lossy(&err).contains("votes"),
    );
    let (status, h) = call(&app, "GET", "/healthz", vec![]).await;
    let h: Value = serde_json::from_slice(&h)?;
    c.check("health: 200 with d and k", status == StatusCode::OK && h["d"] == 4 && h["k"] == 3);
    c.check("health: model hash matches the file", h["model_hash"] == hash.as_str() && v["model_hash"] == hash.as_str());
    let empty = router(Arc::new(ServiceState::new(None, InferenceConfig::evaluation(), None)));
    c.check("health: no model is 503", call(&empty, "GET", "/healthz", vec![]).await.0 == StatusCode::SERVICE_UNAVAILABLE);
    Ok(())
}

fn interface(c: &mut Checks) -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let sim = p("sim.jsonl");
    let code = run_cli(["ral2m", "simulate", "--config", "correlated-clique", "--n", "50000", "--seed", "7", "--out", &sim]);
    c.check("cli: simulate writes a valid dataset", code == 0 && ral2m_core::read_dataset(&sim)?.len() == 50_000);
    c.check("cli: train without --data exits 2", run_cli(["ral2m", "train", "--model", &p("m.json"), "--seed", "1"]) == 2);
    let (model, data, preds) = (p("toy.json"), p("toy.jsonl"), p("preds.jsonl"));
    save_params(&toy_params(), &model)?;
    save_dataset(&toy_dataset(), &data)?;
    let code = run_cli(["ral2m", "eval", "--model", &model, "--data", &data, "--seed", "0", "--out", &preds]);
    let lib = infer_dataset(&toy_params(), &toy_dataset(), &InferenceConfig::evaluation())?;
    let rows: Vec<Value> = std::fs::read_to_string(&preds)?
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let same = rows.len() == lib.len()
        && rows.iter().zip(&lib).all(|(r, l)| {
            r["decision"].as_u64() == Some(u64::from(l.decision))
                && r["p_hat"].as_f64().map(f64::to_bits) == Some(l.p_hat.to_bits())
        });
    c.check("cli: eval decisions equal library inference", code == 0 && same);
    Ok(())
}
