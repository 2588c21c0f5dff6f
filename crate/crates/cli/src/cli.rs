//! Argument definitions and subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ral2m_core::baselines::{
    fit_weights, majority_vote, neural_agg_infer, neural_agg_train, weighted_vote, NeuralAggConfig,
};
use ral2m_core::metrics::{evaluate, MetricsReport};
use ral2m_core::simulator::{load_population, oracle_predictions_tagged, simulate};
use ral2m_core::{
    infer_dataset, read_dataset, save_dataset, save_params, split_dataset, train, Dataset,
    InferenceConfig, TrainConfig,
};
use ral2m_pipeline::{Pipeline, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::service::{router, LoadedModel, ServiceState};

#[derive(Debug, Parser)]
#[command(name = "ral2m", version, about = "Query-adaptive latent ensemble of binary match judges")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the latent ensemble on a labeled dataset.
    Train(TrainArgs),
    /// Score a labeled dataset and print its metrics.
    Eval(EvalArgs),
    /// Predict every row of a dataset (labels optional).
    Infer(InferArgs),
    /// Draw a synthetic judge population dataset.
    Simulate(SimulateArgs),
    /// Build dataset rows from raw queries through retrieval and judge endpoints.
    Judge(JudgeArgs),
    /// Compare every aggregator (and the oracle on simulated data) on one test set.
    Bench(BenchArgs),
    /// Serve the frozen model over HTTP.
    Serve(ServeArgs),
}

/// Overrides for the inference settings.
#[derive(Debug, Clone, Args)]
pub struct InferenceFlags {
    /// Fixed-point iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Monte Carlo samples for the label marginal.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Damping of the fixed-point update, in (0.5, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Accept when the marginal strictly exceeds this value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl InferenceFlags {
    fn apply(&self, mut cfg: InferenceConfig) -> InferenceConfig {
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        if let Some(m) = self.mc_samples {
            cfg.mc_samples = m;
        }
        if let Some(a) = self.alpha {
            cfg.damping = a;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set for best-epoch selection; 10% of --data is held out when absent.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Where to write the trained parameters.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON training configuration; missing fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-epoch report (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Applied to the validation pass.
    #[command(flatten)]
    pub inference: InferenceFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Per-row predictions (JSON Lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceFlags,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Predictions (JSON Lines); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Named population or path to a population JSON file.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Pipeline configuration (knowledge base, encoder, judge endpoints).
    #[arg(long)]
    pub config: PathBuf,
    /// Queries as JSON Lines: {"query": .., "id": .., "label": ..}.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Retrieval-score threshold for the similarity baseline column.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Labeled test set.
    #[arg(long)]
    pub data: PathBuf,
    /// Labeled training set for the weighted vote and the neural baseline.
    #[arg(long)]
    pub train: PathBuf,
    /// Trained latent-ensemble parameters.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Population the data was simulated from; adds the Bayes-oracle row.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: u64,
    /// Neural baseline epochs.
    #[arg(long, default_value_t = 50)]
    pub neural_epochs: usize,
    /// Neural baseline hidden width.
    #[arg(long, default_value_t = 512)]
    pub neural_hidden: usize,
    /// Full-precision results (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Parameter file; without it the service reports 503.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pipeline configuration enabling POST /v1/match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub inference: InferenceFlags,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Judge(a) => cmd_judge(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.eval_inference = a.inference.apply(cfg.eval_inference);
    let data = load(&a.data)?;
    let (train_set, eval_set) = match &a.eval {
        Some(p) => (data, load(p)?),
        None => split_dataset(&data, 0.9, a.seed, true)?,
    };
    eprintln!(
        "training on {} rows, validating on {} (d={}, k={}, {} epochs)",
        train_set.len(),
        eval_set.len(),
        train_set.d(),
        train_set.k(),
        cfg.epochs
    );
    let (params, report) = train(&train_set, &eval_set, &cfg)?;
    save_params(&params, &a.model)?;
    if let Some(out) = &a.out {
        report.save_csv(out)?;
    }
    println!("{:>5} {:>10} {:>9} {:>9} {:>9}", "epoch", "loss", "train_acc", "eval_acc", "hallu");
    for r in &report.epochs {
        println!(
            "{:>5} {:>10.4} {:>9.4} {:>9} {:>9}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            ral2m_core::metrics::fmt_opt(r.eval_accuracy),
            ral2m_core::metrics::fmt_opt(r.eval_hallucination)
        );
    }
    println!(
        "best epoch {} of {} ({:.1} s); parameters written to {}",
        report.best_epoch,
        report.epochs.len(),
        report.wall_seconds,
        a.model.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    p_hat: f64,
    decision: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    posterior_mu: Vec<f64>,
}

fn predict(model: &Path, data: &Path, seed: u64, flags: &InferenceFlags) -> Result<(Dataset, Vec<PredictionRow>)> {
    let model = LoadedModel::load(model)?;
    let ds = load(data)?;
    let cfg = flags.apply(InferenceConfig {
        seed,
        ..InferenceConfig::evaluation()
    });
    let preds = infer_dataset(&model.params, &ds, &cfg)?;
    let rows = ds
        .instances()
        .iter()
        .zip(preds)
        .map(|(inst, p)| PredictionRow {
            id: inst.id.clone(),
            p_hat: p.p_hat,
            decision: p.decision,
            label: inst.label,
            posterior_mu: p.posterior.mu,
        })
        .collect();
    Ok((ds, rows))
}

fn write_jsonl<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ds, rows) = predict(&a.model, &a.data, a.seed, &a.inference)?;
    let labels = ds.labels()?;
    let decisions: Vec<u8> = rows.iter().map(|r| r.decision).collect();
    let report = evaluate(&decisions, &labels)?;
    println!("{}", MetricsReport::table_header());
    println!("{}", report.table_row("latent ensemble"));
    if let Some(out) = &a.out {
        write_jsonl(create(out)?, &rows)?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (_, rows) = predict(&a.model, &a.data, a.seed, &a.inference)?;
    match &a.out {
        Some(out) => write_jsonl(create(out)?, &rows),
        None => write_jsonl(std::io::stdout().lock(), &rows),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let pop = load_population(&a.config)?;
    let (ds, _) = simulate(&pop, a.n, a.seed)?;
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} rows (d={}, k={}) to {}", ds.len(), ds.d(), ds.k(), a.out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct QueryRow {
    #[serde(default)]
    id: Option<String>,
    query: String,
    #[serde(default)]
    label: Option<u8>,
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn cmd_judge(a: JudgeArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let pipeline = Pipeline::from_config(&cfg)?;
    let file = File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let mut queries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRow = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", a.data.display(), n + 1))?;
        queries.push(q);
    }
    let rt = runtime()?;
    let mut rows = Vec::with_capacity(queries.len());
    let mut threshold_decisions = Vec::with_capacity(queries.len());
    let mut failures = 0;
    for q in &queries {
        let (inst, outcome) = rt.block_on(pipeline.build_instance(&q.query, q.id.as_deref(), q.label))?;
        for f in &outcome.failures {
            eprintln!("{}: judge {} abstained: {}", inst.id, f.judge, f.error);
        }
        failures += outcome.failures.len();
        threshold_decisions.push(outcome.threshold_decision);
        rows.push(inst);
    }
    let ds = Dataset::new(pipeline.embedder.dim(), pipeline.judges.len(), pipeline.judge_names(), rows)?;
    save_dataset(&ds, &a.out)?;
    eprintln!(
        "wrote {} rows to {} ({} judge failures mapped to 0)",
        ds.len(),
        a.out.display(),
        failures
    );
    if let Ok(labels) = ds.labels() {
        let name = format!("threshold@{:.2}", cfg.threshold);
        println!("{}", MetricsReport::table_header());
        println!("{}", evaluate(&threshold_decisions, &labels)?.table_row(&name));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    method: String,
    metrics: MetricsReport,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let test = load(&a.data)?;
    let train_set = load(&a.train)?;
    if (test.d(), test.k()) != (train_set.d(), train_set.k()) {
        bail!("train and test sets disagree on d or k");
    }
    let labels = test.labels()?;
    let rows = test.instances();
    let mut results: Vec<BenchRow> = Vec::new();
    let mut push = |method: String, preds: Vec<u8>| -> Result<()> {
        results.push(BenchRow {
            method,
            metrics: evaluate(&preds, &labels)?,
        });
        Ok(())
    };

    for (i, name) in test.judges().iter().enumerate() {
        push(format!("{name} alone"), rows.iter().map(|r| r.votes[i]).collect())?;
    }
    push("majority vote".into(), rows.iter().map(|r| majority_vote(&r.votes)).collect())?;
    let w = fit_weights(&train_set)?;
    push("weighted vote".into(), rows.iter().map(|r| weighted_vote(&r.votes, &w)).collect())?;

    let ncfg = NeuralAggConfig {
        hidden: a.neural_hidden,
        epochs: a.neural_epochs,
        seed: a.seed,
        ..NeuralAggConfig::default()
    };
    let nparams = neural_agg_train(&train_set, &ncfg)?;
    let neural = rows
        .iter()
        .map(|r| Ok(neural_agg_infer(&nparams, &r.embedding, &r.votes)?.1))
        .collect::<Result<Vec<u8>>>()?;
    push("neural gating".into(), neural)?;

    if let Some(m) = &a.model {
        let model = LoadedModel::load(m)?;
        let cfg = a.inference.apply(InferenceConfig {
            seed: a.seed,
            ..InferenceConfig::evaluation()
        });
        let preds = infer_dataset(&model.params, &test, &cfg)?;
        push("latent ensemble".into(), preds.iter().map(|p| p.decision).collect())?;
    }
    if let Some(c) = &a.config {
        let pop = load_population(c)?;
        push("bayes oracle".into(), oracle_predictions_tagged(&pop, &test)?)?;
    }

    println!("{}", MetricsReport::table_header());
    for r in &results {
        println!("{}", r.metrics.table_row(&r.method));
    }
    if let Some(out) = &a.out {
        serde_json::to_writer_pretty(create(out)?, &results)?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let model = a.model.as_deref().map(LoadedModel::load).transpose()?;
    let inference = a.inference.apply(InferenceConfig::evaluation());
    inference.validate()?;
    let pipeline = match &a.config {
        Some(p) => Some(Pipeline::from_config(&PipelineConfig::load(p)?)?),
        None => None,
    };
    if let (Some(m), Some(p)) = (&model, &pipeline) {
        if p.embedder.dim() != m.params.d() || p.judges.len() != m.params.k() {
            bail!(
                "pipeline (d={}, k={}) does not match the model (d={}, k={})",
                p.embedder.dim(),
                p.judges.len(),
                m.params.d(),
                m.params.k()
            );
        }
    }
    match &model {
        Some(m) => eprintln!("serving model {} on http://{}", m.hash, a.addr),
        None => eprintln!("serving without a model on http://{}", a.addr),
    }
    let state = Arc::new(ServiceState::new(model, inference, pipeline));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
