//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! `RAL2M_ACCEPTANCE_ONLY=2,9` runs a subset. `RAL2M_ACCEPTANCE_STRICT=1` turns
//! any failed criterion into a non-zero exit; by default failures are reported
//! but the run itself succeeds.

mod closed_form;
#[path = "../../../pipeline/tests/common/mod.rs"]
mod stub;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

/// Named sub-checks of one criterion; the criterion passes when all of them do.
#[derive(Default)]
pub struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    pub fn check(&mut self, name: &str, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    pub fn close(&mut self, name: &str, actual: f64, expected: f64, tol: f64) {
        let ok = (actual - expected).abs() <= tol;
        self.total += 1;
        if !ok {
            self.failed.push(format!("{name} (got {actual}, expected {expected} ± {tol:e})"));
        }
    }

    pub fn failed_is_empty(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn verdict(self) -> Verdict {
        if self.failed.is_empty() {
            Verdict::new(true, format!("{} examples pass", self.total))
        } else {
            Verdict::new(
                false,
                format!("{} of {} examples fail: {}", self.failed.len(), self.total, self.failed.join("; ")),
            )
        }
    }
}

type Body = fn() -> anyhow::Result<Verdict>;

struct Criterion {
    id: u32,
    title: &'static str,
    limit: Option<Duration>,
    body: Body,
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, title: "closed-form unit suite", limit: secs(10), body: closed_form::run },
        Criterion { id: 2, title: "toy-fixture regression", limit: secs(1), body: numeric::toy_fixture },
        Criterion { id: 3, title: "gradient correctness", limit: secs(120), body: numeric::gradients },
        Criterion { id: 4, title: "fixed-point convergence", limit: secs(30), body: numeric::convergence },
        Criterion { id: 5, title: "KL closed form vs Monte Carlo", limit: secs(60), body: numeric::kl_vs_mc },
        Criterion { id: 6, title: "MC variance scaling", limit: secs(120), body: numeric::mc_variance },
        Criterion { id: 7, title: "voting oracle equivalence", limit: secs(5), body: numeric::voting_oracles },
        Criterion { id: 8, title: "simulator fidelity", limit: secs(60), body: numeric::simulator_fidelity },
        Criterion { id: 9, title: "ensemble gain on correlated-clique", limit: secs(900), body: learning::ensemble_gain },
        Criterion { id: 10, title: "query adaptivity", limit: secs(900), body: learning::query_adaptivity },
        Criterion { id: 11, title: "data-scaling trend", limit: secs(1800), body: learning::data_scaling },
        Criterion { id: 12, title: "determinism", limit: None, body: serving::determinism },
        Criterion { id: 13, title: "retrieval oracle", limit: secs(30), body: serving::retrieval },
    ]
}

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("RAL2M_ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let strict = std::env::var("RAL2M_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut out = std::io::stdout();
    let mut passed = 0;
    let mut run = 0;
    for c in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        run += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.body));
        let elapsed = start.elapsed();
        let mut v = match result {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::new(false, format!("error: {e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Verdict::new(false, format!("panicked: {msg}"))
            }
        };
        let timing = match c.limit {
            Some(l) => {
                if elapsed > l {
                    v.pass = false;
                    v.detail.push_str(&format!("; over the {} s budget", l.as_secs()));
                }
                format!("{:.1} s of {} s", elapsed.as_secs_f64(), l.as_secs())
            }
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        if v.pass {
            passed += 1;
        }
        let tag = if v.pass { "PASS" } else { "FAIL" };
        writeln!(out, "[{tag}] criterion {:>2} {}: {} ({timing})", c.id, c.title, v.detail).unwrap();
        out.flush().unwrap();
    }
    writeln!(out, "acceptance: {passed} of {run} criteria passed").unwrap();
    if strict && passed < run {
        std::process::exit(1);
    }
}
