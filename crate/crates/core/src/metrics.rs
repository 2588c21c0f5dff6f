//! Decision metrics (accuracy, hallucination rate, precision, recall, F1) and
//! inter-judge dependency statistics.
//!
//! Ratios with a zero denominator are `None`; they serialize as JSON `null`
//! and print as `undefined`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub hallucination: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        let n = counts.n();
        if n == 0 {
            return Err(Error::InvalidArgument("no instances to evaluate".into()));
        }
        let ConfusionCounts { tp, fp, tn, fn_ } = counts;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Ok(MetricsReport {
            n,
            counts,
            accuracy: (tp + tn) as f64 / n as f64,
            hallucination: ratio(fp, fp + tn),
            precision,
            recall,
            f1,
        })
    }

    /// Aligned plain-text table; `name` labels the row.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>9} {:>9} {:>9} {:>7}",
            name,
            fmt_opt(Some(self.accuracy)),
            fmt_opt(self.hallucination),
            fmt_opt(self.precision),
            fmt_opt(self.recall),
            fmt_opt(self.f1),
            self.n
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>9} {:>9} {:>9} {:>7}",
            "method", "acc", "hallu", "precision", "recall", "f1", "n"
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.counts;
        writeln!(f, "n             {}", self.n)?;
        writeln!(f, "accuracy      {}", fmt_opt(Some(self.accuracy)))?;
        writeln!(f, "hallucination {}", fmt_opt(self.hallucination))?;
        writeln!(f, "precision     {}", fmt_opt(self.precision))?;
        writeln!(f, "recall        {}", fmt_opt(self.recall))?;
        writeln!(f, "f1            {}", fmt_opt(self.f1))?;
        write!(f, "tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_)
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no instances to evaluate".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn evaluate(preds: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    MetricsReport::from_counts(confusion(preds, labels)?)
}

fn check_pair(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "sequences have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    Ok(())
}

/// Sample Pearson correlation of two binary sequences; `None` when either is constant.
pub fn pearson(a: &[u8], b: &[u8]) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let mb = b.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Cohen's kappa; `None` when chance agreement is 1.
pub fn cohen_kappa(a: &[u8], b: &[u8]) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let pa = a.iter().filter(|&&x| x != 0).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x != 0).count() as f64 / n;
    let pe = pa * pb + (1.0 - pa) * (1.0 - pb);
    if pe >= 1.0 {
        return Ok(None);
    }
    Ok(Some((agree - pe) / (1.0 - pe)))
}

/// `k x k` table: Pearson above the diagonal, kappa below, 1.0 on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyMatrix {
    pub judges: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl fmt::Display for DependencyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "")?;
        for j in &self.judges {
            write!(f, " {:>10}", truncate(j, 10))?;
        }
        for (name, row) in self.judges.iter().zip(&self.cells) {
            write!(f, "\n{:<12}", truncate(name, 12))?;
            for c in row {
                write!(f, " {:>10}", fmt_opt(*c))?;
            }
        }
        Ok(())
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

pub fn dependency_matrix(ds: &Dataset) -> Result<DependencyMatrix> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let k = ds.k();
    let columns: Vec<Vec<u8>> = (0..k)
        .map(|i| ds.instances().iter().map(|r| r.votes[i]).collect())
        .collect();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        cells[i][i] = Some(1.0);
        for j in i + 1..k {
            if ds.len() < 2 {
                continue;
            }
            cells[i][j] = pearson(&columns[i], &columns[j])?;
            cells[j][i] = cohen_kappa(&columns[i], &columns[j])?;
        }
    }
    Ok(DependencyMatrix {
        judges: ds.judges().to_vec(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementHistogram {
    /// `counts[m]` = instances with exactly `m` correct judges.
    pub counts: Vec<usize>,
    pub at_least_one_correct: f64,
    /// Fraction with at least `ceil((k+1)/2)` correct judges.
    pub majority_correct: f64,
}

pub fn judge_agreement_histogram(ds: &Dataset) -> Result<AgreementHistogram> {
    let labels = ds.labels()?;
    let k = ds.k();
    let mut counts = vec![0usize; k + 1];
    for (row, &y) in ds.instances().iter().zip(&labels) {
        counts[row.votes.iter().filter(|&&v| v == y).count()] += 1;
    }
    let n = ds.len();
    let frac = |from: usize| -> f64 {
        if n == 0 {
            return 0.0;
        }
        counts[from.min(k + 1)..].iter().sum::<usize>() as f64 / n as f64
    };
    let majority = (k + 2) / 2;
    Ok(AgreementHistogram {
        at_least_one_correct: frac(1),
        majority_correct: frac(majority),
        counts,
    })
}
