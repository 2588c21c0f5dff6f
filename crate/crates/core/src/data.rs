//! Labeled judge-vote instances and the JSON Lines dataset format.
//!
//! A dataset file starts with a header line
//! `{"schema":"ral2m-v1","d":..,"k":..,"judges":[..]}` followed by one
//! instance object per line. Judge order is positional: `votes[i]` always
//! belongs to `judges[i]`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "ral2m-v1";

/// One row of a dataset: a query embedding, the k judge votes and (usually) the gold label.
///
/// Fields are stored raw so that invalid rows can be represented and reported by
/// [`validate_instance`]; a [`Dataset`] only ever holds rows that passed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub embedding: Vec<f64>,
    pub votes: Vec<u8>,
    /// `None` for inference-only rows; training rejects them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(rename = "domain", default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
    #[serde(rename = "query", default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>, votes: Vec<u8>, label: u8) -> Self {
        LabeledInstance {
            id: id.into(),
            embedding,
            votes,
            label: Some(label),
            domain_tag: None,
            query_text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmbeddingLength { expected: usize, actual: usize },
    NonFiniteEmbedding { index: usize },
    VoteCount { expected: usize, actual: usize },
    VoteValue { index: usize, value: i64 },
    LabelValue { value: i64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmbeddingLength { expected, actual } => {
                write!(f, "embedding: expected length {expected}, got {actual}")
            }
            Violation::NonFiniteEmbedding { index } => {
                write!(f, "embedding[{index}]: value is not finite")
            }
            Violation::VoteCount { expected, actual } => {
                write!(f, "votes: expected {expected} entries, got {actual}")
            }
            Violation::VoteValue { index, value } => {
                write!(f, "votes[{index}]: value {value} is not 0 or 1")
            }
            Violation::LabelValue { value } => write!(f, "label: value {value} is not 0 or 1"),
        }
    }
}

fn check_fields(
    embedding: &[f64],
    votes: impl ExactSizeIterator<Item = i64>,
    label: Option<i64>,
    d: usize,
    k: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if embedding.len() != d {
        out.push(Violation::EmbeddingLength {
            expected: d,
            actual: embedding.len(),
        });
    }
    for (index, x) in embedding.iter().enumerate() {
        if !x.is_finite() {
            out.push(Violation::NonFiniteEmbedding { index });
        }
    }
    if votes.len() != k {
        out.push(Violation::VoteCount {
            expected: k,
            actual: votes.len(),
        });
    }
    for (index, value) in votes.enumerate() {
        if value != 0 && value != 1 {
            out.push(Violation::VoteValue { index, value });
        }
    }
    if let Some(value) = label {
        if value != 0 && value != 1 {
            out.push(Violation::LabelValue { value });
        }
    }
    out
}

/// Checks every invariant of `inst` against the dataset dimensions and returns all
/// violations, not just the first.
pub fn validate_instance(
    inst: &LabeledInstance,
    d: usize,
    k: usize,
) -> std::result::Result<(), Vec<Violation>> {
    let violations = check_fields(
        &inst.embedding,
        inst.votes.iter().map(|&v| i64::from(v)),
        inst.label.map(i64::from),
        d,
        k,
    );
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    k: usize,
    judges: Vec<String>,
    instances: Vec<LabeledInstance>,
}

pub fn default_judge_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("judge-{i}")).collect()
}

impl Dataset {
    pub fn new(
        d: usize,
        k: usize,
        judges: Vec<String>,
        instances: Vec<LabeledInstance>,
    ) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset dimensions must be positive (d={d}, k={k})"
            )));
        }
        if judges.len() != k {
            return Err(Error::Dimension {
                what: "judges",
                expected: k,
                actual: judges.len(),
            });
        }
        let mut seen = HashSet::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if let Err(v) = validate_instance(inst, d, k) {
                return Err(Error::InvalidArgument(format!(
                    "instance {i} ({:?}): {}",
                    inst.id,
                    join_violations(&v)
                )));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Dataset {
            d,
            k,
            judges,
            instances,
        })
    }

    pub fn empty(d: usize, k: usize) -> Self {
        Dataset {
            d,
            k,
            judges: default_judge_names(k),
            instances: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn judges(&self) -> &[String] {
        &self.judges
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Gold labels; fails if any row is unlabeled.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.instances
            .iter()
            .map(|inst| {
                inst.label.ok_or_else(|| {
                    Error::InvalidArgument(format!("instance {:?} has no label", inst.id))
                })
            })
            .collect()
    }

    /// A dataset with the same header and the given rows (taken from `self` by index).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d: self.d,
            k: self.k,
            judges: self.judges.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    d: usize,
    k: usize,
    judges: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: String,
    embedding: Vec<f64>,
    votes: Vec<i64>,
    #[serde(default)]
    label: Option<i64>,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    query: Option<String>,
}

/// Loads a dataset taking `d` and `k` from its own header.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad header: {e}"),
        })?;
        return load_dataset(path, header.d, header.k);
    }
    Err(Error::Parse {
        line: 0,
        message: format!("{}: no header line", path.display()),
    })
}

pub fn load_dataset(path: impl AsRef<Path>, expected_d: usize, expected_k: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = loop {
        match lines.next() {
            None => return Ok(Dataset::empty(expected_d, expected_k)),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
                break header;
            }
        }
    };
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Version {
            expected: DATASET_SCHEMA.to_string(),
            found: header.schema,
        });
    }
    if header.d != expected_d {
        return Err(Error::Dimension {
            what: "embedding dimension d",
            expected: expected_d,
            actual: header.d,
        });
    }
    if header.k != expected_k {
        return Err(Error::Dimension {
            what: "judge count k",
            expected: expected_k,
            actual: header.k,
        });
    }
    if header.judges.len() != header.k {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header lists {} judges but k = {}",
                header.judges.len(),
                header.k
            ),
        });
    }

    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let violations = check_fields(
            &raw.embedding,
            raw.votes.iter().copied(),
            raw.label,
            header.d,
            header.k,
        );
        if !violations.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: join_violations(&violations),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        instances.push(LabeledInstance {
            id: raw.id,
            embedding: raw.embedding,
            votes: raw.votes.into_iter().map(|v| v as u8).collect(),
            label: raw.label.map(|v| v as u8),
            domain_tag: raw.domain,
            query_text: raw.query,
        });
    }
    Ok(Dataset {
        d: header.d,
        k: header.k,
        judges: header.judges,
        instances,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        schema: DATASET_SCHEMA.to_string(),
        d: ds.d,
        k: ds.k,
        judges: ds.judges.clone(),
    };
    let write_line = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(&mut w, serde_json::to_string(&header).expect("header serializes"))?;
    for inst in &ds.instances {
        let line = serde_json::to_string(inst).map_err(|e| {
            Error::InvalidArgument(format!("instance {:?} not serializable: {e}", inst.id))
        })?;
        write_line(&mut w, line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Round half up; `fraction * n` is never negative here.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Seeded shuffle split into (train, test). Train gets `round(fraction * n)` rows (half up).
///
/// With `stratify_by_label` the same fraction is taken from each label class; the
/// per-class counts are adjusted by largest remainder so the total stays exact.
/// Both outputs keep the original relative row order.
pub fn split_dataset(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
    stratify_by_label: bool,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let n = ds.len();
    let n_train = round_half_up(train_fraction * n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut train_idx: Vec<usize> = if stratify_by_label {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 3];
        for (i, inst) in ds.instances.iter().enumerate() {
            let g = inst.label.map_or(2, usize::from);
            groups[g].push(i);
        }
        let quotas = largest_remainder(
            &groups.iter().map(Vec::len).collect::<Vec<_>>(),
            n_train,
            n,
        );
        let mut out = Vec::with_capacity(n_train);
        for (group, quota) in groups.iter_mut().zip(quotas) {
            group.shuffle(&mut rng);
            out.extend_from_slice(&group[..quota]);
        }
        out
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate(n_train);
        order
    };
    train_idx.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let test_idx: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}

fn largest_remainder(sizes: &[usize], total: usize, n: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quotas[g] < sizes[g] {
            quotas[g] += 1;
            remaining -= 1;
        }
    }
    quotas
}
