//! Persistent cache of raw judge replies keyed by `(model_id, sha256(prompt))`.
//!
//! Entries are appended to `judge-cache.jsonl` in the cache directory and read
//! back on open, so repeated dataset collection never re-queries a judge.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const CACHE_FILE: &str = "judge-cache.jsonl";

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    model: String,
    prompt_sha256: String,
    reply: String,
}

#[derive(Debug)]
pub struct JudgeCache {
    entries: RwLock<HashMap<(String, String), String>>,
    writer: Option<(PathBuf, Mutex<File>)>,
}

impl JudgeCache {
    pub fn in_memory() -> Self {
        JudgeCache {
            entries: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    /// Opens (creating if needed) the cache stored under `dir`.
    /// A torn final line from an interrupted write is ignored.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| PipelineError::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| PipelineError::io(&path, e))?;
                match serde_json::from_str::<Record>(&line) {
                    Ok(r) => {
                        entries.insert((r.model, r.prompt_sha256), r.reply);
                    }
                    Err(e) if !line.trim().is_empty() => {
                        log::warn!("{}: skipping unreadable cache line: {e}", path.display())
                    }
                    Err(_) => {}
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::io(&path, e))?;
        Ok(JudgeCache {
            entries: RwLock::new(entries),
            writer: Some((path, Mutex::new(file))),
        })
    }

    pub fn get(&self, model: &str, prompt: &str) -> Option<String> {
        let key = (model.to_string(), prompt_hash(prompt));
        self.entries.read().unwrap().get(&key).cloned()
    }

    pub fn insert(&self, model: &str, prompt: &str, reply: &str) -> Result<()> {
        let hash = prompt_hash(prompt);
        if let Some((path, file)) = &self.writer {
            let mut line = serde_json::to_string(&Record {
                model: model.to_string(),
                prompt_sha256: hash.clone(),
                reply: reply.to_string(),
            })?;
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| PipelineError::io(path, e))?;
        }
        self.entries
            .write()
            .unwrap()
            .insert((model.to_string(), hash), reply.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
