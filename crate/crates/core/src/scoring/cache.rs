use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendKind, ContinuationScore, Result, ScoreError, Scorer, SequenceScore, TokenScore};
use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredToken {
    text: String,
    start: usize,
    end: usize,
    nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Entry {
    Sequence { tokens: Vec<StoredToken>, total: f64 },
    Continuation { nll: f64, tokens: usize },
    Generation { text: String },
}

/// Memoizes scorer results by a hash of (model identifier, request kind,
/// exact text). Entries live in memory and, when a directory is given, as one
/// JSON file each under `dir/ab/cdef...json`. Entries are only removed by
/// [`ScoreCache::flush`].
#[derive(Debug)]
pub struct ScoreCache {
    dir: Option<PathBuf>,
    entries: Mutex<HashMap<String, Entry>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ScoreError::Cache {
            path: dir.clone(),
            source,
        })?;
        Ok(Self {
            dir: Some(dir),
            entries: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Number of entries held in memory.
    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every entry, in memory and on disk.
    pub fn flush(&self) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        entries.clear();
        if let Some(dir) = &self.dir {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|source| ScoreError::Cache {
                    path: dir.clone(),
                    source,
                })?;
            }
            fs::create_dir_all(dir).map_err(|source| ScoreError::Cache {
                path: dir.clone(),
                source,
            })?;
        }
        Ok(())
    }

    fn key(model_id: &str, kind: &str, parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in [model_id, kind].iter().chain(parts) {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path_of(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key[..2]).join(format!("{}.json", &key[2..])))
    }

    fn get(&self, key: &str) -> Option<Entry> {
        if let Some(e) = self.entries.lock().unwrap().get(key) {
            return Some(e.clone());
        }
        let path = self.path_of(key)?;
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) => {
                self.entries
                    .lock()
                    .unwrap()
                    .insert(key.to_string(), entry.clone());
                Some(entry)
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn put(&self, key: &str, entry: Entry) -> Result<()> {
        // Holding the lock across the write serializes disk access.
        let mut entries = self.entries.lock().unwrap();
        if let Some(path) = self.path_of(key) {
            let io = |source| ScoreError::Cache {
                path: path.clone(),
                source,
            };
            fs::create_dir_all(path.parent().unwrap()).map_err(io)?;
            let tmp = path.with_extension("json.tmp");
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&serde_json::to_vec(&entry).expect("cache entry serializes"))
                .map_err(io)?;
            drop(f);
            fs::rename(&tmp, &path).map_err(io)?;
        }
        entries.insert(key.to_string(), entry);
        Ok(())
    }
}

/// A scorer whose results are read through a [`ScoreCache`].
///
/// Every method caches what the inner scorer returns, so results are the same
/// with or without the cache.
pub struct CachedScorer<S> {
    inner: S,
    cache: ScoreCache,
}

impl<S> CachedScorer<S> {
    pub fn new(inner: S, cache: ScoreCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<F: Scalar, S: Scorer<F>> Scorer<F> for CachedScorer<S> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>> {
        let key = ScoreCache::key(self.inner.model_id(), "sequence", &[text]);
        if let Some(Entry::Sequence { tokens, .. }) = self.cache.get(&key) {
            return Ok(SequenceScore::from_tokens(
                tokens
                    .into_iter()
                    .map(|t| TokenScore {
                        text: t.text,
                        span: t.start..t.end,
                        nll: F::of(t.nll),
                    })
                    .collect(),
            ));
        }
        let score = self.inner.score_sequence(text)?;
        let tokens = score
            .tokens
            .iter()
            .map(|t| StoredToken {
                text: t.text.clone(),
                start: t.span.start,
                end: t.span.end,
                nll: t.nll.as_f64(),
            })
            .collect();
        self.cache.put(
            &key,
            Entry::Sequence {
                tokens,
                total: score.total.as_f64(),
            },
        )?;
        Ok(score)
    }

    fn score_continuation(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore<F>> {
        let key = ScoreCache::key(self.inner.model_id(), "continuation", &[prefix, continuation]);
        if let Some(Entry::Continuation { nll, tokens }) = self.cache.get(&key) {
            return Ok(ContinuationScore {
                nll: F::of(nll),
                tokens,
            });
        }
        let score = self.inner.score_continuation(prefix, continuation)?;
        self.cache.put(
            &key,
            Entry::Continuation {
                nll: score.nll.as_f64(),
                tokens: score.tokens,
            },
        )?;
        Ok(score)
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &str) -> Result<String> {
        let budget = max_tokens.to_string();
        let key = ScoreCache::key(self.inner.model_id(), "generate", &[prompt, &budget, stop]);
        if let Some(Entry::Generation { text }) = self.cache.get(&key) {
            return Ok(text);
        }
        let text = self.inner.generate(prompt, max_tokens, stop)?;
        self.cache.put(&key, Entry::Generation { text: text.clone() })?;
        Ok(text)
    }
}
