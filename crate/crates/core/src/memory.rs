//! Process memory: embedded contextual stories in an exact (flat) cosine index.
//!
//! Retrieval only ever sees documents dated strictly before the `as_of` day.
//! Results are ordered by similarity (descending), then by more recent story
//! date, then by document id, so the order is total and `top-k` is always a
//! prefix of `top-(k+1)`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{self, BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use chrono::{Duration as Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{HttpJsonClient, LlmError, RetryPolicy};
use crate::narrative::{Granularity, Story, StoryFacts, StoryKind};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("memory documents must be contextual stories with a target")]
    NotContextual,
    #[error("story granularity {got} does not match index granularity {expected}")]
    WrongGranularity { expected: Granularity, got: Granularity },
    #[error("embedding provider: {0}")]
    Provider(#[from] LlmError),
    #[error("snapshot JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MemoryError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MemoryError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    dot(u, v) / (nu * nv)
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, MemoryError> {
    if u.dim() != v.dim() {
        return Err(MemoryError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(MemoryError::ZeroNorm);
    }
    Ok(cosine_with_norms(&u.0, &v.0, nu, nv))
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    /// Output dimension, when known up front.
    fn dim(&self) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, MemoryError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, MemoryError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Offline embedding: hashed character-trigram frequencies concatenated with
/// an angular encoding of the story's numbers, L2-normalized.
///
/// Each of the seven state numbers `x` maps to `(cos πs, sin πs)` with
/// `s = clamp(x / numeric_scale, 0, 1)`, so nearby values give nearby vectors.
/// Text that is not a rendered story gets a zero numeric block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashingEmbedder {
    pub trigram_dim: usize,
    pub numeric_scale: f64,
    pub text_weight: f64,
    pub numeric_weight: f64,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            trigram_dim: 256,
            numeric_scale: 100.0,
            text_weight: 1.0,
            numeric_weight: 1.0,
            seed: 0x5749_5043_4153_5431,
        }
    }
}

const NUMERIC_FEATURES: usize = 7;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashingEmbedder {
    pub fn with_scale(numeric_scale: f64) -> Self {
        HashingEmbedder {
            numeric_scale: numeric_scale.max(1.0),
            ..Default::default()
        }
    }

    fn trigram_block(&self, text: &str) -> Vec<f64> {
        let mut block = vec![0.0; self.trigram_dim];
        let padded: Vec<char> = format!("  {text} ").chars().collect();
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a(self.seed, &buf[..len]) % self.trigram_dim as u64) as usize;
            block[bucket] += 1.0;
        }
        let n = norm(&block);
        if n > 0.0 {
            block.iter_mut().for_each(|x| *x /= n);
        }
        block
    }

    fn numeric_block(&self, text: &str) -> Vec<f64> {
        let mut block = vec![0.0; 2 * NUMERIC_FEATURES];
        if let Some(facts) = StoryFacts::parse(text) {
            let unit = 1.0 / (NUMERIC_FEATURES as f64).sqrt();
            for (i, x) in facts.state().into_iter().enumerate() {
                let s = (x / self.numeric_scale).clamp(0.0, 1.0);
                block[2 * i] = (PI * s).cos() * unit;
                block[2 * i + 1] = (PI * s).sin() * unit;
            }
        }
        block
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn id(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.trigram_dim + 2 * NUMERIC_FEATURES)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MemoryError> {
        if text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v: Vec<f64> = self
            .trigram_block(text)
            .into_iter()
            .map(|x| x * self.text_weight)
            .chain(self.numeric_block(text).into_iter().map(|x| x * self.numeric_weight))
            .collect();
        let n = norm(&v);
        if n == 0.0 {
            return Err(MemoryError::ZeroNorm);
        }
        v.iter_mut().for_each(|x| *x /= n);
        EmbeddingVector::new(v)
    }
}

pub const DEFAULT_REMOTE_EMBEDDING_MODEL: &str = "bge-base-en-v1.5";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbeddingConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_concurrent: usize,
}

impl Default for RemoteEmbeddingConfig {
    fn default() -> Self {
        RemoteEmbeddingConfig {
            endpoint: "http://localhost:8080/v1".into(),
            model: DEFAULT_REMOTE_EMBEDDING_MODEL.into(),
            api_key_env: "EMBEDDING_API_KEY".into(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            max_concurrent: 4,
        }
    }
}

/// Embeddings endpoint speaking `{model, input: [..]}` → `{data: [{embedding}]}`.
pub struct RemoteEmbedder {
    config: RemoteEmbeddingConfig,
    client: HttpJsonClient,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbeddingConfig) -> Self {
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = HttpJsonClient::new(
            Duration::from_secs(config.timeout_secs),
            key,
            config.retry.clone(),
            config.max_concurrent,
        );
        RemoteEmbedder { config, client }
    }

    fn url(&self) -> String {
        let base = self.config.endpoint.trim_end_matches('/');
        if base.ends_with("embeddings") {
            base.to_string()
        } else {
            format!("{base}/embeddings")
        }
    }
}

fn parse_embeddings(v: &Value, expected: usize) -> Result<Vec<EmbeddingVector>, MemoryError> {
    let rows: Vec<&Value> = if let Some(data) = v.get("data").and_then(Value::as_array) {
        data.iter()
            .map(|d| d.get("embedding").unwrap_or(&Value::Null))
            .collect()
    } else if let Some(e) = v.get("embeddings").and_then(Value::as_array) {
        e.iter().collect()
    } else {
        return Err(LlmError::Malformed("no 'data' or 'embeddings' array".into()).into());
    };
    if rows.len() != expected {
        return Err(LlmError::Malformed(format!("expected {expected} embeddings, got {}", rows.len())).into());
    }
    rows.into_iter()
        .map(|row| {
            let values = row
                .as_array()
                .ok_or_else(|| LlmError::Malformed("embedding is not an array".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| LlmError::Malformed("non-numeric embedding".into())))
                .collect::<Result<Vec<_>, _>>()?;
            EmbeddingVector::new(values)
        })
        .collect()
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MemoryError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, MemoryError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(MemoryError::EmptyText);
        }
        let body = json!({ "model": self.config.model, "input": texts });
        let v = self.client.post(&self.url(), &body)?;
        parse_embeddings(&v, texts.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDocument {
    pub doc_id: String,
    pub story: Story,
    pub embedding: EmbeddingVector,
}

impl MemoryDocument {
    pub fn new(story: Story, embedding: EmbeddingVector) -> Result<Self, MemoryError> {
        if story.kind != StoryKind::Contextual || story.target.is_none() {
            return Err(MemoryError::NotContextual);
        }
        Ok(MemoryDocument {
            doc_id: doc_id_for(&story),
            story,
            embedding,
        })
    }
}

pub fn doc_id_for(story: &Story) -> String {
    format!("{}:{}", story.granularity, story.date)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub document: MemoryDocument,
    pub similarity: f64,
}

/// Optional pruning applied on top of the causality filter. Both off by default,
/// which retrieves from every earlier story.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Retention {
    /// Only consider stories dated within this many days before `as_of`.
    pub recent_days: Option<u32>,
    /// Drop candidates whose similarity is below this threshold.
    pub min_similarity: Option<f64>,
}

/// The total order used to rank retrieval candidates.
pub fn rank_order(a: (f64, NaiveDate, &str), b: (f64, NaiveDate, &str)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.cmp(&a.1))
        .then_with(|| a.2.cmp(b.2))
}

/// Exhaustive cosine index. The first insert fixes the dimension.
#[derive(Debug, Clone, Default)]
pub struct FlatIndex {
    dim: Option<usize>,
    docs: Vec<MemoryDocument>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl FlatIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn documents(&self) -> &[MemoryDocument] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&MemoryDocument> {
        self.positions.get(doc_id).map(|&i| &self.docs[i])
    }

    /// Latest story date in the index.
    pub fn max_date(&self) -> Option<NaiveDate> {
        self.docs.iter().map(|d| d.story.date).max()
    }

    /// Inserts a document; an existing document with the same id is replaced.
    pub fn add(&mut self, doc: MemoryDocument) -> Result<(), MemoryError> {
        let dim = doc.embedding.dim();
        if let Some(expected) = self.dim {
            if expected != dim {
                return Err(MemoryError::DimensionMismatch { expected, got: dim });
            }
        }
        let n = doc.embedding.norm();
        if n == 0.0 {
            return Err(MemoryError::ZeroNorm);
        }
        self.dim = Some(dim);
        match self.positions.get(&doc.doc_id) {
            Some(&i) => {
                self.docs[i] = doc;
                self.norms[i] = n;
            }
            None => {
                self.positions.insert(doc.doc_id.clone(), self.docs.len());
                self.docs.push(doc);
                self.norms.push(n);
            }
        }
        Ok(())
    }

    /// Keeps only documents satisfying `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&MemoryDocument) -> bool) {
        let docs = std::mem::take(&mut self.docs);
        self.norms.clear();
        self.positions.clear();
        for doc in docs.into_iter().filter(|d| keep(d)) {
            self.norms.push(doc.embedding.norm());
            self.positions.insert(doc.doc_id.clone(), self.docs.len());
            self.docs.push(doc);
        }
        if self.docs.is_empty() {
            self.dim = None;
        }
    }

    /// Top-`k` documents dated strictly before `as_of`.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        as_of: NaiveDate,
        k: usize,
        retention: &Retention,
    ) -> Result<Vec<RetrievalResult>, MemoryError> {
        let Some(dim) = self.dim else {
            return Ok(Vec::new());
        };
        if query.dim() != dim {
            return Err(MemoryError::DimensionMismatch {
                expected: dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(MemoryError::ZeroNorm);
        }
        let earliest = retention.recent_days.map(|d| as_of - Days::days(d as i64));
        let mut scored: Vec<(f64, usize)> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(_, d)| d.story.date < as_of && earliest.is_none_or(|e| d.story.date >= e))
            .map(|(i, d)| (cosine_with_norms(&query.0, &d.embedding.0, qn, self.norms[i]), i))
            .filter(|(s, _)| retention.min_similarity.is_none_or(|m| *s >= m))
            .collect();
        let key = |&(s, i): &(f64, usize)| (s, self.docs[i].story.date, self.docs[i].doc_id.as_str());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order(key(a), key(b));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(similarity, i)| RetrievalResult {
                document: self.docs[i].clone(),
                similarity,
            })
            .collect())
    }

    /// JSON lines of `{doc_id, date, granularity, text, target, embedding}`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), MemoryError> {
        for d in &self.docs {
            let line = SnapshotLine {
                doc_id: d.doc_id.clone(),
                date: d.story.date,
                granularity: d.story.granularity,
                text: d.story.text.clone(),
                target: d.story.target.unwrap_or_default(),
                embedding: d.embedding.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<FlatIndex, MemoryError> {
        let mut index = FlatIndex::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: SnapshotLine = serde_json::from_str(&line)?;
            index.add(MemoryDocument {
                doc_id: s.doc_id,
                story: Story {
                    date: s.date,
                    kind: StoryKind::Contextual,
                    granularity: s.granularity,
                    text: s.text,
                    target: Some(s.target),
                },
                embedding: EmbeddingVector::new(s.embedding.0)?,
            })?;
        }
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    doc_id: String,
    date: NaiveDate,
    granularity: Granularity,
    text: String,
    target: f64,
    embedding: EmbeddingVector,
}

/// One granularity's memory: an index plus the provider that embeds into it.
#[derive(Clone)]
pub struct ProcessMemory {
    pub granularity: Granularity,
    pub index: FlatIndex,
    pub retention: Retention,
    provider: Arc<dyn EmbeddingProvider>,
}

impl ProcessMemory {
    pub fn new(granularity: Granularity, provider: Arc<dyn EmbeddingProvider>, retention: Retention) -> Self {
        ProcessMemory {
            granularity,
            index: FlatIndex::new(),
            retention,
            provider,
        }
    }

    pub fn with_index(mut self, index: FlatIndex) -> Self {
        self.index = index;
        self
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Embeds a contextual story and stores it.
    pub fn add_story(&mut self, story: Story) -> Result<(), MemoryError> {
        if story.granularity != self.granularity {
            return Err(MemoryError::WrongGranularity {
                expected: self.granularity,
                got: story.granularity,
            });
        }
        let embedding = self.provider.embed(&story.text)?;
        self.index.add(MemoryDocument::new(story, embedding)?)
    }

    pub fn add_stories(&mut self, stories: Vec<Story>) -> Result<(), MemoryError> {
        let texts: Vec<&str> = stories.iter().map(|s| s.text.as_str()).collect();
        let embeddings = self.provider.embed_batch(&texts)?;
        for (story, embedding) in stories.into_iter().zip(embeddings) {
            if story.granularity != self.granularity {
                return Err(MemoryError::WrongGranularity {
                    expected: self.granularity,
                    got: story.granularity,
                });
            }
            self.index.add(MemoryDocument::new(story, embedding)?)?;
        }
        Ok(())
    }

    /// Embeds `query_text` and returns the top-`k` earlier stories.
    pub fn retrieve_text(&self, query_text: &str, as_of: NaiveDate, k: usize) -> Result<Vec<RetrievalResult>, MemoryError> {
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.provider.embed(query_text)?;
        self.index.search(&q, as_of, k, &self.retention)
    }

    pub fn retrieve(&self, query: &Story, as_of: NaiveDate, k: usize) -> Result<Vec<RetrievalResult>, MemoryError> {
        self.retrieve_text(&query.text, as_of, k)
    }
}
