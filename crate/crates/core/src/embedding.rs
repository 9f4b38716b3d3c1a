//! Text embeddings and cosine similarity.
//!
//! Two backends ship: [`HashedEmbedder`], a deterministic bag-of-tokens
//! hasher used offline and in tests, and [`RemoteEmbedder`], which calls an
//! OpenAI-compatible `/embeddings` endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clip_chars, Trajectory};
use crate::retry::RetryPolicy;

/// Default character budget used when condensing a trajectory for embedding.
pub const DEFAULT_CONDENSE_CHARS: usize = 20_000;
pub const DEFAULT_HASHED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbedding", into = "RawEmbedding")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    backend_tag: String,
}

#[derive(Serialize, Deserialize)]
struct RawEmbedding {
    backend_tag: String,
    dim: usize,
    values: Vec<f64>,
}

impl TryFrom<RawEmbedding> for EmbeddingVector {
    type Error = Error;

    fn try_from(raw: RawEmbedding) -> Result<Self> {
        if raw.dim != raw.values.len() {
            return Err(Error::invalid(format!(
                "embedding dim {} does not match {} values",
                raw.dim,
                raw.values.len()
            )));
        }
        EmbeddingVector::new(raw.values, raw.backend_tag)
    }
}

impl From<EmbeddingVector> for RawEmbedding {
    fn from(v: EmbeddingVector) -> Self {
        RawEmbedding {
            dim: v.values.len(),
            values: v.values,
            backend_tag: v.backend_tag,
        }
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, backend_tag: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have dim > 0"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding value {i} is not finite")));
        }
        Ok(EmbeddingVector {
            values,
            backend_tag: backend_tag.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn backend_tag(&self) -> &str {
        &self.backend_tag
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        EmbeddingVector::new(self.values.iter().map(|v| v * factor).collect(), self.backend_tag.clone())
    }

    pub fn is_compatible(&self, other: &EmbeddingVector) -> bool {
        self.dim() == other.dim() && self.backend_tag == other.backend_tag
    }
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.backend_tag != v.backend_tag {
        return Err(Error::invalid(format!(
            "backend mismatch: {:?} vs {:?}",
            u.backend_tag, v.backend_tag
        )));
    }
    if u.dim() != v.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", u.dim(), v.dim())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector is undefined"));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn backend_tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn backend_tag(&self) -> &str {
        (**self).backend_tag()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }
}

/// Embeds a trajectory through [`condense_for_embedding`].
pub fn embed_trajectory(embedder: &dyn Embedder, t: &Trajectory, char_budget: usize) -> Result<EmbeddingVector> {
    embedder.embed(&condense_for_embedding(t, char_budget))
}

/// Seed mixed into every token hash of [`HashedEmbedder`].
pub const HASH_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the little-endian seed bytes followed by the token bytes.
pub fn token_hash(token: &str) -> u64 {
    HASH_SEED
        .to_le_bytes()
        .iter()
        .chain(token.as_bytes())
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-tokens: each token adds 1 to bucket `token_hash % dim`, then
/// the vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    tag: String,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        HashedEmbedder {
            dim,
            tag: "hashed-bow-v1".to_string(),
        }
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASHED_DIM)
    }
}

impl Embedder for HashedEmbedder {
    fn backend_tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut values = vec![0.0f64; self.dim];
        for tok in tokenize(text) {
            values[(token_hash(&tok) % self.dim as u64) as usize] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("text has no tokens to embed"));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        EmbeddingVector::new(values, self.tag.clone())
    }
}

/// Client for an OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    dim: usize,
    tag: String,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, dim: usize) -> Result<Self> {
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(RemoteEmbedder {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            tag: format!("remote:{model}"),
            model,
            dim,
            retry: RetryPolicy::embedding_default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn backend_tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let url = format!("{}/embeddings", self.base_url);
        let body = serde_json::json!({ "model": self.model, "input": text });
        let resp = self.retry.send(|| {
            let req = self.client.post(&url).json(&body);
            match &self.api_key {
                Some(key) => req.bearer_auth(key),
                None => req,
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::BackendUnavailable {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
            });
        }
        let parsed: EmbeddingsResponse = resp.json().map_err(|e| Error::BackendUnavailable {
            status: Some(status.as_u16()),
            message: format!("malformed embeddings response: {e}"),
        })?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::BackendUnavailable {
                status: Some(status.as_u16()),
                message: "embeddings response had no data".into(),
            })?
            .embedding;
        if values.len() != self.dim {
            return Err(Error::invalid(format!(
                "endpoint returned dim {}, configured dim is {}",
                values.len(),
                self.dim
            )));
        }
        EmbeddingVector::new(values, self.tag.clone())
    }
}

/// Condenses a trajectory into at most `char_budget` characters.
///
/// The first line is the question; each step follows as `agent: content`.
/// When the full text does not fit, every agent name is kept and each step's
/// content is clipped to an equal share of what remains after the question and
/// the per-step prefixes. If the question alone exceeds the budget, the
/// output is the clipped question; if the prefixes do not fit, the skeleton
/// itself is clipped.
pub fn condense_for_embedding(t: &Trajectory, char_budget: usize) -> String {
    let full = condensed(t, |c| c);
    if full.chars().count() <= char_budget {
        return full;
    }
    let question_len = t.question.chars().count();
    if question_len >= char_budget {
        return clip_chars(&t.question, char_budget).to_string();
    }
    let skeleton = condensed(t, |_| "");
    let skeleton_len = skeleton.chars().count();
    if skeleton_len >= char_budget {
        return clip_chars(&skeleton, char_budget).to_string();
    }
    let share = (char_budget - skeleton_len) / t.steps.len();
    condensed(t, |c| clip_chars(c, share))
}

/// Per-step content share [`condense_for_embedding`] uses under `char_budget`,
/// or `None` when no clipping happens.
pub fn condense_share(t: &Trajectory, char_budget: usize) -> Option<usize> {
    if condensed(t, |c| c).chars().count() <= char_budget {
        return None;
    }
    let skeleton_len = condensed(t, |_| "").chars().count();
    Some(char_budget.saturating_sub(skeleton_len) / t.steps.len())
}

fn condensed<'a>(t: &'a Trajectory, content: impl Fn(&'a str) -> &'a str) -> String {
    let mut out = t.question.clone();
    for s in &t.steps {
        out.push('\n');
        out.push_str(&s.agent);
        out.push_str(": ");
        out.push_str(content(&s.content));
    }
    out
}
