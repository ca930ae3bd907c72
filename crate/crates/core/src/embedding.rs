//! Tokenization and vector representations of words and utterances.
//!
//! Two provider flavors share this module:
//! - [`EmbeddingProvider`]: one vector per utterance (sentence encoders).
//! - [`WordLookup`]: one vector per token (pretrained word-vector tables).
//!
//! [`HashEmbedder`] implements both with no external files, so the whole
//! pipeline runs in tests. Pretrained sentence encoders plug in through
//! [`PrecomputedProvider`], which serves vectors an external encoder has
//! written into an [`EmbeddingCache`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{write_atomic, Utterance};
use crate::{Error, Result};

/// Utterances beyond this count are dropped from the end of a document.
pub const MAX_UTTERANCES: usize = 2000;
/// Tokens beyond this count are dropped from the end of an utterance.
pub const MAX_TOKENS_PER_UTTERANCE: usize = 128;

/// Lowercase, split punctuation into single-character tokens, collapse
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Tokens of one utterance after the per-utterance cap.
pub fn capped_tokens(text: &str) -> Vec<String> {
    let mut t = tokenize(text);
    t.truncate(MAX_TOKENS_PER_UTTERANCE);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Sentence,
    Word,
}

/// Maps utterances to fixed-width vectors. Implementations are read-only
/// after construction and deterministic.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn kind(&self) -> ProviderKind;
    /// Identity string folded into cache keys. Two providers with the same id
    /// must embed identically.
    fn id(&self) -> String;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_utterance(&self, utterance: &Utterance) -> Result<Vec<f64>> {
        self.embed_text(&utterance.text)
    }
}

/// Token-level vector lookup. Total: unknown tokens resolve per the
/// implementation's out-of-vocabulary policy.
pub trait WordLookup: Send + Sync {
    fn dim(&self) -> usize;
    /// Write the vector of `token` into `out`. Returns false when the token
    /// is out of vocabulary.
    fn lookup_into(&self, token: &str, out: &mut [f64]) -> bool;

    fn lookup(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.lookup_into(token, &mut v);
        v
    }
}

/// Fraction of `tokens` a lookup does not know.
pub fn oov_rate<'a>(lookup: &dyn WordLookup, tokens: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut scratch = vec![0.0; lookup.dim()];
    let (mut total, mut missing) = (0usize, 0usize);
    for tok in tokens {
        total += 1;
        if !lookup.lookup_into(tok, &mut scratch) {
            missing += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic embedder that needs no model files.
///
/// Each token seeds a pseudorandom generator through a stable 64-bit hash and
/// draws a standard-normal vector. An utterance is the L2-normalized mean of
/// its token vectors; an utterance without tokens embeds to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn token_vector_into(&self, token: &str, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
        for x in out.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Sentence
    }

    fn id(&self) -> String {
        format!("hash-fnv1a-chacha8-{}", self.dim)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = capped_tokens(text);
        let mut sum = vec![0.0; self.dim];
        if tokens.is_empty() {
            return Ok(sum);
        }
        let mut buf = vec![0.0; self.dim];
        for tok in &tokens {
            self.token_vector_into(tok, &mut buf);
            sum.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
        }
        let n = tokens.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            sum.iter_mut().for_each(|s| *s /= norm);
        }
        Ok(sum)
    }
}

impl WordLookup for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup_into(&self, token: &str, out: &mut [f64]) -> bool {
        self.token_vector_into(token, out);
        true
    }
}

/// Word vectors loaded from a whitespace-separated text file
/// (`token v1 ... v_dim` per line). Unknown tokens map to the zero vector.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl WordEmbeddingTable {
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut table = Self {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
        };
        for (token, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if table.index.contains_key(&token) {
                continue;
            }
            table.index.insert(token, table.data.len() / dim);
            table.data.extend(v);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

pub fn load_word_embeddings(path: &Path, dim: usize) -> Result<WordEmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut index = HashMap::new();
    let mut data = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                path: path.into(),
                row: i + 1,
                reason: format!("expected token and {dim} values, found {} fields", fields.len()),
            });
        }
        let start = data.len();
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: path.into(),
                row: i + 1,
                reason: format!("bad number `{f}`"),
            })?;
            data.push(v);
        }
        if index.contains_key(fields[0]) {
            data.truncate(start);
            continue;
        }
        index.insert(fields[0].to_string(), start / dim);
    }
    Ok(WordEmbeddingTable { dim, index, data })
}

impl WordLookup for WordEmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup_into(&self, token: &str, out: &mut [f64]) -> bool {
        match self.index.get(token) {
            Some(&row) => {
                out.copy_from_slice(&self.data[row * self.dim..(row + 1) * self.dim]);
                true
            }
            None => {
                out.fill(0.0);
                false
            }
        }
    }
}

impl EmbeddingProvider for WordEmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Word
    }

    fn id(&self) -> String {
        format!("word-table-{}x{}", self.len(), self.dim)
    }

    /// Mean of token vectors, out-of-vocabulary tokens counting as zeros.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = capped_tokens(text);
        let mut sum = vec![0.0; self.dim];
        let mut buf = vec![0.0; self.dim];
        for tok in &tokens {
            self.lookup_into(tok, &mut buf);
            sum.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
        }
        Ok(sum)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"SEVEMB01";

/// Directory of cached utterance vectors, one file per content hash.
///
/// File layout: the 8-byte magic `SEVEMB01`, the dimension as a little-endian
/// `u32`, then that many little-endian `f64` values. Writes go through a
/// temp file and a rename, so readers never observe partial entries.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key: hex SHA-256 of the provider id, a newline, and the text.
    pub fn key(provider_id: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(provider_id.as_bytes());
        h.update(b"\n");
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.vec"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        decode_vector(&bytes)
            .map(Some)
            .ok_or_else(|| Error::Provider(format!("corrupt cache entry {}", path.display())))
    }

    pub fn put(&self, key: &str, vector: &[f64]) -> Result<()> {
        write_atomic(&self.path(key), &encode_vector(vector))
    }
}

pub fn encode_vector(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * v.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return None;
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().ok()?) as usize;
    if bytes.len() != 12 + 8 * dim {
        return None;
    }
    Some(
        bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Wraps a provider with a read-through disk cache.
pub struct CachedProvider<P> {
    inner: P,
    cache: EmbeddingCache,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = EmbeddingCache::key(&self.inner.id(), text);
        if let Some(v) = self.cache.get(&key)? {
            if v.len() == self.dim() {
                return Ok(v);
            }
        }
        let v = self.inner.embed_text(text)?;
        self.cache.put(&key, &v)?;
        Ok(v)
    }
}

/// Serves sentence vectors produced ahead of time by an external encoder
/// (for example a 768-d pretrained sentence transformer). Every requested
/// utterance must already be in the cache under `id`.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    id: String,
    dim: usize,
    cache: EmbeddingCache,
}

impl PrecomputedProvider {
    pub fn new(id: impl Into<String>, dim: usize, cache: EmbeddingCache) -> Self {
        Self {
            id: id.into(),
            dim,
            cache,
        }
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Sentence
    }

    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = EmbeddingCache::key(&self.id, text);
        match self.cache.get(&key)? {
            Some(v) if v.len() == self.dim => Ok(v),
            Some(v) => Err(Error::Provider(format!(
                "cached vector {key} has dim {}, expected {}",
                v.len(),
                self.dim
            ))),
            None => Err(Error::Provider(format!(
                "no precomputed embedding for utterance (key {key}) in {}",
                self.cache.dir().display()
            ))),
        }
    }
}
