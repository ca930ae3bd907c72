use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use severity_core::backbones::{Architecture, Embedder};
use severity_core::embedding::{
    load_word_embeddings, EmbeddingCache, EmbeddingProvider, HashEmbedder, PrecomputedProvider, WordEmbeddingTable,
};

pub const CACHE_ENV: &str = "SEVERITY_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Deterministic hashed token vectors; serves both utterance and word input.
    Hash,
    /// Word-vector text file (`token v1 ... vD` per line).
    Words,
    /// Utterance vectors precomputed into the embedding cache.
    Cache,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long, value_enum, default_value = "hash")]
    pub embedder: EmbedderKind,
    /// Vector width (default 64 for hash, 300 for words).
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Word-vector file for `--embedder words`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Provider id the cache was filled with, for `--embedder cache`.
    #[arg(long)]
    pub provider_id: Option<String>,
    #[arg(long, env = CACHE_ENV, default_value = ".severity-cache")]
    pub cache_dir: PathBuf,
}

pub enum Loaded {
    Hash(HashEmbedder),
    Words(WordEmbeddingTable),
    Cache(PrecomputedProvider),
}

impl EmbedArgs {
    pub fn load(&self) -> Result<Loaded> {
        Ok(match self.embedder {
            EmbedderKind::Hash => Loaded::Hash(HashEmbedder::new(self.embed_dim.unwrap_or(64))?),
            EmbedderKind::Words => {
                let Some(path) = &self.embeddings else {
                    bail!("--embedder words needs --embeddings PATH");
                };
                let table = load_word_embeddings(path, self.embed_dim.unwrap_or(300))?;
                log::info!("loaded {} word vectors from {}", table.len(), path.display());
                Loaded::Words(table)
            }
            EmbedderKind::Cache => {
                let (Some(id), Some(dim)) = (&self.provider_id, self.embed_dim) else {
                    bail!("--embedder cache needs --provider-id and --embed-dim");
                };
                let cache = EmbeddingCache::new(&self.cache_dir)
                    .with_context(|| format!("opening embedding cache {}", self.cache_dir.display()))?;
                Loaded::Cache(PrecomputedProvider::new(id.clone(), dim, cache))
            }
        })
    }
}

impl Loaded {
    pub fn id(&self) -> String {
        match self {
            Loaded::Hash(h) => h.id(),
            Loaded::Words(t) => EmbeddingProvider::id(t),
            Loaded::Cache(p) => p.id(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Loaded::Hash(h) => EmbeddingProvider::dim(h),
            Loaded::Words(t) => EmbeddingProvider::dim(t),
            Loaded::Cache(p) => p.dim(),
        }
    }

    /// The view `architecture` reads.
    pub fn for_architecture(&self, architecture: Architecture) -> Result<Embedder<'_>> {
        let sentence = architecture == Architecture::RnnTrans;
        Ok(match (self, sentence) {
            (Loaded::Hash(h), true) => Embedder::Sentence(h),
            (Loaded::Hash(h), false) => Embedder::Word(h),
            (Loaded::Words(t), false) => Embedder::Word(t),
            (Loaded::Cache(p), true) => Embedder::Sentence(p),
            (Loaded::Words(_), true) => bail!("{architecture} reads utterance vectors; use --embedder hash or cache"),
            (Loaded::Cache(_), false) => bail!("{architecture} reads word vectors; use --embedder hash or words"),
        })
    }
}
