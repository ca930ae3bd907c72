//! Planted-signal corpora whose severity is a known function of the text.
//!
//! Each script is filler dialogue interrupted by some number of one-word
//! utterances consisting of a marker token. The label is a staircase of that count:
//! 0 is None, 1-2 Mild, 3-5 Moderate, 6 or more Severe.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Aspect, AspectDataset, LabeledInstance, ScriptDocument, SeverityLevel};
use crate::{Error, Result};

pub const MARKER: &str = "zarquon";

/// Severity for a marker count.
pub fn staircase(count: usize) -> SeverityLevel {
    match count {
        0 => SeverityLevel::None,
        1..=2 => SeverityLevel::Mild,
        3..=5 => SeverityLevel::Moderate,
        _ => SeverityLevel::Severe,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub documents: usize,
    pub aspect: Aspect,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub vocabulary: usize,
    /// Largest marker count drawn for the Severe level.
    pub max_markers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            documents: 600,
            aspect: Aspect::Violence,
            min_utterances: 40,
            max_utterances: 80,
            min_tokens: 3,
            max_tokens: 7,
            vocabulary: 8,
            max_markers: 10,
            seed: 7,
        }
    }
}

/// Filler word `i`; never collides with [`MARKER`].
pub fn filler_word(i: usize) -> String {
    format!("w{i}")
}

/// One generated script with its planted count.
#[derive(Debug, Clone)]
pub struct SyntheticScript {
    pub document: ScriptDocument,
    pub markers: usize,
}

/// Generate a script with `markers` marker-bearing utterances.
pub fn script<R: Rng + ?Sized>(movie_id: &str, markers: usize, cfg: &SyntheticConfig, rng: &mut R) -> Result<SyntheticScript> {
    let n = rng.random_range(cfg.min_utterances..=cfg.max_utterances);
    if markers > n {
        return Err(Error::InvalidArgument(format!("{markers} markers do not fit in {n} utterances")));
    }
    let mut marked = vec![false; n];
    for i in sample(rng, n, markers) {
        marked[i] = true;
    }
    let lines: Vec<String> = marked
        .iter()
        .map(|&m| {
            if m {
                return MARKER.to_string();
            }
            let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let words: Vec<String> = (0..len).map(|_| filler_word(rng.random_range(0..cfg.vocabulary))).collect();
            words.join(" ")
        })
        .collect();
    Ok(SyntheticScript {
        document: ScriptDocument::from_lines(movie_id, format!("Synthetic {movie_id}"), lines)?,
        markers,
    })
}

/// Marker count for a level, uniform within the level's range.
fn markers_for<R: Rng + ?Sized>(level: SeverityLevel, max_markers: usize, rng: &mut R) -> usize {
    match level {
        SeverityLevel::None => 0,
        SeverityLevel::Mild => rng.random_range(1..=2),
        SeverityLevel::Moderate => rng.random_range(3..=5),
        SeverityLevel::Severe => rng.random_range(6..=max_markers.max(6)),
    }
}

/// A class-balanced planted corpus. Votes are uniform in 5..=500.
pub fn generate(cfg: &SyntheticConfig) -> Result<AspectDataset> {
    if cfg.documents == 0
        || cfg.min_utterances == 0
        || cfg.min_utterances > cfg.max_utterances
        || cfg.min_tokens == 0
        || cfg.min_tokens > cfg.max_tokens
        || cfg.vocabulary == 0
        || cfg.max_markers.max(6) > cfg.min_utterances
    {
        return Err(Error::InvalidArgument(format!("invalid synthetic config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let instances = (0..cfg.documents)
        .map(|i| {
            let level = SeverityLevel::ALL[i % SeverityLevel::COUNT];
            let markers = markers_for(level, cfg.max_markers, &mut rng);
            let s = script(&format!("syn{i:05}"), markers, cfg, &mut rng)?;
            debug_assert_eq!(staircase(s.markers), level);
            Ok(LabeledInstance {
                document: Arc::new(s.document),
                aspect: cfg.aspect,
                label: level,
                votes: rng.random_range(5..=500),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AspectDataset::new(cfg.aspect, instances))
}

/// Count marker-bearing utterances in a document.
pub fn count_markers(doc: &ScriptDocument) -> usize {
    doc.utterances
        .iter()
        .filter(|u| u.text.split_whitespace().any(|w| w == MARKER))
        .count()
}

/// Rating counts for a corpus: every movie above `threshold`, ordered by id.
pub fn popularity(dataset: &AspectDataset, threshold: u64) -> BTreeMap<String, u64> {
    dataset
        .instances
        .iter()
        .map(|i| (i.movie_id().to_string(), threshold + i.votes as u64))
        .collect()
}

/// Minimal one-line documents with the given label values.
pub fn tiny_dataset(labels: &[usize]) -> AspectDataset {
    let instances = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| LabeledInstance {
            document: Arc::new(ScriptDocument::from_lines(format!("t{i:04}"), format!("Tiny {i}"), [format!("w{i} w{l}")]).unwrap()),
            aspect: Aspect::Sex,
            label: SeverityLevel::from_value(l).expect("label in 0..4"),
            votes: 5 + i as u32,
        })
        .collect();
    AspectDataset::new(Aspect::Sex, instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_boundaries() {
        let got: Vec<usize> = (0..9).map(|c| staircase(c).value()).collect();
        assert_eq!(got, [0, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn labels_match_planted_counts() {
        let cfg = SyntheticConfig {
            documents: 40,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.class_counts(), [10; 4]);
        for inst in &ds.instances {
            let n = inst.document.utterances.len();
            assert!((40..=80).contains(&n));
            assert_eq!(staircase(count_markers(&inst.document)), inst.label);
            for u in &inst.document.utterances {
                let words = u.text.split_whitespace().count();
                assert!(u.text == MARKER || (3..=7).contains(&words));
            }
        }
        let again = generate(&cfg).unwrap();
        assert_eq!(ds, again);
    }
}
