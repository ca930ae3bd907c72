//! Script and label ingestion, vote filtering, stratified splits and corpus
//! statistics.
//!
//! The manifest is a tab-separated table with a header row:
//!
//! ```text
//! movie_id  title  sex_label  sex_votes  violence_label  violence_votes  ...
//! ```
//!
//! Labels are severity names (`None`, `Mild`, `Moderate`, `Severe`,
//! case-insensitive) or their ordinal digits. An empty label field means the
//! movie is not rated for that aspect. Scripts live at
//! `<scripts_dir>/<movie_id>.txt`, one utterance per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ordinal severity rating of one aspect of a movie.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum SeverityLevel {
    None = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 4] = [
        SeverityLevel::None,
        SeverityLevel::Mild,
        SeverityLevel::Moderate,
        SeverityLevel::Severe,
    ];
    pub const COUNT: usize = 4;

    pub fn value(self) -> usize {
        self as usize
    }

    pub fn from_value(value: usize) -> Option<Self> {
        Self::ALL.get(value).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLevel::None => "None",
            SeverityLevel::Mild => "Mild",
            SeverityLevel::Moderate => "Moderate",
            SeverityLevel::Severe => "Severe",
        }
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Ok(v) = t.parse::<usize>() {
            return Self::from_value(v).ok_or_else(|| format!("severity value {v} out of range"));
        }
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| format!("unknown severity label `{t}`"))
    }
}

/// Age-restricted content aspect.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Sex,
    Violence,
    Profanity,
    Substance,
    Frightening,
}

impl Aspect {
    pub const ALL: [Aspect; 5] = [
        Aspect::Sex,
        Aspect::Violence,
        Aspect::Profanity,
        Aspect::Substance,
        Aspect::Frightening,
    ];

    /// Stable serialization name, also the manifest column prefix.
    pub fn name(self) -> &'static str {
        match self {
            Aspect::Sex => "sex",
            Aspect::Violence => "violence",
            Aspect::Profanity => "profanity",
            Aspect::Substance => "substance",
            Aspect::Frightening => "frightening",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown aspect `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub index: usize,
}

/// A movie's dialogue as an ordered, non-empty list of utterances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptDocument {
    pub movie_id: String,
    pub title: String,
    pub utterances: Vec<Utterance>,
}

impl ScriptDocument {
    /// Build a document from raw lines. Lines are trimmed; blank lines are
    /// dropped and the survivors indexed contiguously from 0.
    pub fn from_lines<I, S>(movie_id: impl Into<String>, title: impl Into<String>, lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let movie_id = movie_id.into();
        let utterances: Vec<Utterance> = lines
            .into_iter()
            .filter_map(|l| {
                let t = l.as_ref().trim();
                (!t.is_empty()).then(|| t.to_string())
            })
            .enumerate()
            .map(|(index, text)| Utterance { text, index })
            .collect();
        if utterances.is_empty() {
            return Err(Error::Ingestion {
                movie_id,
                reason: "script contains no non-blank utterances".into(),
            });
        }
        Ok(Self {
            movie_id,
            title: title.into(),
            utterances,
        })
    }

    /// Whitespace-token count summed over utterances.
    pub fn word_count(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.text.split_whitespace().count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub document: Arc<ScriptDocument>,
    pub aspect: Aspect,
    pub label: SeverityLevel,
    pub votes: u32,
}

impl LabeledInstance {
    pub fn movie_id(&self) -> &str {
        &self.document.movie_id
    }
}

/// Which partition an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Dev,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Dev, Part::Test];

    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Dev => "dev",
            Part::Test => "test",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown split part `{s}`"))
    }
}

/// All labeled instances of one aspect, ordered by movie id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectDataset {
    pub aspect: Aspect,
    pub instances: Vec<LabeledInstance>,
    pub split: Option<BTreeMap<String, Part>>,
}

impl AspectDataset {
    pub fn new(aspect: Aspect, instances: Vec<LabeledInstance>) -> Self {
        Self {
            aspect,
            instances,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for inst in &self.instances {
            counts[inst.label.value()] += 1;
        }
        counts
    }

    /// Instances assigned to `part`. Empty when the dataset has no split.
    pub fn part(&self, part: Part) -> Vec<&LabeledInstance> {
        match &self.split {
            None => Vec::new(),
            Some(split) => self
                .instances
                .iter()
                .filter(|i| split.get(i.movie_id()) == Some(&part))
                .collect(),
        }
    }

    /// A new dataset holding clones of the instances at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> AspectDataset {
        let instances: Vec<_> = indices.iter().map(|&i| self.instances[i].clone()).collect();
        let split = self.split.as_ref().map(|s| {
            instances
                .iter()
                .filter_map(|i| s.get(i.movie_id()).map(|p| (i.movie_id().to_string(), *p)))
                .collect()
        });
        AspectDataset {
            aspect: self.aspect,
            instances,
            split,
        }
    }

    /// Attach a split read from disk. Ids in `split` that the dataset does not
    /// contain are ignored; every instance must be assigned.
    pub fn with_split(mut self, split: &BTreeMap<String, Part>) -> Result<Self> {
        let mut own = BTreeMap::new();
        for inst in &self.instances {
            let part = split.get(inst.movie_id()).ok_or_else(|| {
                Error::Stratification(format!(
                    "split does not assign movie `{}` ({} dataset)",
                    inst.movie_id(),
                    self.aspect
                ))
            })?;
            own.insert(inst.movie_id().to_string(), *part);
        }
        self.split = Some(own);
        Ok(self)
    }
}

fn aspect_columns(aspect: Aspect) -> (String, String) {
    (
        format!("{}_label", aspect.name()),
        format!("{}_votes", aspect.name()),
    )
}

/// Read the manifest and scripts into one dataset per aspect.
///
/// Rows whose script file does not exist are skipped. A script that exists
/// but cannot be read, or contains only blank lines, is an ingestion error.
pub fn load_corpus(manifest_path: &Path, scripts_dir: &Path) -> Result<BTreeMap<Aspect, AspectDataset>> {
    if !scripts_dir.is_dir() {
        return Err(Error::io(
            scripts_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "scripts directory not found"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_path(manifest_path)
        .map_err(|e| csv_error(manifest_path, 1, e))?;

    let headers = reader
        .headers()
        .map_err(|e| csv_error(manifest_path, 1, e))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                path: manifest_path.into(),
                row: 1,
                reason: format!("missing column `{name}`"),
            })
    };
    let id_col = column("movie_id")?;
    let title_col = column("title")?;
    let mut aspect_cols = Vec::new();
    for aspect in Aspect::ALL {
        let (label, votes) = aspect_columns(aspect);
        aspect_cols.push((aspect, column(&label)?, column(&votes)?));
    }

    let mut datasets: BTreeMap<Aspect, Vec<LabeledInstance>> =
        Aspect::ALL.iter().map(|a| (*a, Vec::new())).collect();
    let mut seen = HashSet::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(manifest_path, row, e))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let movie_id = field(id_col).to_string();
        if movie_id.is_empty() {
            return Err(parse_error(manifest_path, row, "empty movie_id"));
        }
        if !seen.insert(movie_id.clone()) {
            return Err(parse_error(
                manifest_path,
                row,
                &format!("duplicate movie_id `{movie_id}`"),
            ));
        }

        let mut labels = Vec::new();
        for &(aspect, lc, vc) in &aspect_cols {
            let token = field(lc);
            if token.is_empty() {
                continue;
            }
            let label: SeverityLevel = token
                .parse()
                .map_err(|e: String| parse_error(manifest_path, row, &format!("{}: {e}", aspect)))?;
            let votes_token = field(vc);
            let votes = if votes_token.is_empty() {
                0
            } else {
                votes_token.parse::<u32>().map_err(|_| {
                    parse_error(
                        manifest_path,
                        row,
                        &format!("{aspect}: malformed vote count `{votes_token}`"),
                    )
                })?
            };
            labels.push((aspect, label, votes));
        }

        let script_path = scripts_dir.join(format!("{movie_id}.txt"));
        if !script_path.exists() {
            log::debug!("no script for `{movie_id}`, skipping row {row}");
            continue;
        }
        let bytes = fs::read(&script_path).map_err(|e| Error::Ingestion {
            movie_id: movie_id.clone(),
            reason: format!("cannot read {}: {e}", script_path.display()),
        })?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Ingestion {
            movie_id: movie_id.clone(),
            reason: format!("{} is not valid UTF-8", script_path.display()),
        })?;
        let document = Arc::new(ScriptDocument::from_lines(
            movie_id,
            field(title_col),
            text.lines(),
        )?);

        for (aspect, label, votes) in labels {
            datasets.get_mut(&aspect).expect("all aspects present").push(LabeledInstance {
                document: Arc::clone(&document),
                aspect,
                label,
                votes,
            });
        }
    }

    Ok(datasets
        .into_iter()
        .map(|(aspect, mut instances)| {
            instances.sort_by(|a, b| a.movie_id().cmp(b.movie_id()));
            (aspect, AspectDataset::new(aspect, instances))
        })
        .collect())
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.into(),
            row,
            reason: format!("{other:?}"),
        },
    }
}

fn parse_error(path: &Path, row: usize, reason: &str) -> Error {
    Error::Parse {
        path: path.into(),
        row,
        reason: reason.to_string(),
    }
}

/// Write datasets back out as a manifest plus one script file per movie.
/// Reloading the result with [`load_corpus`] reproduces the datasets.
pub fn write_corpus<'a, I>(datasets: I, manifest_path: &Path, scripts_dir: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a AspectDataset>,
{
    let mut docs: BTreeMap<String, (Arc<ScriptDocument>, BTreeMap<Aspect, (SeverityLevel, u32)>)> =
        BTreeMap::new();
    for ds in datasets {
        for inst in &ds.instances {
            let entry = docs
                .entry(inst.movie_id().to_string())
                .or_insert_with(|| (Arc::clone(&inst.document), BTreeMap::new()));
            entry.1.insert(inst.aspect, (inst.label, inst.votes));
        }
    }

    fs::create_dir_all(scripts_dir).map_err(|e| Error::io(scripts_dir, e))?;
    let mut out = String::from("movie_id\ttitle");
    for aspect in Aspect::ALL {
        let (l, v) = aspect_columns(aspect);
        out.push_str(&format!("\t{l}\t{v}"));
    }
    out.push('\n');
    for (movie_id, (doc, labels)) in &docs {
        out.push_str(movie_id);
        out.push('\t');
        out.push_str(&doc.title.replace(['\t', '\n'], " "));
        for aspect in Aspect::ALL {
            match labels.get(&aspect) {
                Some((label, votes)) => out.push_str(&format!("\t{}\t{}", label.name(), votes)),
                None => out.push_str("\t\t"),
            }
        }
        out.push('\n');

        let mut script = String::new();
        for u in &doc.utterances {
            script.push_str(&u.text);
            script.push('\n');
        }
        write_atomic(&scripts_dir.join(format!("{movie_id}.txt")), script.as_bytes())?;
    }
    write_atomic(manifest_path, out.as_bytes())
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let unique = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{file_name}.{}.{unique}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Keep instances with at least `min_votes` votes, preserving order.
pub fn filter_by_votes(dataset: &AspectDataset, min_votes: u32) -> Result<AspectDataset> {
    if min_votes < 1 {
        return Err(Error::InvalidArgument("min_votes must be at least 1".into()));
    }
    let keep: Vec<usize> = dataset
        .instances
        .iter()
        .enumerate()
        .filter(|(_, i)| i.votes >= min_votes)
        .map(|(idx, _)| idx)
        .collect();
    Ok(dataset.subset(&keep))
}

/// Train/dev/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

const RATIO_EPS: f64 = 1e-9;

/// Grow `alloc` one unit at a time until it sums to `total`, each step
/// serving the entry furthest below its real-valued `target` that still has
/// room under `cap`. Ties go to the lower index.
fn fill_largest_remainder(alloc: &mut [usize], target: &[f64], cap: &[usize], total: usize) {
    let mut sum: usize = alloc.iter().sum();
    while sum < total {
        let pick = (0..alloc.len())
            .filter(|&c| alloc[c] < cap[c])
            .max_by(|&a, &b| {
                let da = target[a] - alloc[a] as f64;
                let db = target[b] - alloc[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            });
        match pick {
            Some(c) => {
                alloc[c] += 1;
                sum += 1;
            }
            None => break,
        }
    }
}

/// Instance indices grouped by class, each group sorted by movie id and then
/// shuffled with one seeded generator walked in class order.
fn shuffled_class_groups(dataset: &AspectDataset, seed: u64) -> [Vec<usize>; 4] {
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (idx, inst) in dataset.instances.iter().enumerate() {
        groups[inst.label.value()].push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in groups.iter_mut() {
        g.sort_by(|&a, &b| dataset.instances[a].movie_id().cmp(dataset.instances[b].movie_id()));
        g.shuffle(&mut rng);
    }
    groups
}

/// Stratified train/dev/test assignment.
///
/// The dev and test parts each receive `ceil(ratio * N)` instances overall
/// and train takes the rest. Within the held-out budget every class gets a
/// share as close as possible to its proportional count.
pub fn stratified_split(dataset: &AspectDataset, ratios: SplitRatios, seed: u64) -> Result<AspectDataset> {
    let SplitRatios { train, dev, test } = ratios;
    if [train, dev, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + dev + test - 1.0).abs() > 1e-6
    {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be in [0,1] and sum to 1, got {train}/{dev}/{test}"
        )));
    }
    let counts = dataset.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && n < 3 {
            return Err(Error::Stratification(format!(
                "class {} has {n} instance(s), need at least 3",
                SeverityLevel::ALL[c]
            )));
        }
    }
    let n = dataset.len();
    let dev_total = ((dev * n as f64) - RATIO_EPS).ceil().max(0.0) as usize;
    let test_total = ((test * n as f64) - RATIO_EPS).ceil().max(0.0) as usize;
    if dev_total + test_total > n {
        return Err(Error::Stratification(format!(
            "{n} instances cannot hold {dev_total} dev + {test_total} test"
        )));
    }

    let held_ratio = dev + test;
    let held_target: Vec<f64> = counts.iter().map(|&c| c as f64 * held_ratio).collect();
    let mut held: Vec<usize> = held_target.iter().map(|t| (t + RATIO_EPS).floor() as usize).collect();
    fill_largest_remainder(&mut held, &held_target, &counts, dev_total + test_total);

    let dev_share = if held_ratio > 0.0 { dev / held_ratio } else { 0.0 };
    let dev_target: Vec<f64> = held.iter().map(|&h| h as f64 * dev_share).collect();
    let mut dev_alloc: Vec<usize> = dev_target.iter().map(|t| (t + RATIO_EPS).floor() as usize).collect();
    fill_largest_remainder(&mut dev_alloc, &dev_target, &held, dev_total);

    let groups = shuffled_class_groups(dataset, seed);
    let mut split = BTreeMap::new();
    for (c, group) in groups.iter().enumerate() {
        let n_train = counts[c] - held[c];
        for (pos, &idx) in group.iter().enumerate() {
            let part = if pos < n_train {
                Part::Train
            } else if pos < n_train + dev_alloc[c] {
                Part::Dev
            } else {
                Part::Test
            };
            split.insert(dataset.instances[idx].movie_id().to_string(), part);
        }
    }
    let mut out = dataset.clone();
    out.split = Some(split);
    Ok(out)
}

/// Indices (into `AspectDataset::instances`) of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold assignment. Instances are dealt round-robin class by
/// class, so per-class fold counts and total fold sizes each differ by at
/// most one.
pub fn kfold_split(dataset: &AspectDataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let groups = shuffled_class_groups(dataset, seed);
    let mut fold_of = vec![0usize; dataset.len()];
    let mut cursor = 0;
    for group in &groups {
        for &idx in group {
            fold_of[idx] = cursor % k;
            cursor += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| fold_of[i] == f);
            FoldSplit { train, test }
        })
        .collect())
}

/// Five-number summary plus mean of document lengths in words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthQuantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub aspect: Aspect,
    pub instances: usize,
    pub class_counts: [usize; 4],
    pub length: LengthQuantiles,
    pub vocabulary_size: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn corpus_stats(dataset: &AspectDataset) -> Result<CorpusStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot compute statistics of an empty {} dataset",
            dataset.aspect
        )));
    }
    let mut lengths: Vec<f64> = dataset
        .instances
        .iter()
        .map(|i| i.document.word_count() as f64)
        .collect();
    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut vocab = BTreeSet::new();
    for inst in &dataset.instances {
        for u in &inst.document.utterances {
            for tok in u.text.split_whitespace() {
                vocab.insert(tok.to_lowercase());
            }
        }
    }
    Ok(CorpusStats {
        aspect: dataset.aspect,
        instances: dataset.len(),
        class_counts: dataset.class_counts(),
        length: LengthQuantiles {
            min: lengths[0],
            q25: quantile(&lengths, 0.25),
            median: quantile(&lengths, 0.5),
            q75: quantile(&lengths, 0.75),
            max: lengths[lengths.len() - 1],
            mean: lengths.iter().sum::<f64>() / lengths.len() as f64,
        },
        vocabulary_size: vocab.len(),
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "aspect\t{}", self.aspect)?;
        writeln!(f, "instances\t{}", self.instances)?;
        for (level, count) in SeverityLevel::ALL.iter().zip(self.class_counts) {
            writeln!(f, "class_{}\t{}", level.name(), count)?;
        }
        let l = &self.length;
        writeln!(
            f,
            "length_words\tmin={:.0} q25={:.1} median={:.1} q75={:.1} max={:.0} mean={:.1}",
            l.min, l.q25, l.median, l.q75, l.max, l.mean
        )?;
        writeln!(f, "vocabulary\t{}", self.vocabulary_size)
    }
}

/// Serialize a split as `movie_id<TAB>part` lines, sorted by movie id.
pub fn format_split(split: &BTreeMap<String, Part>) -> String {
    split
        .iter()
        .map(|(id, part)| format!("{id}\t{part}\n"))
        .collect()
}

pub fn read_split(path: &Path) -> Result<BTreeMap<String, Part>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, part) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, i + 1, "expected `movie_id<TAB>part`"))?;
        let part: Part = part.parse().map_err(|e: String| parse_error(path, i + 1, &e))?;
        if split.insert(id.trim().to_string(), part).is_some() {
            return Err(parse_error(path, i + 1, &format!("duplicate movie_id `{id}`")));
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    pub(crate) fn toy_dataset(aspect: Aspect, labels: &[(usize, u32)]) -> AspectDataset {
        let instances = labels
            .iter()
            .enumerate()
            .map(|(i, &(label, votes))| LabeledInstance {
                document: Arc::new(
                    ScriptDocument::from_lines(format!("m{i:05}"), format!("Movie {i}"), ["hello there"])
                        .unwrap(),
                ),
                aspect,
                label: SeverityLevel::from_value(label).unwrap(),
                votes,
            })
            .collect();
        AspectDataset::new(aspect, instances)
    }

    fn manifest_header() -> String {
        let mut h = String::from("movie_id\ttitle");
        for a in Aspect::ALL {
            h.push_str(&format!("\t{a}_label\t{a}_votes"));
        }
        h
    }

    #[test]
    fn severity_names_round_trip() {
        for level in SeverityLevel::ALL {
            assert_eq!(level.name().parse::<SeverityLevel>().unwrap(), level);
            assert_eq!(SeverityLevel::from_value(level.value()), Some(level));
        }
        assert!(SeverityLevel::None < SeverityLevel::Mild);
        assert!(SeverityLevel::Moderate < SeverityLevel::Severe);
        assert!("extreme".parse::<SeverityLevel>().is_err());
        assert_eq!(Aspect::ALL.len(), 5);
    }

    #[test]
    fn loads_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let scripts = dir.path().join("scripts");
        fs::create_dir(&scripts).unwrap();
        fs::write(scripts.join("m1.txt"), "one\n\ntwo\nthree\n").unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(
            &manifest,
            format!("{}\nm1\tA\t\t\t\t\tSevere\t12\t\t\t\t\n", manifest_header()),
        )
        .unwrap();
        let corpus = load_corpus(&manifest, &scripts).unwrap();
        let prof = &corpus[&Aspect::Profanity];
        assert_eq!(prof.len(), 1);
        assert_eq!(prof.instances[0].label, SeverityLevel::Severe);
        assert_eq!(prof.instances[0].votes, 12);
        let doc = &prof.instances[0].document;
        assert_eq!(doc.utterances.len(), 3);
        assert_eq!(doc.utterances[2].index, 2);
        assert!(corpus[&Aspect::Sex].is_empty());
    }

    #[test]
    fn blank_script_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m1.txt"), "\n  \n\n").unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(
            &manifest,
            format!("{}\nm1\tA\tMild\t6\t\t\t\t\t\t\t\t\n", manifest_header()),
        )
        .unwrap();
        match load_corpus(&manifest, dir.path()) {
            Err(Error::Ingestion { movie_id, .. }) => assert_eq!(movie_id, "m1"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_label_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m1.txt"), "hi\n").unwrap();
        fs::write(dir.path().join("m2.txt"), "hi\n").unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(
            &manifest,
            format!(
                "{}\nm1\tA\tMild\t6\t\t\t\t\t\t\t\t\nm2\tB\tHorrible\t6\t\t\t\t\t\t\t\t\n",
                manifest_header()
            ),
        )
        .unwrap();
        match load_corpus(&manifest, dir.path()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_and_missing_script() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(&dir.path().join("nope.tsv"), dir.path()).is_err());

        let manifest = dir.path().join("manifest.tsv");
        fs::write(
            &manifest,
            format!("{}\nghost\tG\tMild\t6\t\t\t\t\t\t\t\t\n", manifest_header()),
        )
        .unwrap();
        let corpus = load_corpus(&manifest, dir.path()).unwrap();
        assert!(corpus.values().all(|d| d.is_empty()));
    }

    #[test]
    fn vote_filter_boundary() {
        let ds = toy_dataset(Aspect::Sex, &[(0, 5), (1, 4), (2, 0), (3, 9)]);
        let kept = filter_by_votes(&ds, 5).unwrap();
        let votes: Vec<u32> = kept.instances.iter().map(|i| i.votes).collect();
        assert_eq!(votes, vec![5, 9]);
        assert!(filter_by_votes(&ds, 0).is_err());
    }

    #[test]
    fn stratified_exact_proportions() {
        let mut labels = Vec::new();
        for (class, n) in [(0, 60), (1, 20), (2, 10), (3, 10)] {
            labels.extend(std::iter::repeat_n((class, 10), n));
        }
        let ds = stratified_split(&toy_dataset(Aspect::Sex, &labels), SplitRatios::default(), 3).unwrap();
        let train_counts = AspectDataset::new(
            Aspect::Sex,
            ds.part(Part::Train).into_iter().cloned().collect(),
        )
        .class_counts();
        assert_eq!(train_counts, [48, 16, 8, 8]);
        assert_eq!(ds.part(Part::Dev).len(), 10);
        assert_eq!(ds.part(Part::Test).len(), 10);
    }

    #[test]
    fn stratified_rejects_tiny_class() {
        let ds = toy_dataset(Aspect::Sex, &[(0, 5), (0, 5), (0, 5), (1, 5), (1, 5)]);
        assert!(matches!(
            stratified_split(&ds, SplitRatios::default(), 1),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn kfold_two_of_four() {
        let ds = toy_dataset(Aspect::Sex, &[(2, 5); 4]);
        let folds = kfold_split(&ds, 2, 11).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 2));
        assert!(kfold_split(&ds, 5, 11).is_err());
        assert!(kfold_split(&ds, 1, 11).is_err());
    }

    #[test]
    fn stats_median_and_vocab() {
        let mk = |id: &str, text: &str| LabeledInstance {
            document: Arc::new(ScriptDocument::from_lines(id, id, [text]).unwrap()),
            aspect: Aspect::Violence,
            label: SeverityLevel::Mild,
            votes: 5,
        };
        let words = |n: usize| vec!["w"; n].join(" ");
        let ds = AspectDataset::new(Aspect::Violence, vec![mk("a", &words(10)), mk("b", &words(30))]);
        assert_eq!(corpus_stats(&ds).unwrap().length.median, 20.0);

        let ds = AspectDataset::new(Aspect::Violence, vec![mk("a", "a b"), mk("b", "B c")]);
        assert_eq!(corpus_stats(&ds).unwrap().vocabulary_size, 3);
        assert!(corpus_stats(&AspectDataset::new(Aspect::Sex, vec![])).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let ds = toy_dataset(Aspect::Sex, &[(0, 5); 10]);
        let ds = stratified_split(&ds, SplitRatios::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.tsv");
        fs::write(&path, format_split(ds.split.as_ref().unwrap())).unwrap();
        let back = read_split(&path).unwrap();
        assert_eq!(Some(&back), ds.split.as_ref());
        let reattached = ds.clone().with_split(&back).unwrap();
        assert_eq!(reattached, ds);
    }
}
