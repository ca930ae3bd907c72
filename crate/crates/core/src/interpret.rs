//! Comparator selection and pairwise comparison reports.
//!
//! A report places one movie against up to five well-known comparators per
//! severity level and records, for each, whether the model ranks the movie
//! LOWER, EQUAL or HIGHER. Rendered as text, each level is a row of `<`, `=`
//! and `>` characters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::backbones::{featurize, Embedder, FeatureStore};
use crate::corpus::{Aspect, AspectDataset, LabeledInstance, Part, ScriptDocument, SeverityLevel};
use crate::parallel::*;
use crate::siamese::{RankLabel, SiameseModel};
use crate::{Error, Result};

pub const COMPARATORS_PER_LEVEL: usize = 5;
pub const DEFAULT_MIN_POPULARITY: u64 = 200_000;

/// Which split parts comparators may come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pool {
    Train,
    Dev,
    Test,
    #[default]
    TrainDev,
    All,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Dev => "dev",
            Pool::Test => "test",
            Pool::TrainDev => "train+dev",
            Pool::All => "all",
        }
    }

    fn admits(self, part: Option<Part>) -> bool {
        match (self, part) {
            (Pool::All, _) => true,
            (Pool::Train, Some(Part::Train)) | (Pool::Dev, Some(Part::Dev)) | (Pool::Test, Some(Part::Test)) => true,
            (Pool::TrainDev, Some(p)) => p != Part::Test,
            _ => false,
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Pool::Train),
            "dev" => Ok(Pool::Dev),
            "test" => Ok(Pool::Test),
            "train+dev" | "traindev" | "train_dev" => Ok(Pool::TrainDev),
            "all" => Ok(Pool::All),
            _ => Err(format!("unknown pool `{s}` (train, dev, test, train+dev, all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorSet {
    pub aspect: Aspect,
    /// Indexed by severity level, most-voted first.
    pub levels: [Vec<LabeledInstance>; SeverityLevel::COUNT],
    /// One message per level that came up short.
    pub warnings: Vec<String>,
}

impl ComparatorSet {
    pub fn level(&self, level: SeverityLevel) -> &[LabeledInstance] {
        &self.levels[level.value()]
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledInstance> {
        self.levels.iter().flatten()
    }
}

/// Read `movie_id<TAB>rating_count` lines. A first line whose count field is
/// not a number is taken as a header.
pub fn load_popularity(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |row: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(i + 1, format!("expected 2 tab-separated fields, got {}", fields.len())));
        }
        match fields[1].trim().parse::<u64>() {
            Ok(n) => {
                out.insert(fields[0].trim().to_string(), n);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(parse_err(i + 1, format!("bad rating count `{}`: {e}", fields[1]))),
        }
    }
    Ok(out)
}

/// Up to five comparators per level: pool members with at least
/// `min_popularity` ratings (missing counts as 0), ordered by descending
/// severity-vote count and then by movie id.
pub fn select_comparators(
    dataset: &AspectDataset,
    popularity: &BTreeMap<String, u64>,
    min_popularity: u64,
    pool: Pool,
) -> Result<ComparatorSet> {
    let split = dataset.split.as_ref();
    if split.is_none() && pool != Pool::All {
        return Err(Error::InvalidArgument(format!(
            "comparator pool `{pool}` needs a split; use `all` for unsplit data"
        )));
    }
    let mut levels: [Vec<LabeledInstance>; SeverityLevel::COUNT] = Default::default();
    for inst in &dataset.instances {
        let part = split.and_then(|s| s.get(inst.movie_id()).copied());
        let pop = popularity.get(inst.movie_id()).copied().unwrap_or(0);
        if pool.admits(part) && pop >= min_popularity {
            levels[inst.label.value()].push(inst.clone());
        }
    }
    let mut warnings = Vec::new();
    for (level, list) in SeverityLevel::ALL.into_iter().zip(levels.iter_mut()) {
        list.sort_by(|a, b| b.votes.cmp(&a.votes).then_with(|| a.movie_id().cmp(b.movie_id())));
        list.truncate(COMPARATORS_PER_LEVEL);
        if list.len() < COMPARATORS_PER_LEVEL {
            let msg = format!(
                "{}: level {} has {} eligible comparator(s) in pool {pool} (wanted {COMPARATORS_PER_LEVEL})",
                dataset.aspect,
                level.name(),
                list.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(ComparatorSet {
        aspect: dataset.aspect,
        levels,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorOutcome {
    pub movie_id: String,
    pub title: String,
    /// The report movie's severity relative to this comparator.
    pub outcome: RankLabel,
    pub probabilities: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorReport {
    pub movie_id: String,
    pub title: String,
    pub aspect: Aspect,
    pub gold: Option<SeverityLevel>,
    pub predicted: SeverityLevel,
    pub levels: [Vec<ComparatorOutcome>; SeverityLevel::COUNT],
}

impl ComparatorReport {
    /// Mean outcome against one level's comparators, scoring LOWER 0, EQUAL 1
    /// and HIGHER 2. `None` for an empty level.
    pub fn mean_outcome(&self, level: SeverityLevel) -> Option<f64> {
        let row = &self.levels[level.value()];
        (!row.is_empty()).then(|| row.iter().map(|o| o.outcome.index() as f64).sum::<f64>() / row.len() as f64)
    }

    pub fn symbols(&self, level: SeverityLevel) -> String {
        self.levels[level.value()].iter().map(|o| o.outcome.symbol()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for ComparatorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let gold = self.gold.map_or("-", SeverityLevel::name);
        let mark = match self.gold {
            Some(g) if g == self.predicted => " (correct)",
            Some(_) => " (wrong)",
            None => "",
        };
        writeln!(f, "{} [{}]  aspect {}", self.title, self.movie_id, self.aspect)?;
        writeln!(f, "gold {gold}  predicted {}{mark}", self.predicted.name())?;
        for level in SeverityLevel::ALL {
            let row = &self.levels[level.value()];
            let ids: Vec<&str> = row.iter().map(|o| o.movie_id.as_str()).collect();
            writeln!(f, "  vs {:<9} {:<6} {}", level.name(), self.symbols(level), ids.join(" "))?;
        }
        Ok(())
    }
}

/// Report from precomputed features: `x` for the movie, `features` for the
/// comparators.
pub fn comparator_report_features(
    model: &SiameseModel,
    movie: &ScriptDocument,
    gold: Option<SeverityLevel>,
    x: ArrayView2<f64>,
    comparators: &ComparatorSet,
    features: &FeatureStore,
) -> Result<ComparatorReport> {
    if !model.is_multitask() {
        return Err(Error::Unsupported(
            "comparator reports need a multitask model; this model was trained for classification only".into(),
        ));
    }
    if comparators.aspect != model.aspect() {
        return Err(Error::InvalidArgument(format!(
            "model is for {} but comparators are for {}",
            model.aspect(),
            comparators.aspect
        )));
    }
    let predicted = model.predict_features(x)?.level;
    let rep = model.encode(x)?;
    let mut levels: [Vec<ComparatorOutcome>; SeverityLevel::COUNT] = Default::default();
    for (row, list) in levels.iter_mut().zip(&comparators.levels) {
        let outcomes: Vec<Result<ComparatorOutcome>> = list
            .par_iter()
            .map(|c| {
                let cx = features.get(c.movie_id()).ok_or_else(|| {
                    Error::InvalidArgument(format!("no features for comparator `{}`", c.movie_id()))
                })?;
                let cmp = model.compare_representations(&rep, &model.encode(cx.view())?)?;
                Ok(ComparatorOutcome {
                    movie_id: c.movie_id().to_string(),
                    title: c.document.title.clone(),
                    outcome: cmp.label,
                    probabilities: cmp.probabilities,
                })
            })
            .collect();
        *row = outcomes.into_iter().collect::<Result<_>>()?;
    }
    Ok(ComparatorReport {
        movie_id: movie.movie_id.clone(),
        title: movie.title.clone(),
        aspect: model.aspect(),
        gold,
        predicted,
        levels,
    })
}

/// Compare `movie` with every comparator and predict its level.
pub fn comparator_report(
    model: &SiameseModel,
    movie: &ScriptDocument,
    gold: Option<SeverityLevel>,
    comparators: &ComparatorSet,
    embedder: Embedder<'_>,
) -> Result<ComparatorReport> {
    if !model.is_multitask() {
        return comparator_report_features(model, movie, gold, ArrayView2::from_shape((0, 0), &[]).unwrap(), comparators, &FeatureStore::default());
    }
    let arch = model.meta().backbone.architecture;
    let x = featurize(movie, arch, embedder)?;
    let store = FeatureStore::build(comparators.iter().map(|c| c.document.as_ref()), arch, embedder)?;
    comparator_report_features(model, movie, gold, x.view(), comparators, &store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn inst(id: &str, label: usize, votes: u32) -> LabeledInstance {
        LabeledInstance {
            document: Arc::new(ScriptDocument::from_lines(id, id, ["line"]).unwrap()),
            aspect: Aspect::Profanity,
            label: SeverityLevel::from_value(label).unwrap(),
            votes,
        }
    }

    fn dataset() -> AspectDataset {
        let mut v = Vec::new();
        for l in 0..4 {
            for k in 0..7 {
                v.push(inst(&format!("m{l}{k}"), l, 10 + k as u32));
            }
        }
        v.push(inst("a00", 0, 16));
        AspectDataset::new(Aspect::Profanity, v)
    }

    fn popular(ds: &AspectDataset) -> BTreeMap<String, u64> {
        ds.instances.iter().map(|i| (i.movie_id().to_string(), 300_000)).collect()
    }

    #[test]
    fn top_five_by_votes_then_id() {
        let ds = dataset();
        let set = select_comparators(&ds, &popular(&ds), DEFAULT_MIN_POPULARITY, Pool::All).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.warnings.is_empty());
        let none: Vec<&str> = set.level(SeverityLevel::None).iter().map(|i| i.movie_id()).collect();
        assert_eq!(none, ["a00", "m06", "m05", "m04", "m03"]);
    }

    #[test]
    fn stable_under_reordering() {
        let ds = dataset();
        let mut rev = ds.clone();
        rev.instances.reverse();
        let pop = popular(&ds);
        let a = select_comparators(&ds, &pop, 1, Pool::All).unwrap();
        let b = select_comparators(&rev, &pop, 1, Pool::All).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_threshold_empties_every_level() {
        let ds = dataset();
        let set = select_comparators(&ds, &popular(&ds), 1_000_000, Pool::All).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.warnings.len(), 4);
    }

    #[test]
    fn pools_respect_split() {
        let ds = dataset();
        assert!(select_comparators(&ds, &popular(&ds), 1, Pool::TrainDev).is_err());
        let split = ds
            .instances
            .iter()
            .map(|i| (i.movie_id().to_string(), if i.movie_id() == "a00" { Part::Test } else { Part::Train }))
            .collect();
        let ds = ds.with_split(&split).unwrap();
        let set = select_comparators(&ds, &popular(&ds), 1, Pool::TrainDev).unwrap();
        assert!(set.iter().all(|i| i.movie_id() != "a00"));
        let test = select_comparators(&ds, &popular(&ds), 1, Pool::Test).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!("train+dev".parse::<Pool>().unwrap(), Pool::TrainDev);
    }

    #[test]
    fn popularity_file_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pop.tsv");
        std::fs::write(&p, "movie_id\trating_count\nm1\t250000\n\nm2\t10\n").unwrap();
        let pop = load_popularity(&p).unwrap();
        assert_eq!(pop["m1"], 250_000);
        assert_eq!(pop.len(), 2);
        std::fs::write(&p, "m1\t250000\nm2\tlots\n").unwrap();
        assert!(matches!(load_popularity(&p), Err(Error::Parse { row: 2, .. })));
    }
}
