//! Metrics, cross-validation and paired significance testing.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, FeatureStore};
use crate::corpus::{kfold_split, stratified_split, AspectDataset, LabeledInstance, SeverityLevel, SplitRatios};
use crate::parallel::*;
use crate::siamese::{predict_all, train, SiameseModel, TrainConfig};
use crate::{Error, Result};

const K: usize = SeverityLevel::COUNT;

pub type Confusion = [[u64; K]; K];

fn check_lengths(gold: usize, pred: usize) -> Result<()> {
    if gold != pred {
        return Err(Error::InvalidArgument(format!(
            "gold has {gold} labels but predictions have {pred}"
        )));
    }
    if gold == 0 {
        return Err(Error::InvalidArgument("no labels to score".into()));
    }
    Ok(())
}

/// Entry `[g][p]` counts instances with gold `g` predicted as `p`.
pub fn confusion(gold: &[SeverityLevel], pred: &[SeverityLevel]) -> Result<Confusion> {
    check_lengths(gold.len(), pred.len())?;
    let mut m = [[0u64; K]; K];
    for (g, p) in gold.iter().zip(pred) {
        m[g.value()][p.value()] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix; a class whose precision and recall
/// denominators are both empty scores 0.
pub fn per_class_f1(m: &Confusion) -> [f64; K] {
    let mut out = [0.0; K];
    for (c, f1) in out.iter_mut().enumerate() {
        let tp = m[c][c] as f64;
        let gold_c: u64 = m[c].iter().sum();
        let pred_c: u64 = (0..K).map(|g| m[g][c]).sum();
        let denom = (gold_c + pred_c) as f64;
        *f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    out
}

/// Unweighted mean of the four per-class F1 scores.
pub fn macro_f1(gold: &[SeverityLevel], pred: &[SeverityLevel]) -> Result<f64> {
    Ok(mean_f1(&per_class_f1(&confusion(gold, pred)?)))
}

fn mean_f1(f: &[f64; K]) -> f64 {
    f.iter().sum::<f64>() / K as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub per_class_f1: [f64; K],
    pub confusion: Confusion,
    pub n: usize,
}

impl EvalReport {
    pub fn new(gold: &[SeverityLevel], pred: &[SeverityLevel]) -> Result<Self> {
        let confusion = confusion(gold, pred)?;
        let per_class_f1 = per_class_f1(&confusion);
        Ok(Self {
            macro_f1: mean_f1(&per_class_f1),
            per_class_f1,
            confusion,
            n: gold.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instances: {}", self.n)?;
        writeln!(f, "macro F1:  {:.4}", self.macro_f1)?;
        for level in SeverityLevel::ALL {
            writeln!(f, "  F1 {:<9} {:.4}", level.name(), self.per_class_f1[level.value()])?;
        }
        writeln!(f, "confusion (rows gold, columns predicted):")?;
        write!(f, "{:>10}", "")?;
        for level in SeverityLevel::ALL {
            write!(f, "{:>10}", level.name())?;
        }
        writeln!(f)?;
        for g in SeverityLevel::ALL {
            write!(f, "{:>10}", g.name())?;
            for p in SeverityLevel::ALL {
                write!(f, "{:>10}", self.confusion[g.value()][p.value()])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Predict `instances` with `model` and score them.
pub fn evaluate(model: &SiameseModel, instances: &[&LabeledInstance], features: &FeatureStore) -> Result<EvalReport> {
    let pred: Vec<SeverityLevel> = predict_all(model, instances, features)?.iter().map(|p| p.level).collect();
    let gold: Vec<SeverityLevel> = instances.iter().map(|i| i.label).collect();
    EvalReport::new(&gold, &pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub fold_macro_f1: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single fold).
    pub std: f64,
}

impl CVReport {
    pub fn from_folds(fold_macro_f1: Vec<f64>) -> Self {
        let k = fold_macro_f1.len() as f64;
        let mean = fold_macro_f1.iter().sum::<f64>() / k;
        let std = if fold_macro_f1.len() < 2 {
            0.0
        } else {
            (fold_macro_f1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        };
        Self {
            fold_macro_f1,
            mean,
            std,
        }
    }

    /// `fold<TAB>macro_f1` rows, folds numbered from 0.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fold\tmacro_f1\n");
        for (i, f) in self.fold_macro_f1.iter().enumerate() {
            out.push_str(&format!("{i}\t{f:.6}\n"));
        }
        out
    }
}

impl fmt::Display for CVReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-fold macro F1: mean {:.4}, std {:.4}",
            self.fold_macro_f1.len(),
            self.mean,
            self.std
        )
    }
}

/// Stratified k-fold cross-validation. Each fold trains a fresh model with
/// seed `seed + fold`, holding out a stratified ninth of the fold's training
/// part for early stopping. Folds train concurrently.
pub fn cross_validate(
    config: &TrainConfig,
    dataset: &AspectDataset,
    backbone: &BackboneConfig,
    multitask: bool,
    features: &FeatureStore,
    embedder_id: &str,
    k: usize,
    seed: u64,
) -> Result<CVReport> {
    let folds = kfold_split(dataset, k, seed)?;
    let inner = SplitRatios {
        train: 8.0 / 9.0,
        dev: 1.0 / 9.0,
        test: 0.0,
    };
    let results: Vec<Result<f64>> = folds
        .par_iter()
        .enumerate()
        .map(|(fold, split)| {
            let fold_seed = seed.wrapping_add(fold as u64);
            let wrap = |e: Error| match e {
                Error::Training(m) => Error::Training(format!("fold {fold}: {m}")),
                Error::Stratification(m) => Error::Stratification(format!("fold {fold}: {m}")),
                other => other,
            };
            let fold_train = stratified_split(&dataset.subset(&split.train), inner, fold_seed).map_err(wrap)?;
            let cfg = TrainConfig {
                seed: fold_seed,
                ..config.clone()
            };
            let outcome = train(&cfg, &fold_train, backbone, multitask, features, embedder_id).map_err(wrap)?;
            let test: Vec<&LabeledInstance> = split.test.iter().map(|&i| &dataset.instances[i]).collect();
            Ok(evaluate(&outcome.model, &test, features)?.macro_f1)
        })
        .collect();
    Ok(CVReport::from_folds(results.into_iter().collect::<Result<_>>()?))
}

/// Which macro-F1 differences count as at least as extreme as the observed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    /// `|F1(a) - F1(b)|` at least the observed magnitude.
    TwoSided,
    /// `F1(a) - F1(b)` at most the observed value: evidence that `a` is worse.
    Less,
}

/// Paired approximate randomization test on the macro-F1 difference of two
/// systems, two-sided. Returns a p-value in (0, 1].
pub fn significance_test(gold: &[SeverityLevel], pred_a: &[SeverityLevel], pred_b: &[SeverityLevel], iterations: usize, seed: u64) -> Result<f64> {
    randomization_test(gold, pred_a, pred_b, iterations, seed, Alternative::TwoSided)
}

/// Randomization test with a chosen alternative.
///
/// When `2^n <= iterations` every swap assignment is enumerated and the
/// p-value is exact; otherwise `iterations` random assignments are drawn
/// and the observed assignment is counted once more.
pub fn randomization_test(
    gold: &[SeverityLevel],
    pred_a: &[SeverityLevel],
    pred_b: &[SeverityLevel],
    iterations: usize,
    seed: u64,
    alternative: Alternative,
) -> Result<f64> {
    check_lengths(gold.len(), pred_a.len())?;
    check_lengths(gold.len(), pred_b.len())?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be positive".into()));
    }
    let n = gold.len();
    let diff = |swap: &dyn Fn(usize) -> bool| -> f64 {
        let mut ma = [[0u64; K]; K];
        let mut mb = [[0u64; K]; K];
        for i in 0..n {
            let (a, b) = if swap(i) { (pred_b[i], pred_a[i]) } else { (pred_a[i], pred_b[i]) };
            ma[gold[i].value()][a.value()] += 1;
            mb[gold[i].value()][b.value()] += 1;
        }
        mean_f1(&per_class_f1(&ma)) - mean_f1(&per_class_f1(&mb))
    };
    let observed = diff(&|_| false);
    let tol = 1e-12;
    let extreme = |d: f64| match alternative {
        Alternative::TwoSided => d.abs() >= observed.abs() - tol,
        Alternative::Less => d <= observed + tol,
    };

    if n < usize::BITS as usize && (1usize << n) <= iterations {
        let total = 1usize << n;
        let count = (0..total).filter(|&mask| extreme(diff(&|i| mask >> i & 1 == 1))).count();
        return Ok(count as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swaps = vec![false; n];
    let mut count = 0usize;
    for _ in 0..iterations {
        swaps.iter_mut().for_each(|s| *s = rng.random::<bool>());
        if extreme(diff(&|i| swaps[i])) {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iterations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use SeverityLevel::*;

    fn levels(v: &[usize]) -> Vec<SeverityLevel> {
        v.iter().map(|&x| SeverityLevel::from_value(x).unwrap()).collect()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(macro_f1(&levels(&[0, 0, 1, 2, 3]), &levels(&[0, 1, 1, 2, 2])).unwrap(), 0.5);
        let gold = levels(&[0, 1, 2, 3]);
        assert!((macro_f1(&gold, &levels(&[0, 0, 0, 0])).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(macro_f1(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&[None, Severe], &[Severe, None]).unwrap();
        assert_eq!(m[0][3], 1);
        assert_eq!(m[3][0], 1);
        assert_eq!(m.iter().flatten().sum::<u64>(), 2);
        assert!(confusion(&[None], &[]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn cv_summary() {
        let r = CVReport::from_folds(vec![0.5, 0.5, 0.5]);
        assert_eq!((r.mean, r.std), (0.5, 0.0));
        assert_eq!(r.to_tsv().lines().count(), 4);
    }

    #[test]
    fn randomization_examples() {
        let gold = levels(&[0, 1, 2, 3]);
        let wrong = levels(&[1, 2, 3, 0]);
        assert_eq!(significance_test(&gold, &gold, &wrong, 10_000, 1).unwrap(), 0.125);
        assert_eq!(significance_test(&gold, &wrong, &wrong, 10_000, 1).unwrap(), 1.0);
        // A better than B: no evidence that A is worse.
        assert_eq!(randomization_test(&gold, &gold, &wrong, 10_000, 1, Alternative::Less).unwrap(), 1.0);
        assert_eq!(randomization_test(&gold, &wrong, &gold, 10_000, 1, Alternative::Less).unwrap(), 1.0 / 16.0);
    }

    #[test]
    fn sampled_test_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gold: Vec<_> = (0..40).map(|_| SeverityLevel::ALL[rng.random_range(0..4)]).collect();
        let a: Vec<_> = (0..40).map(|_| SeverityLevel::ALL[rng.random_range(0..4)]).collect();
        let p1 = significance_test(&gold, &a, &gold, 500, 9).unwrap();
        let p2 = significance_test(&gold, &a, &gold, 500, 9).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 <= 1.0);
    }
}
