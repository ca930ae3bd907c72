use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use severity_core::backbones::{featurize, Architecture, Backbone, BackboneConfig, Embedder};
use severity_core::corpus::{
    filter_by_votes, kfold_split, load_corpus, stratified_split, write_corpus, Aspect, AspectDataset, LabeledInstance,
    Part, ScriptDocument, SeverityLevel, SplitRatios,
};
use severity_core::embedding::{EmbeddingProvider, HashEmbedder};
use severity_core::eval::{macro_f1, significance_test};
use severity_core::interpret::{comparator_report_features, select_comparators, Pool};
use severity_core::nn::params::LayoutBuilder;
use severity_core::nn::pool::{max_pool, max_pool_masked};
use severity_core::siamese::{cpr, RankLabel, SiameseModel, TrainConfig};
use severity_core::synthetic;

fn dataset(labels: &[usize], votes: &[u32]) -> AspectDataset {
    let instances = labels
        .iter()
        .zip(votes)
        .enumerate()
        .map(|(i, (&l, &v))| LabeledInstance {
            document: Arc::new(ScriptDocument::from_lines(format!("m{i:04}"), format!("Movie {i}"), [format!("line {i}"), "more".into()]).unwrap()),
            aspect: Aspect::Violence,
            label: SeverityLevel::ALL[l],
            votes: v,
        })
        .collect();
    AspectDataset::new(Aspect::Violence, instances)
}

/// Label vectors where every non-empty class has at least 3 members.
fn splittable() -> impl Strategy<Value = (Vec<usize>, Vec<u32>)> {
    prop::array::uniform4(prop_oneof![Just(0usize), 3usize..60]).prop_flat_map(|counts| {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let n = labels.len();
        (Just(labels), prop::collection::vec(0u32..100, n))
    })
    .prop_filter("non-empty", |(l, _)| l.len() >= 3)
}

fn levels(v: &[usize]) -> Vec<SeverityLevel> {
    v.iter().map(|&x| SeverityLevel::ALL[x]).collect()
}

fn label_pairs(max: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n)))
}

fn brute_force_macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
    (0..4)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&g, &p) in gold.iter().zip(pred) {
                match (g == c, p == c) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fn_ += 1.0,
                    _ => {}
                }
            }
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
        })
        .sum::<f64>()
        / 4.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_stratified_partition((labels, votes) in splittable(), seed in any::<u64>()) {
        let ds = dataset(&labels, &votes);
        let split = stratified_split(&ds, SplitRatios::default(), seed).unwrap();
        let map = split.split.as_ref().unwrap();
        let ids: BTreeSet<&str> = ds.instances.iter().map(|i| i.movie_id()).collect();
        prop_assert_eq!(map.len(), ds.len());
        prop_assert!(map.keys().all(|k| ids.contains(k.as_str())));

        let n = ds.len() as f64;
        let held = |r: f64| ((r * n) - 1e-9).ceil() as usize;
        prop_assert_eq!(split.part(Part::Dev).len(), held(0.1));
        prop_assert_eq!(split.part(Part::Test).len(), held(0.1));
        for c in 0..4 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            let train = split.part(Part::Train).iter().filter(|i| i.label.value() == c).count() as f64;
            prop_assert!((train - 0.8 * total).abs() < 2.0, "class {c}: train {train} of {total}");
        }
        prop_assert_eq!(stratified_split(&ds, SplitRatios::default(), seed).unwrap(), split);
    }

    #[test]
    fn vote_filter_is_idempotent_and_split_commutes((labels, votes) in splittable(), min in 1u32..100, seed in any::<u64>()) {
        let ds = dataset(&labels, &votes);
        let once = filter_by_votes(&ds, min).unwrap();
        prop_assert_eq!(&filter_by_votes(&once, min).unwrap(), &once);
        prop_assert!(once.instances.iter().all(|i| i.votes >= min));

        let kept: Vec<LabeledInstance> = ds.instances.iter().filter(|i| i.votes >= min).cloned().collect();
        let rebuilt = AspectDataset::new(ds.aspect, kept);
        let a = stratified_split(&once, SplitRatios::default(), seed);
        let b = stratified_split(&rebuilt, SplitRatios::default(), seed);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.split, b.split),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "disagree: {:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn kfold_partitions_with_balanced_classes((labels, votes) in splittable(), k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= labels.len());
        let ds = dataset(&labels, &votes);
        let folds = kfold_split(&ds, k, seed).unwrap();
        let mut seen = vec![0usize; ds.len()];
        for f in &folds {
            f.test.iter().for_each(|&i| seen[i] += 1);
            let train: BTreeSet<_> = f.train.iter().collect();
            prop_assert!(f.test.iter().all(|i| !train.contains(i)));
            prop_assert_eq!(f.train.len() + f.test.len(), ds.len());
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for c in 0..4 {
            let per_fold: Vec<usize> = folds.iter().map(|f| f.test.iter().filter(|&&i| labels[i] == c).count()).collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn macro_f1_matches_brute_force((gold, pred) in label_pairs(200)) {
        let got = macro_f1(&levels(&gold), &levels(&pred)).unwrap();
        prop_assert!((got - brute_force_macro_f1(&gold, &pred)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn macro_f1_ignores_consistent_relabeling((gold, pred) in label_pairs(80), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let map = |v: &[usize]| v.iter().map(|&x| perm[x]).collect::<Vec<_>>();
        let a = macro_f1(&levels(&gold), &levels(&pred)).unwrap();
        let b = macro_f1(&levels(&map(&gold)), &levels(&map(&pred))).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn macro_f1_is_one_only_for_perfect_predictions((gold, pred) in label_pairs(40)) {
        // With fewer than 4 classes present the absent ones score 0.
        let all_present = (0..4).all(|c| gold.contains(&c));
        let perfect = macro_f1(&levels(&gold), &levels(&gold)).unwrap();
        prop_assert_eq!(perfect == 1.0, all_present);
        if pred != gold {
            prop_assert!(macro_f1(&levels(&gold), &levels(&pred)).unwrap() < 1.0);
        }
    }

    #[test]
    fn p_values_lie_in_unit_interval((gold, pred) in label_pairs(30), seed in any::<u64>()) {
        let other: Vec<usize> = pred.iter().map(|&p| (p + 1) % 4).collect();
        let p = significance_test(&levels(&gold), &levels(&pred), &levels(&other), 200, seed).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn compare_is_swap_symmetric(seed in any::<u64>(), la in 1usize..6, lb in 1usize..6) {
        let train = TrainConfig { seed, ..TrainConfig::default() };
        let mut cfg = BackboneConfig::new(Architecture::RnnTrans, 4);
        cfg.hidden_dim = 3;
        let model = SiameseModel::new(Aspect::Sex, &cfg, true, &train, "t").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let a = Array2::from_shape_fn((la, 4), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((lb, 4), |_| rng.random_range(-1.0..1.0));
        let ab = model.compare_features(a.view(), b.view()).unwrap();
        let ba = model.compare_features(b.view(), a.view()).unwrap();
        let [lo, eq, hi] = ba.probabilities;
        prop_assert_eq!(ab.probabilities, [hi, eq, lo]);
        prop_assert_eq!(ab.label, ba.label.swap());
        prop_assert_eq!(model.compare_features(a.view(), a.view()).unwrap().label, RankLabel::Equal);
    }

    #[test]
    fn max_pool_dominates_every_step(rows in 1usize..8, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-3.0..3.0));
        let (pooled, arg) = max_pool(h.view());
        for j in 0..cols {
            prop_assert!(h.column(j).iter().all(|&v| pooled[j] >= v));
            prop_assert_eq!(h[[arg[j], j]], pooled[j]);
        }
    }

    #[test]
    fn padding_is_neutral(rows in 1usize..6, pad in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = BackboneConfig::new(Architecture::RnnTrans, 4);
        cfg.hidden_dim = 3;
        let mut layout = LayoutBuilder::new();
        let backbone = Backbone::new(&mut layout, &cfg).unwrap();
        let params = layout.finish().initialize(&mut rng);
        let x = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-1.0..1.0));
        let mut padded = Array2::from_shape_fn((rows + pad, 4), |_| rng.random_range(-9.0..9.0));
        padded.slice_mut(ndarray::s![..rows, ..]).assign(&x);
        let plain = backbone.encode(&params, x.view()).unwrap();
        let masked = backbone.encode_padded(&params, padded.view(), rows).unwrap();
        prop_assert_eq!(plain.0.mapv(f64::to_bits), masked.0.mapv(f64::to_bits));

        let valid: Vec<bool> = (0..rows + pad).map(|i| i < rows).collect();
        prop_assert_eq!(max_pool_masked(padded.view(), Some(&valid)).0, max_pool(x.view()).0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corpus_round_trips_through_disk(labels in prop::collection::vec(0usize..4, 1..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes: Vec<u32> = labels.iter().map(|_| rng.random_range(0..1000)).collect();
        let mut a = dataset(&labels, &votes);
        let mut b = a.clone();
        b.aspect = Aspect::Substance;
        b.instances.truncate(labels.len().div_ceil(2));
        b.instances.iter_mut().for_each(|i| i.aspect = Aspect::Substance);
        a.instances.iter_mut().for_each(|i| i.label = SeverityLevel::ALL[rng.random_range(0..4)]);

        let dir = tempfile::tempdir().unwrap();
        let (manifest, scripts) = (dir.path().join("m.tsv"), dir.path().join("scripts"));
        write_corpus([&a, &b], &manifest, &scripts).unwrap();
        let loaded = load_corpus(&manifest, &scripts).unwrap();
        prop_assert_eq!(&loaded[&Aspect::Violence], &a);
        prop_assert_eq!(&loaded[&Aspect::Substance], &b);
        prop_assert!(loaded.get(&Aspect::Sex).is_none_or(|d| d.is_empty()));

        write_corpus(loaded.values(), &manifest, &scripts).unwrap();
        prop_assert_eq!(load_corpus(&manifest, &scripts).unwrap(), loaded);
    }

    #[test]
    fn shapes_follow_the_config(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = HashEmbedder::new(6).unwrap();
        let lines: Vec<String> = (0..rng.random_range(1..6))
            .map(|_| (0..rng.random_range(1..5)).map(|_| format!("t{}", rng.random_range(0..30))).collect::<Vec<_>>().join(" "))
            .collect();
        let doc = ScriptDocument::from_lines("d", "d", &lines).unwrap();
        for arch in Architecture::ALL {
            let mut cfg = BackboneConfig::new(arch, 6);
            cfg.hidden_dim = rng.random_range(1..5);
            cfg.layers = rng.random_range(1..3);
            cfg.projection_dim = rng.random_range(1..5);
            cfg.channels = rng.random_range(1..4);
            cfg.kernel_sizes = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..=5)).collect();
            let want = match arch {
                Architecture::RnnTrans => 2 * cfg.hidden_dim,
                Architecture::TextRcnn => cfg.projection_dim,
                Architecture::TextCnn => cfg.channels * cfg.kernel_sizes.len(),
                Architecture::AvgEmbed => 6,
            };
            let view = if arch == Architecture::RnnTrans { Embedder::Sentence(&embedder) } else { Embedder::Word(&embedder) };
            let x = featurize(&doc, arch, view).unwrap();
            let mut layout = LayoutBuilder::new();
            let backbone = Backbone::new(&mut layout, &cfg).unwrap();
            let params = layout.finish().initialize(&mut rng);
            prop_assert_eq!(backbone.output_dim(), want);
            prop_assert_eq!(backbone.encode(&params, x.view()).unwrap().width(), want);
        }
    }

    #[test]
    fn comparator_selection_ignores_input_order(seed in any::<u64>()) {
        let cfg = synthetic::SyntheticConfig { documents: 60, min_utterances: 10, max_utterances: 12, seed, ..Default::default() };
        let ds = stratified_split(&synthetic::generate(&cfg).unwrap(), SplitRatios::default(), seed).unwrap();
        let pop = synthetic::popularity(&ds, 10);
        let mut shuffled = ds.clone();
        shuffled.instances.reverse();
        let a = select_comparators(&ds, &pop, 0, Pool::TrainDev).unwrap();
        let b = select_comparators(&shuffled, &pop, 0, Pool::TrainDev).unwrap();
        prop_assert_eq!(&a.levels, &b.levels);

        let embedder = HashEmbedder::new(4).unwrap();
        let store = severity_core::backbones::FeatureStore::build(
            ds.instances.iter().map(|i| i.document.as_ref()), Architecture::AvgEmbed, Embedder::Word(&embedder)).unwrap();
        let model = SiameseModel::new(ds.aspect, &BackboneConfig::new(Architecture::AvgEmbed, 4), true, &TrainConfig::default(), "t").unwrap();
        let movie = &ds.instances[0];
        let report = comparator_report_features(&model, &movie.document, None, store.get(movie.movie_id()).unwrap().view(), &a, &store).unwrap();
        for level in SeverityLevel::ALL {
            prop_assert!(report.levels[level.value()].len() <= 5);
            prop_assert_eq!(report.levels[level.value()].len(), a.level(level).len());
        }
    }
}

#[test]
fn cpr_is_antisymmetric_reflexive_and_transitive() {
    for a in SeverityLevel::ALL {
        assert_eq!(cpr(a, a), RankLabel::Equal);
        for b in SeverityLevel::ALL {
            assert_eq!(cpr(a, b) == RankLabel::Lower, cpr(b, a) == RankLabel::Higher);
            for c in SeverityLevel::ALL {
                let (ab, bc, ac) = (cpr(a, b), cpr(b, c), cpr(a, c));
                if ab == bc {
                    assert_eq!(ac, ab, "{a} {b} {c}");
                }
                if ab == RankLabel::Equal {
                    assert_eq!(ac, bc);
                }
                if bc == RankLabel::Equal {
                    assert_eq!(ac, ab);
                }
            }
        }
    }
}

#[test]
fn hash_provider_is_repeatable_and_centered() {
    let h = HashEmbedder::new(16).unwrap();
    let first = h.embed_text("a repeated utterance").unwrap();
    for _ in 0..1000 {
        let again = h.embed_text("a repeated utterance").unwrap();
        assert!(first.iter().zip(&again).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut mean = [0.0f64; 16];
    let mut buf = [0.0f64; 16];
    let n = 10_000;
    for i in 0..n {
        h.token_vector_into(&format!("tok{i}"), &mut buf);
        mean.iter_mut().zip(&buf).for_each(|(m, b)| *m += b / n as f64);
    }
    assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean:?}");
}
