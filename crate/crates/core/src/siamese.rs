//! Tied-weight ranking-classification network and its training loop.
//!
//! One backbone and one parameter buffer serve both members of a pair. The
//! classification head scores each member on its own; the ranking head reads
//! `[u ; v ; |u - v|]` and predicts whether the left movie is LOWER, EQUAL or
//! HIGHER in severity than the right one. A training step minimizes
//! `l_c + l_r`, where `l_c` averages the 4-way cross-entropy over both pair
//! members and `l_r` averages the 3-way cross-entropy over pairs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{featurize, Backbone, BackboneConfig, DocumentRepresentation, EncodeTrace, Embedder, FeatureStore};
use crate::corpus::{write_atomic, Aspect, AspectDataset, LabeledInstance, Part, ScriptDocument, SeverityLevel};
use crate::eval::macro_f1;
use crate::nn::linear::Linear;
use crate::nn::{cross_entropy, softmax, Adam, Layout, LayoutBuilder};
use crate::parallel::*;
use crate::seed::derive;
use crate::{Error, Result};

/// Severity of the left item relative to the right one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RankLabel {
    Lower = 0,
    Equal = 1,
    Higher = 2,
}

impl RankLabel {
    pub const ALL: [RankLabel; 3] = [RankLabel::Lower, RankLabel::Equal, RankLabel::Higher];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The label seen from the other side of the pair.
    pub fn swap(self) -> Self {
        match self {
            RankLabel::Lower => RankLabel::Higher,
            RankLabel::Equal => RankLabel::Equal,
            RankLabel::Higher => RankLabel::Lower,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            RankLabel::Lower => '<',
            RankLabel::Equal => '=',
            RankLabel::Higher => '>',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RankLabel::Lower => "LOWER",
            RankLabel::Equal => "EQUAL",
            RankLabel::Higher => "HIGHER",
        }
    }
}

impl fmt::Display for RankLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown rank label `{s}`"))
    }
}

/// Ranking target for a pair of gold labels.
pub fn cpr(a: SeverityLevel, b: SeverityLevel) -> RankLabel {
    match a.cmp(&b) {
        std::cmp::Ordering::Less => RankLabel::Lower,
        std::cmp::Ordering::Equal => RankLabel::Equal,
        std::cmp::Ordering::Greater => RankLabel::Higher,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub left: LabeledInstance,
    pub right: LabeledInstance,
    pub rank: RankLabel,
}

/// Two distinct indices in `0..n`, uniformly over ordered pairs.
pub fn sample_pair_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Draw two distinct training instances and label the pair with [`cpr`].
pub fn sample_pair<R: Rng + ?Sized>(train: &[LabeledInstance], rng: &mut R) -> Result<PairSample> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair sampling needs at least 2 instances, got {}",
            train.len()
        )));
    }
    let (i, j) = sample_pair_indices(train.len(), rng);
    let (left, right) = (train[i].clone(), train[j].clone());
    let rank = cpr(left.label, right.label);
    Ok(PairSample { left, right, rank })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    /// Unweighted ranking loss; zero for classification-only steps.
    pub l_r: f64,
    /// `l_c + rank_weight * l_r`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Pairs sampled per epoch; `None` means `ceil(N / 2)`.
    pub pairs_per_epoch: Option<usize>,
    /// Pairs per step (multitask) or `2 * batch_size` instances per step
    /// (classification only).
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub rank_weight: f64,
    /// Rescale each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            pairs_per_epoch: None,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            rank_weight: 1.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::InvalidArgument("pairs_per_epoch must be positive".into()));
        }
        if !(self.rank_weight >= 0.0 && self.rank_weight.is_finite()) {
            return Err(Error::InvalidArgument("rank_weight must be non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"SEVMODEL";

/// Everything needed to rebuild a model, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format_version: u32,
    pub aspect: Aspect,
    pub backbone: BackboneConfig,
    pub multitask: bool,
    pub seed: u64,
    pub train: TrainConfig,
    /// Identity of the embedding provider the features came from.
    pub embedder_id: String,
    /// Set once training has selected a checkpoint.
    pub best_dev_macro_f1: Option<f64>,
    pub best_epoch: usize,
    pub config_hash: String,
}

/// Hex SHA-256 over the settings that determine a trained model.
pub fn config_hash(aspect: Aspect, backbone: &BackboneConfig, multitask: bool, train: &TrainConfig, embedder_id: &str) -> String {
    let canonical = serde_json::json!({
        "aspect": aspect,
        "backbone": backbone,
        "multitask": multitask,
        "train": train,
        "embedder_id": embedder_id,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    layout: Layout,
    backbone: Backbone,
    class_head: Linear,
    rank_head: Option<Linear>,
}

impl Network {
    fn build(backbone: &BackboneConfig, multitask: bool) -> Result<Self> {
        let mut lb = LayoutBuilder::new();
        let backbone = Backbone::new(&mut lb, backbone)?;
        let width = backbone.output_dim();
        let class_head = Linear::new(&mut lb, "class_head", width, SeverityLevel::COUNT);
        let rank_head = multitask.then(|| Linear::new(&mut lb, "rank_head", 3 * width, RankLabel::ALL.len()));
        Ok(Self {
            layout: lb.finish(),
            backbone,
            class_head,
            rank_head,
        })
    }
}

/// Affine ranking head on `[u ; v ; |u - v|]`, logits ordered
/// (LOWER, EQUAL, HIGHER).
pub fn rank_head(u: &DocumentRepresentation, v: &DocumentRepresentation, head: &Linear, params: &[f64]) -> Result<[f64; 3]> {
    if u.width() != v.width() {
        return Err(Error::Shape {
            expected: u.width(),
            actual: v.width(),
        });
    }
    if head.input_dim() != 3 * u.width() {
        return Err(Error::Shape {
            expected: head.input_dim() / 3,
            actual: u.width(),
        });
    }
    let z = head.forward(params, pair_features(u.0.view(), v.0.view()).view());
    Ok([z[0], z[1], z[2]])
}

/// `[u ; v ; |u - v|]`
pub fn pair_features(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    let r = u.len();
    let mut f = Array1::zeros(3 * r);
    f.slice_mut(s![..r]).assign(&u);
    f.slice_mut(s![r..2 * r]).assign(&v);
    for k in 0..r {
        f[2 * r + k] = (u[k] - v[k]).abs();
    }
    f
}

/// One training pair, by reference to precomputed features.
#[derive(Debug, Clone, Copy)]
pub struct PairExample<'a> {
    pub left: &'a Array2<f64>,
    pub right: &'a Array2<f64>,
    pub left_label: SeverityLevel,
    pub right_label: SeverityLevel,
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a Array2<f64>,
    pub label: SeverityLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub level: SeverityLevel,
    pub probabilities: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: RankLabel,
    /// Canonical (LOWER, EQUAL, HIGHER) probabilities.
    pub probabilities: [f64; 3],
}

/// Argmax with ties going to the lowest severity.
fn argmax_low(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Argmax over (LOWER, EQUAL, HIGHER) with ties going to EQUAL.
fn rank_argmax(p: [f64; 3]) -> RankLabel {
    let [lo, eq, hi] = p;
    if eq >= lo && eq >= hi || lo == hi {
        RankLabel::Equal
    } else if lo > hi {
        RankLabel::Lower
    } else {
        RankLabel::Higher
    }
}

/// Dropout state for one encoding during training.
struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

struct Encoded {
    rep: Array1<f64>,
    trace: EncodeTrace,
    mask: Option<Array1<f64>>,
}

/// A read-only view of one Siamese branch.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'m> {
    backbone: &'m Backbone,
    params: &'m [f64],
}

impl<'m> Branch<'m> {
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<DocumentRepresentation> {
        self.backbone.encode(self.params, x)
    }

    pub fn params(&self) -> &'m [f64] {
        self.params
    }

    pub fn backbone(&self) -> &'m Backbone {
        self.backbone
    }
}

/// Shared-encoder model with a classification head and, when trained in
/// multitask mode, a ranking head.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    meta: ModelMeta,
    network: Network,
    params: Vec<f64>,
}

impl SiameseModel {
    /// Fresh model with seeded initialization.
    pub fn new(aspect: Aspect, backbone: &BackboneConfig, multitask: bool, train: &TrainConfig, embedder_id: &str) -> Result<Self> {
        train.validate()?;
        let network = Network::build(backbone, multitask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(train.seed, "init"));
        let params = network.layout.initialize(&mut rng);
        Ok(Self {
            meta: ModelMeta {
                format_version: MODEL_FORMAT_VERSION,
                aspect,
                backbone: backbone.clone(),
                multitask,
                seed: train.seed,
                train: train.clone(),
                embedder_id: embedder_id.to_string(),
                best_dev_macro_f1: None,
                best_epoch: 0,
                config_hash: config_hash(aspect, backbone, multitask, train, embedder_id),
            },
            network,
            params,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn aspect(&self) -> Aspect {
        self.meta.aspect
    }

    pub fn is_multitask(&self) -> bool {
        self.network.rank_head.is_some()
    }

    pub fn layout(&self) -> &Layout {
        &self.network.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.network.backbone
    }

    pub fn class_head(&self) -> &Linear {
        &self.network.class_head
    }

    pub fn rank_head_layer(&self) -> Option<&Linear> {
        self.network.rank_head.as_ref()
    }

    pub fn left_branch(&self) -> Branch<'_> {
        Branch {
            backbone: &self.network.backbone,
            params: &self.params,
        }
    }

    pub fn right_branch(&self) -> Branch<'_> {
        Branch {
            backbone: &self.network.backbone,
            params: &self.params,
        }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<DocumentRepresentation> {
        self.network.backbone.encode(&self.params, x)
    }

    pub fn predict_features(&self, x: ArrayView2<f64>) -> Result<Prediction> {
        let rep = self.encode(x)?;
        let logits = crate::backbones::classify(&rep, &self.network.class_head, &self.params)?;
        let p = softmax(&logits.0);
        let probabilities = [p[0], p[1], p[2], p[3]];
        Ok(Prediction {
            level: SeverityLevel::ALL[argmax_low(&probabilities)],
            probabilities,
        })
    }

    /// Severity prediction for a raw document.
    pub fn predict_severity(&self, doc: &ScriptDocument, embedder: Embedder<'_>) -> Result<Prediction> {
        let x = featurize(doc, self.meta.backbone.architecture, embedder)?;
        self.predict_features(x.view())
    }

    /// Canonical comparison from two representations: the average of the
    /// forward softmax and the label-swapped softmax of the reversed pair.
    pub fn compare_representations(&self, a: &DocumentRepresentation, b: &DocumentRepresentation) -> Result<Comparison> {
        let head = self.network.rank_head.as_ref().ok_or_else(|| {
            Error::Unsupported("compare requires a multitask model; this model was trained for classification only".into())
        })?;
        let ab = softmax(&rank_head(a, b, head, &self.params)?);
        let ba = softmax(&rank_head(b, a, head, &self.params)?);
        let probabilities = [(ab[0] + ba[2]) / 2.0, (ab[1] + ba[1]) / 2.0, (ab[2] + ba[0]) / 2.0];
        Ok(Comparison {
            label: rank_argmax(probabilities),
            probabilities,
        })
    }

    pub fn compare_features(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Comparison> {
        if !self.is_multitask() {
            return self.compare_representations(&DocumentRepresentation(Array1::zeros(0)), &DocumentRepresentation(Array1::zeros(0)));
        }
        let ra = self.encode(a)?;
        let rb = self.encode(b)?;
        self.compare_representations(&ra, &rb)
    }

    /// Severity of `a` relative to `b`.
    pub fn compare(&self, a: &ScriptDocument, b: &ScriptDocument, embedder: Embedder<'_>) -> Result<Comparison> {
        if !self.is_multitask() {
            return self.compare_features(ArrayView2::from_shape((0, 0), &[]).unwrap(), ArrayView2::from_shape((0, 0), &[]).unwrap());
        }
        let arch = self.meta.backbone.architecture;
        let xa = featurize(a, arch, embedder)?;
        let xb = featurize(b, arch, embedder)?;
        self.compare_features(xa.view(), xb.view())
    }

    fn encode_train(&self, params: &[f64], x: ArrayView2<f64>, dropout: Option<&mut DropoutCtx>) -> Result<Encoded> {
        let (rep, trace) = self.network.backbone.forward(params, x)?;
        let rep = rep.0;
        let mask = match dropout {
            Some(ctx) if ctx.rate > 0.0 => {
                let keep = 1.0 - ctx.rate;
                let m: Array1<f64> = (0..rep.len())
                    .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Some(m)
            }
            _ => None,
        };
        Ok(Encoded { rep, trace, mask })
    }

    fn backprop_encoding(&self, params: &[f64], grads: &mut [f64], x: ArrayView2<f64>, enc: &Encoded, d_rep: Array1<f64>) {
        self.network.backbone.backward(params, grads, x, &enc.trace, d_rep.view());
    }

    /// Class cross-entropy of one encoding, with dropout on the head's input;
    /// gradient scaled by `scale` is pushed into the class head and returned
    /// for the representation.
    fn class_term(&self, params: &[f64], grads: &mut [f64], enc: &Encoded, label: SeverityLevel, scale: f64) -> (f64, Array1<f64>) {
        let head = &self.network.class_head;
        let input = match &enc.mask {
            Some(m) => &enc.rep * m,
            None => enc.rep.clone(),
        };
        let z = head.forward(params, input.view());
        let (loss, g) = cross_entropy(z.as_slice().expect("contiguous"), label.value());
        let dz = Array1::from(g) * scale;
        let mut d_rep = head.backward(params, grads, input.view(), dz.view());
        if let Some(m) = &enc.mask {
            d_rep *= m;
        }
        (loss, d_rep)
    }

    fn pair_gradient(
        &self,
        params: &[f64],
        ex: &PairExample<'_>,
        scale_c: f64,
        scale_r: f64,
        dropout: Option<(f64, u64)>,
    ) -> Result<(f64, f64, Vec<f64>)> {
        let head = self
            .network
            .rank_head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("joint step requires a multitask model".into()))?;
        let mut grads = vec![0.0; params.len()];
        let mut ctx = dropout.map(|(rate, seed)| DropoutCtx {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        let left = self.encode_train(params, ex.left.view(), ctx.as_mut())?;
        let right = self.encode_train(params, ex.right.view(), ctx.as_mut())?;

        let (ce_l, mut d_left) = self.class_term(params, &mut grads, &left, ex.left_label, scale_c);
        let (ce_r, mut d_right) = self.class_term(params, &mut grads, &right, ex.right_label, scale_c);

        let feats = pair_features(left.rep.view(), right.rep.view());
        let z = head.forward(params, feats.view());
        let (rank_loss, g) = cross_entropy(z.as_slice().expect("contiguous"), cpr(ex.left_label, ex.right_label).index());
        let dz = Array1::from(g) * scale_r;
        let d_feat = head.backward(params, &mut grads, feats.view(), dz.view());
        let r = left.rep.len();
        for k in 0..r {
            let sign = (left.rep[k] - right.rep[k]).signum() * f64::from(left.rep[k] != right.rep[k]);
            let d_abs = d_feat[2 * r + k] * sign;
            d_left[k] += d_feat[k] + d_abs;
            d_right[k] += d_feat[r + k] - d_abs;
        }

        self.backprop_encoding(params, &mut grads, ex.left.view(), &left, d_left);
        self.backprop_encoding(params, &mut grads, ex.right.view(), &right, d_right);
        Ok((ce_l + ce_r, rank_loss, grads))
    }

    fn batch_joint(&self, params: &[f64], batch: &[PairExample<'_>], dropout_seed: Option<u64>) -> Result<(LossBreakdown, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len() as f64;
        let w = self.meta.train.rank_weight;
        let rate = self.meta.backbone.dropout;
        let parts: Vec<Result<(f64, f64, Vec<f64>)>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let dropout = dropout_seed.map(|s| (rate, derive(s, &format!("dropout/{i}"))));
                self.pair_gradient(params, &batch[i], 1.0 / (2.0 * b), w / b, dropout)
            })
            .collect();
        let mut grads = vec![0.0; params.len()];
        let (mut sum_c, mut sum_r) = (0.0, 0.0);
        for part in parts {
            let (c, r, g) = part?;
            sum_c += c;
            sum_r += r;
            grads.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
        }
        let l_c = sum_c / (2.0 * b);
        let l_r = sum_r / b;
        Ok((
            LossBreakdown {
                l_c,
                l_r,
                total: l_c + w * l_r,
            },
            grads,
        ))
    }

    fn batch_classification(&self, params: &[f64], batch: &[Example<'_>], dropout_seed: Option<u64>) -> Result<(LossBreakdown, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = batch.len() as f64;
        let rate = self.meta.backbone.dropout;
        let parts: Vec<Result<(f64, Vec<f64>)>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let mut grads = vec![0.0; params.len()];
                let mut ctx = dropout_seed.map(|s| DropoutCtx {
                    rate,
                    rng: ChaCha8Rng::seed_from_u64(derive(s, &format!("dropout/{i}"))),
                });
                let enc = self.encode_train(params, batch[i].features.view(), ctx.as_mut())?;
                let (loss, d_rep) = self.class_term(params, &mut grads, &enc, batch[i].label, 1.0 / n);
                self.backprop_encoding(params, &mut grads, batch[i].features.view(), &enc, d_rep);
                Ok((loss, grads))
            })
            .collect();
        let mut grads = vec![0.0; params.len()];
        let mut sum = 0.0;
        for part in parts {
            let (l, g) = part?;
            sum += l;
            grads.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
        }
        let l_c = sum / n;
        Ok((LossBreakdown { l_c, l_r: 0.0, total: l_c }, grads))
    }

    /// Joint loss and its gradient at the current parameters (no dropout).
    pub fn joint_loss_and_gradient(&self, batch: &[PairExample<'_>]) -> Result<(LossBreakdown, Vec<f64>)> {
        self.batch_joint(&self.params, batch, None)
    }

    /// Mean classification cross-entropy and gradient (no dropout).
    pub fn classification_loss_and_gradient(&self, batch: &[Example<'_>]) -> Result<(LossBreakdown, Vec<f64>)> {
        self.batch_classification(&self.params, batch, None)
    }

    /// One optimizer step on `l_c + l_r` over a batch of pairs.
    pub fn joint_step(&mut self, optimizer: &mut Adam, batch: &[PairExample<'_>], dropout_seed: Option<u64>) -> Result<LossBreakdown> {
        let (loss, mut grads) = self.batch_joint(&self.params, batch, dropout_seed)?;
        check_finite(&loss)?;
        clip(&mut grads, self.meta.train.clip_norm);
        optimizer.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// One optimizer step on the classification loss alone.
    pub fn classification_step(&mut self, optimizer: &mut Adam, batch: &[Example<'_>], dropout_seed: Option<u64>) -> Result<LossBreakdown> {
        let (loss, mut grads) = self.batch_classification(&self.params, batch, dropout_seed)?;
        check_finite(&loss)?;
        clip(&mut grads, self.meta.train.clip_norm);
        optimizer.step(&mut self.params, &grads);
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::with_capacity(28 + meta.len() + 8 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated model file"))?;
            cursor += n;
            Ok(chunk)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported model format version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let meta: ModelMeta = serde_json::from_slice(take(meta_len)?)
            .map_err(|e| Error::ModelFormat(format!("bad config block: {e}")))?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let network = Network::build(&meta.backbone, meta.multitask)?;
        if network.layout.len != n {
            return Err(Error::ModelFormat(format!(
                "config implies {} parameters, file holds {n}",
                network.layout.len
            )));
        }
        let raw = take(8 * n)?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { meta, network, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn clip(grads: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let scale = max / norm;
            grads.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

fn check_finite(loss: &LossBreakdown) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite loss (l_c = {}, l_r = {})",
            loss.l_c, loss.l_r
        )))
    }
}

/// Per-epoch training record; also the metrics-log line format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_r: f64,
    pub dev_macro_f1: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {:.6}, {:.6}, {:.6}", self.epoch, self.l_c, self.l_r, self.dev_macro_f1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SiameseModel,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    /// Metrics log: a `#` header and one `epoch, l_c, l_r, dev_macro_f1`
    /// line per epoch.
    pub fn metrics_log(&self) -> String {
        let mut out = String::from("# epoch, l_c, l_r, dev_macro_f1\n");
        for e in &self.log {
            out.push_str(&format!("{e}\n"));
        }
        out
    }
}

fn features_of<'a>(store: &'a FeatureStore, inst: &LabeledInstance) -> Result<&'a Array2<f64>> {
    store.get(inst.movie_id()).ok_or_else(|| {
        Error::InvalidArgument(format!("no features for movie `{}`", inst.movie_id()))
    })
}

/// Predict every instance, in order.
pub fn predict_all(model: &SiameseModel, instances: &[&LabeledInstance], store: &FeatureStore) -> Result<Vec<Prediction>> {
    instances
        .par_iter()
        .map(|inst| model.predict_features(features_of(store, inst)?.view()))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Train a model on the train part of `dataset`, selecting the epoch with the
/// best dev macro F1 and stopping after `patience` epochs without gain.
///
/// With `multitask` each epoch samples `pairs_per_epoch` pairs and takes
/// joint steps on batches of `batch_size` pairs. Without it each epoch draws
/// `2 * pairs_per_epoch` single instances from consecutive shuffled passes
/// over the training set, in batches of `2 * batch_size`, so both modes see
/// the same number of steps and instances.
pub fn train(
    config: &TrainConfig,
    dataset: &AspectDataset,
    backbone: &BackboneConfig,
    multitask: bool,
    features: &FeatureStore,
    embedder_id: &str,
) -> Result<TrainOutcome> {
    if dataset.split.is_none() {
        return Err(Error::InvalidArgument("training needs a train/dev split".into()));
    }
    let train_set: Vec<&LabeledInstance> = dataset.part(Part::Train);
    let dev_set: Vec<&LabeledInstance> = dataset.part(Part::Dev);
    if train_set.is_empty() {
        return Err(Error::Training("empty train split".into()));
    }
    if dev_set.is_empty() {
        return Err(Error::Training("empty dev split".into()));
    }
    if multitask && train_set.len() < 2 {
        return Err(Error::Training("multitask training needs at least 2 train instances".into()));
    }
    let train_x: Vec<&Array2<f64>> = train_set.iter().map(|i| features_of(features, i)).collect::<Result<_>>()?;
    let train_y: Vec<SeverityLevel> = train_set.iter().map(|i| i.label).collect();
    let dev_gold: Vec<SeverityLevel> = dev_set.iter().map(|i| i.label).collect();

    let mut model = SiameseModel::new(dataset.aspect, backbone, multitask, config, embedder_id)?;
    let mut optimizer = Adam::new(model.params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, "pairs"));
    let dropout_root = derive(config.seed, "dropout");
    let n = train_set.len();
    let pairs_per_epoch = config.pairs_per_epoch.unwrap_or(n.div_ceil(2));

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut queue: Vec<usize> = Vec::new();

    for epoch in 1..=config.max_epochs {
        let (mut sum_c, mut sum_r, mut steps) = (0.0, 0.0, 0usize);
        let mut next_dropout = || {
            step += 1;
            (backbone.dropout > 0.0).then(|| derive(dropout_root, &step.to_string()))
        };
        if multitask {
            let pairs: Vec<(usize, usize)> = (0..pairs_per_epoch).map(|_| sample_pair_indices(n, &mut rng)).collect();
            for chunk in pairs.chunks(config.batch_size) {
                let batch: Vec<PairExample> = chunk
                    .iter()
                    .map(|&(i, j)| PairExample {
                        left: train_x[i],
                        right: train_x[j],
                        left_label: train_y[i],
                        right_label: train_y[j],
                    })
                    .collect();
                let loss = model
                    .joint_step(&mut optimizer, &batch, next_dropout())
                    .map_err(|e| annotate(e, epoch, steps))?;
                sum_c += loss.l_c;
                sum_r += loss.l_r;
                steps += 1;
            }
        } else {
            let mut order = Vec::with_capacity(2 * pairs_per_epoch);
            while order.len() < 2 * pairs_per_epoch {
                if queue.is_empty() {
                    queue.extend(0..n);
                    rand::seq::SliceRandom::shuffle(queue.as_mut_slice(), &mut rng);
                }
                order.push(queue.pop().expect("refilled"));
            }
            for chunk in order.chunks(2 * config.batch_size) {
                let batch: Vec<Example> = chunk
                    .iter()
                    .map(|&i| Example {
                        features: train_x[i],
                        label: train_y[i],
                    })
                    .collect();
                let loss = model
                    .classification_step(&mut optimizer, &batch, next_dropout())
                    .map_err(|e| annotate(e, epoch, steps))?;
                sum_c += loss.l_c;
                steps += 1;
            }
        }

        let dev_pred: Vec<SeverityLevel> = predict_all(&model, &dev_set, features)?.iter().map(|p| p.level).collect();
        let dev_f1 = macro_f1(&dev_gold, &dev_pred)?;
        let entry = EpochLog {
            epoch,
            l_c: sum_c / steps as f64,
            l_r: sum_r / steps as f64,
            dev_macro_f1: dev_f1,
        };
        log::info!("{}: {entry}", dataset.aspect);
        log.push(entry);

        let best_f1 = best.as_ref().map(|(f, _, _)| *f);
        if best_f1.is_none_or(|f| dev_f1 >= f) {
            best = Some((dev_f1, epoch, model.params.clone()));
        }
        // A tie moves the checkpoint forward but does not count as improvement.
        if best_f1.is_none_or(|f| dev_f1 > f) {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best_f1, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.meta.best_dev_macro_f1 = Some(best_f1);
    model.meta.best_epoch = best_epoch;
    Ok(TrainOutcome { model, log })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}
