//! Document encoders and the 4-way classification head.
//!
//! | architecture | input                  | representation width      |
//! |--------------|------------------------|---------------------------|
//! | `rnn_trans`  | utterance vectors      | `2 * hidden_dim`          |
//! | `textrcnn`   | word vectors           | `projection_dim`          |
//! | `textcnn`    | word vectors           | `channels * kernels`      |
//! | `avg_embed`  | word vectors           | `input_dim`               |
//!
//! Encoders consume a `T x input_dim` feature matrix produced by
//! [`featurize`]; embeddings are frozen, so features are computed once per
//! document and reused across epochs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{ScriptDocument, SeverityLevel};
use crate::embedding::{capped_tokens, EmbeddingProvider, ProviderKind, WordLookup, MAX_UTTERANCES};
use crate::nn::conv::{ConvBank, ConvTrace};
use crate::nn::linear::Linear;
use crate::nn::lstm::{BiLstm, BiLstmTrace};
use crate::nn::pool::{max_pool, max_pool_backward};
use crate::nn::LayoutBuilder;
use crate::parallel::*;
use crate::{Error, Result};

/// Minimum token rows fed to the convolution banks; shorter streams are
/// padded with zero vectors.
pub const TEXTCNN_MIN_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    RnnTrans,
    TextRcnn,
    TextCnn,
    AvgEmbed,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::RnnTrans,
        Architecture::TextRcnn,
        Architecture::TextCnn,
        Architecture::AvgEmbed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::RnnTrans => "rnn_trans",
            Architecture::TextRcnn => "textrcnn",
            Architecture::TextCnn => "textcnn",
            Architecture::AvgEmbed => "avg_embed",
        }
    }

    /// Which kind of embedding the encoder reads.
    pub fn input_kind(self) -> ProviderKind {
        match self {
            Architecture::RnnTrans => ProviderKind::Sentence,
            _ => ProviderKind::Word,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown architecture `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    /// Recurrent width per direction.
    pub hidden_dim: usize,
    /// Stacked Bi-LSTM layers (`rnn_trans` only).
    pub layers: usize,
    /// TextRCNN projection width.
    pub projection_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub channels: usize,
    /// Dropout rate on the classification head's input during training.
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn new(architecture: Architecture, input_dim: usize) -> Self {
        Self {
            architecture,
            input_dim,
            hidden_dim: 200,
            layers: 1,
            projection_dim: 200,
            kernel_sizes: vec![3, 4, 5],
            channels: 10,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("backbone config: {msg}")));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        match self.architecture {
            Architecture::RnnTrans if self.hidden_dim == 0 || self.layers == 0 => {
                bad("hidden_dim and layers must be positive")
            }
            Architecture::TextRcnn if self.hidden_dim == 0 || self.projection_dim == 0 => {
                bad("hidden_dim and projection_dim must be positive")
            }
            Architecture::TextCnn
                if self.channels == 0
                    || self.kernel_sizes.is_empty()
                    || self
                        .kernel_sizes
                        .iter()
                        .any(|&k| k == 0 || k > TEXTCNN_MIN_TOKENS) =>
            {
                bad("textcnn needs positive channels and kernel sizes in 1..=5")
            }
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.architecture {
            Architecture::RnnTrans => 2 * self.hidden_dim,
            Architecture::TextRcnn => self.projection_dim,
            Architecture::TextCnn => self.channels * self.kernel_sizes.len(),
            Architecture::AvgEmbed => self.input_dim,
        }
    }
}

/// Pooled document vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentRepresentation(pub Array1<f64>);

impl DocumentRepresentation {
    pub fn width(&self) -> usize {
        self.0.len()
    }
}

/// Unnormalized scores for None, Mild, Moderate, Severe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLogits(pub [f64; SeverityLevel::COUNT]);

/// Source of input vectors for [`featurize`].
#[derive(Clone, Copy)]
pub enum Embedder<'a> {
    Sentence(&'a dyn EmbeddingProvider),
    Word(&'a dyn WordLookup),
}

impl Embedder<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Sentence(p) => p.dim(),
            Embedder::Word(w) => w.dim(),
        }
    }
}

/// Turn a document into the `T x input_dim` matrix an architecture reads.
///
/// Documents are capped at [`MAX_UTTERANCES`] utterances and utterances at
/// the per-utterance token cap; word-level streams concatenate the tokens of
/// all remaining utterances.
pub fn featurize(doc: &ScriptDocument, architecture: Architecture, embedder: Embedder<'_>) -> Result<Array2<f64>> {
    if doc.utterances.is_empty() {
        return Err(Error::InvalidArgument(format!("document `{}` is empty", doc.movie_id)));
    }
    let utterances = &doc.utterances[..doc.utterances.len().min(MAX_UTTERANCES)];
    match (architecture.input_kind(), embedder) {
        (ProviderKind::Sentence, Embedder::Sentence(p)) => {
            if p.kind() != ProviderKind::Sentence {
                return Err(Error::InvalidArgument(format!(
                    "{architecture} needs a sentence-level provider"
                )));
            }
            let dim = p.dim();
            let mut out = Array2::zeros((utterances.len(), dim));
            for (row, u) in utterances.iter().enumerate() {
                let v = p.embed_utterance(u)?;
                if v.len() != dim {
                    return Err(Error::Shape {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                out.row_mut(row).assign(&ArrayView1::from(&v));
            }
            Ok(out)
        }
        (ProviderKind::Word, Embedder::Word(w)) => {
            let tokens: Vec<String> = utterances.iter().flat_map(|u| capped_tokens(&u.text)).collect();
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document `{}` has an empty token stream",
                    doc.movie_id
                )));
            }
            let rows = if architecture == Architecture::TextCnn {
                tokens.len().max(TEXTCNN_MIN_TOKENS)
            } else {
                tokens.len()
            };
            let mut out = Array2::zeros((rows, w.dim()));
            for (row, tok) in tokens.iter().enumerate() {
                w.lookup_into(tok, out.row_mut(row).as_slice_mut().expect("row-major"));
            }
            Ok(out)
        }
        _ => Err(Error::InvalidArgument(format!(
            "{architecture} reads {:?}-level embeddings",
            architecture.input_kind()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    RnnTrans { layers: Vec<BiLstm> },
    TextRcnn { lstm: BiLstm, projection: Linear },
    TextCnn { banks: Vec<ConvBank> },
    AvgEmbed,
}

/// Saved activations of one document encoding.
#[derive(Debug, Clone)]
pub enum EncodeTrace {
    RnnTrans {
        /// Input of every layer after the first.
        inputs: Vec<Array2<f64>>,
        traces: Vec<BiLstmTrace>,
        argmax: Vec<usize>,
    },
    TextRcnn {
        trace: BiLstmTrace,
        context: Array2<f64>,
        activated: Array2<f64>,
        argmax: Vec<usize>,
    },
    TextCnn {
        traces: Vec<ConvTrace>,
    },
    AvgEmbed,
}

/// A document encoder bound to slots of a parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    encoder: Encoder,
}

impl Backbone {
    pub fn new(layout: &mut LayoutBuilder, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let encoder = match config.architecture {
            Architecture::RnnTrans => {
                let mut layers = Vec::with_capacity(config.layers);
                let mut input = config.input_dim;
                for l in 0..config.layers {
                    layers.push(BiLstm::new(layout, &format!("encoder.lstm{l}"), input, config.hidden_dim));
                    input = 2 * config.hidden_dim;
                }
                Encoder::RnnTrans { layers }
            }
            Architecture::TextRcnn => {
                let lstm = BiLstm::new(layout, "encoder.lstm", config.input_dim, config.hidden_dim);
                let projection = Linear::new(
                    layout,
                    "encoder.projection",
                    2 * config.hidden_dim + config.input_dim,
                    config.projection_dim,
                );
                Encoder::TextRcnn { lstm, projection }
            }
            Architecture::TextCnn => Encoder::TextCnn {
                banks: config
                    .kernel_sizes
                    .iter()
                    .map(|&k| ConvBank::new(layout, &format!("encoder.conv{k}"), k, config.input_dim, config.channels))
                    .collect(),
            },
            Architecture::AvgEmbed => Encoder::AvgEmbed,
        };
        Ok(Self {
            config: config.clone(),
            encoder,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape {
                expected: self.config.input_dim,
                actual: x.ncols(),
            });
        }
        let min_rows = match self.config.architecture {
            Architecture::TextCnn => TEXTCNN_MIN_TOKENS,
            _ => 1,
        };
        if x.nrows() < min_rows {
            return Err(Error::InvalidArgument(format!(
                "{} needs at least {min_rows} input rows, got {}",
                self.config.architecture,
                x.nrows()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, params: &[f64], x: ArrayView2<f64>) -> Result<DocumentRepresentation> {
        Ok(self.forward(params, x)?.0)
    }

    /// Encode only the first `valid_rows` rows of a padded feature matrix.
    pub fn encode_padded(&self, params: &[f64], x: ArrayView2<f64>, valid_rows: usize) -> Result<DocumentRepresentation> {
        if valid_rows > x.nrows() {
            return Err(Error::InvalidArgument("valid_rows exceeds matrix height".into()));
        }
        self.encode(params, x.slice(s![..valid_rows, ..]))
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<(DocumentRepresentation, EncodeTrace)> {
        self.check_input(x)?;
        let x = x.as_standard_layout();
        let (rep, trace) = match &self.encoder {
            Encoder::RnnTrans { layers } => {
                let mut inputs = Vec::new();
                let mut traces = Vec::new();
                let mut current: Option<Array2<f64>> = None;
                for layer in layers {
                    let input = current.as_ref().map_or(x.view(), |c| c.view());
                    let trace = layer.run(params, input);
                    let out = trace.output();
                    traces.push(trace);
                    if let Some(prev) = current.take() {
                        inputs.push(prev);
                    }
                    current = Some(out);
                }
                let top = current.expect("at least one layer");
                let (pooled, argmax) = max_pool(top.view());
                (pooled, EncodeTrace::RnnTrans { inputs, traces, argmax })
            }
            Encoder::TextRcnn { lstm, projection } => {
                let trace = lstm.run(params, x.view());
                let context = rcnn_context(&trace, x.view());
                let activated = projection.forward_rows(params, context.view()).mapv(f64::tanh);
                let (pooled, argmax) = max_pool(activated.view());
                (
                    pooled,
                    EncodeTrace::TextRcnn {
                        trace,
                        context,
                        activated,
                        argmax,
                    },
                )
            }
            Encoder::TextCnn { banks } => {
                let traces: Vec<ConvTrace> = banks.iter().map(|b| b.forward(params, x.view())).collect();
                let pooled = traces.iter().flat_map(|t| t.pooled.iter().copied()).collect();
                (pooled, EncodeTrace::TextCnn { traces })
            }
            Encoder::AvgEmbed => (x.mean_axis(ndarray::Axis(0)).expect("non-empty"), EncodeTrace::AvgEmbed),
        };
        Ok((DocumentRepresentation(rep), trace))
    }

    /// Accumulate gradients of the encoder parameters given `dL/d rep`.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: ArrayView2<f64>, trace: &EncodeTrace, d_rep: ArrayView1<f64>) {
        let x = x.as_standard_layout();
        match (&self.encoder, trace) {
            (Encoder::RnnTrans { layers }, EncodeTrace::RnnTrans { inputs, traces, argmax }) => {
                let mut d_out = Array2::zeros((x.nrows(), 2 * self.config.hidden_dim));
                max_pool_backward(argmax, d_rep.as_slice().expect("contiguous"), d_out.view_mut());
                for l in (0..layers.len()).rev() {
                    let input = if l == 0 { x.view() } else { inputs[l - 1].view() };
                    let d_in = layers[l].backward(params, grads, input, &traces[l], d_out.view());
                    if l == 0 {
                        break;
                    }
                    d_out = d_in;
                }
            }
            (
                Encoder::TextRcnn { lstm, projection },
                EncodeTrace::TextRcnn {
                    trace,
                    context,
                    activated,
                    argmax,
                },
            ) => {
                let mut d_act = Array2::zeros(activated.dim());
                max_pool_backward(argmax, d_rep.as_slice().expect("contiguous"), d_act.view_mut());
                let d_pre = d_act * activated.mapv(|y| 1.0 - y * y);
                let d_ctx = projection.backward_rows(params, grads, context.view(), d_pre.view());
                let h = lstm.hidden();
                let d = self.config.input_dim;
                let len = x.nrows();
                let mut d_states = Array2::zeros((len, 2 * h));
                for t in 0..len {
                    if t > 0 {
                        let mut dst = d_states.slice_mut(s![t - 1, ..h]);
                        dst += &d_ctx.slice(s![t, ..h]);
                    }
                    if t + 1 < len {
                        let mut dst = d_states.slice_mut(s![t + 1, h..]);
                        dst += &d_ctx.slice(s![t, h + d..]);
                    }
                }
                lstm.backward(params, grads, x.view(), trace, d_states.view());
            }
            (Encoder::TextCnn { banks }, EncodeTrace::TextCnn { traces }) => {
                let mut offset = 0;
                for (bank, t) in banks.iter().zip(traces) {
                    let c = bank.channels();
                    bank.backward(grads, x.view(), t, d_rep.slice(s![offset..offset + c]));
                    offset += c;
                }
            }
            (Encoder::AvgEmbed, EncodeTrace::AvgEmbed) => {}
            _ => panic!("trace does not belong to this backbone"),
        }
    }
}

/// Per-position `[left context ; word vector ; right context]`, where the
/// left context of word `t` is the forward state after word `t-1` and the
/// right context the backward state after word `t+1` (zeros at the edges).
fn rcnn_context(trace: &BiLstmTrace, x: ArrayView2<f64>) -> Array2<f64> {
    let fwd = trace.forward_states();
    let bwd = trace.backward_states();
    let (len, h) = fwd.dim();
    let d = x.ncols();
    let mut ctx = Array2::zeros((len, 2 * h + d));
    for t in 0..len {
        if t > 0 {
            ctx.slice_mut(s![t, ..h]).assign(&fwd.row(t - 1));
        }
        ctx.slice_mut(s![t, h..h + d]).assign(&x.row(t));
        if t + 1 < len {
            ctx.slice_mut(s![t, h + d..]).assign(&bwd.row(t + 1));
        }
    }
    ctx
}

/// Single affine map from a representation to four class logits.
pub fn classify(rep: &DocumentRepresentation, head: &Linear, params: &[f64]) -> Result<ClassLogits> {
    if rep.width() != head.input_dim() {
        return Err(Error::Shape {
            expected: head.input_dim(),
            actual: rep.width(),
        });
    }
    if head.output_dim() != SeverityLevel::COUNT {
        return Err(Error::Shape {
            expected: SeverityLevel::COUNT,
            actual: head.output_dim(),
        });
    }
    let z = head.forward(params, rep.0.view());
    Ok(ClassLogits([z[0], z[1], z[2], z[3]]))
}

/// Featurize with a sentence provider and encode with an `rnn_trans` backbone.
pub fn encode_rnn_trans(
    doc: &ScriptDocument,
    provider: &dyn EmbeddingProvider,
    backbone: &Backbone,
    params: &[f64],
) -> Result<DocumentRepresentation> {
    expect_arch(backbone, Architecture::RnnTrans)?;
    let x = featurize(doc, Architecture::RnnTrans, Embedder::Sentence(provider))?;
    backbone.encode(params, x.view())
}

pub fn encode_textrcnn(doc: &ScriptDocument, table: &dyn WordLookup, backbone: &Backbone, params: &[f64]) -> Result<DocumentRepresentation> {
    expect_arch(backbone, Architecture::TextRcnn)?;
    let x = featurize(doc, Architecture::TextRcnn, Embedder::Word(table))?;
    backbone.encode(params, x.view())
}

pub fn encode_textcnn(doc: &ScriptDocument, table: &dyn WordLookup, backbone: &Backbone, params: &[f64]) -> Result<DocumentRepresentation> {
    expect_arch(backbone, Architecture::TextCnn)?;
    let x = featurize(doc, Architecture::TextCnn, Embedder::Word(table))?;
    backbone.encode(params, x.view())
}

/// Mean word vector of the document. Parameter-free.
pub fn encode_avg(doc: &ScriptDocument, table: &dyn WordLookup) -> Result<DocumentRepresentation> {
    let x = featurize(doc, Architecture::AvgEmbed, Embedder::Word(table))?;
    Ok(DocumentRepresentation(x.mean_axis(ndarray::Axis(0)).expect("non-empty")))
}

/// Featurized documents keyed by movie id, computed once and shared across
/// epochs, folds and pair members.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    features: BTreeMap<String, Array2<f64>>,
}

impl FeatureStore {
    /// Featurize every distinct document, data-parallel.
    pub fn build<'d, I>(documents: I, architecture: Architecture, embedder: Embedder<'_>) -> Result<Self>
    where
        I: IntoIterator<Item = &'d ScriptDocument>,
    {
        let mut seen = BTreeMap::new();
        for doc in documents {
            seen.entry(doc.movie_id.as_str()).or_insert(doc);
        }
        let docs: Vec<&ScriptDocument> = seen.into_values().collect();
        let computed: Vec<Result<Array2<f64>>> = docs
            .par_iter()
            .map(|d| featurize(d, architecture, embedder))
            .collect();
        let mut features = BTreeMap::new();
        for (doc, x) in docs.into_iter().zip(computed) {
            features.insert(doc.movie_id.clone(), x?);
        }
        Ok(Self { features })
    }

    pub fn insert(&mut self, movie_id: impl Into<String>, x: Array2<f64>) {
        self.features.insert(movie_id.into(), x);
    }

    pub fn get(&self, movie_id: &str) -> Option<&Array2<f64>> {
        self.features.get(movie_id)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn expect_arch(backbone: &Backbone, arch: Architecture) -> Result<()> {
    if backbone.config.architecture != arch {
        return Err(Error::InvalidArgument(format!(
            "expected a {arch} backbone, got {}",
            backbone.config.architecture
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{HashEmbedder, WordEmbeddingTable};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &BackboneConfig) -> (Backbone, Vec<f64>, Linear) {
        let mut lb = LayoutBuilder::new();
        let bb = Backbone::new(&mut lb, config).unwrap();
        let head = Linear::new(&mut lb, "head", bb.output_dim(), 4);
        let layout = lb.finish();
        let params = layout.initialize(&mut ChaCha8Rng::seed_from_u64(5));
        (bb, params, head)
    }

    fn doc(lines: &[&str]) -> ScriptDocument {
        ScriptDocument::from_lines("d", "D", lines.iter().copied()).unwrap()
    }

    #[test]
    fn rnn_trans_width_and_single_step() {
        let mut cfg = BackboneConfig::new(Architecture::RnnTrans, 16);
        cfg.hidden_dim = 6;
        let (bb, params, _) = build(&cfg);
        let emb = HashEmbedder::new(16).unwrap();
        let rep = encode_rnn_trans(&doc(&["hello there", "general kenobi"]), &emb, &bb, &params).unwrap();
        assert_eq!(rep.width(), 12);

        let x = featurize(&doc(&["only line"]), Architecture::RnnTrans, Embedder::Sentence(&emb)).unwrap();
        let (rep, trace) = bb.forward(&params, x.view()).unwrap();
        if let EncodeTrace::RnnTrans { traces, .. } = trace {
            assert_eq!(rep.0, traces[0].output().row(0));
        } else {
            unreachable!()
        }
    }

    #[test]
    fn rnn_trans_rejects_word_provider() {
        let table = WordEmbeddingTable::from_entries(4, vec![("a".to_string(), vec![1.0; 4])]).unwrap();
        let r = featurize(&doc(&["a"]), Architecture::RnnTrans, Embedder::Sentence(&table));
        assert!(r.is_err());
    }

    #[test]
    fn textrcnn_single_word_is_projected_triple() {
        let mut cfg = BackboneConfig::new(Architecture::TextRcnn, 3);
        cfg.hidden_dim = 2;
        cfg.projection_dim = 5;
        let (bb, params, _) = build(&cfg);
        let table = WordEmbeddingTable::from_entries(3, vec![("hi".to_string(), vec![0.5, -1.0, 2.0])]).unwrap();
        let rep = encode_textrcnn(&doc(&["hi"]), &table, &bb, &params).unwrap();
        let Encoder::TextRcnn { projection, .. } = &bb.encoder else { unreachable!() };
        let triple = array![0.0, 0.0, 0.5, -1.0, 2.0, 0.0, 0.0];
        let expected = projection.forward(&params, triple.view()).mapv(f64::tanh);
        assert_eq!(rep.0, expected);

        let oov = encode_textrcnn(&doc(&["zzz qqq", "www"]), &table, &bb, &params).unwrap();
        assert!(oov.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn textcnn_width_padding_and_constant_input() {
        let cfg = BackboneConfig::new(Architecture::TextCnn, 4);
        let (bb, params, _) = build(&cfg);
        let emb = HashEmbedder::new(4).unwrap();
        let x = featurize(&doc(&["a b c d"]), Architecture::TextCnn, Embedder::Word(&emb)).unwrap();
        assert_eq!(x.nrows(), 5);
        assert!(x.row(4).iter().all(|&v| v == 0.0));
        assert_eq!(bb.encode(&params, x.view()).unwrap().width(), 30);

        let constant = Array2::from_elem((9, 4), 0.3);
        let (_, trace) = bb.forward(&params, constant.view()).unwrap();
        let EncodeTrace::TextCnn { traces } = trace else { unreachable!() };
        let Encoder::TextCnn { banks } = &bb.encoder else { unreachable!() };
        for (bank, t) in banks.iter().zip(&traces) {
            let window = Array1::from_elem(bank.width * 4, 0.3);
            let resp = bank.weight.mat(&params).dot(&window) + &bank.bias.vec(&params);
            let expected = resp.mapv(|v| v.max(0.0));
            assert_eq!(t.pooled, expected);
        }
    }

    #[test]
    fn averaging() {
        let table = WordEmbeddingTable::from_entries(
            2,
            vec![("x".to_string(), vec![1.0, 1.0]), ("y".to_string(), vec![3.0, 3.0])],
        )
        .unwrap();
        assert_eq!(encode_avg(&doc(&["x y"]), &table).unwrap().0.to_vec(), vec![2.0, 2.0]);
        assert_eq!(encode_avg(&doc(&["x"]), &table).unwrap().0.to_vec(), vec![1.0, 1.0]);
        assert_eq!(encode_avg(&doc(&["q r"]), &table).unwrap().0.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn classify_bias_and_scaling() {
        let cfg = BackboneConfig::new(Architecture::AvgEmbed, 3);
        let (_, mut params, head) = build(&cfg);
        head.weight.vec_mut(&mut params).fill(0.0);
        head.bias.vec_mut(&mut params).assign(&array![0.1, 0.2, 0.3, 0.4]);
        let rep = DocumentRepresentation(array![1.0, -2.0, 3.0]);
        assert_eq!(classify(&rep, &head, &params).unwrap().0, [0.1, 0.2, 0.3, 0.4]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout_params = {
            let mut lb = LayoutBuilder::new();
            let _ = Linear::new(&mut lb, "head", 3, 4);
            lb.finish().initialize(&mut rng)
        };
        let base = classify(&rep, &head, &layout_params).unwrap().0;
        let doubled: Vec<f64> = layout_params.iter().map(|p| 2.0 * p).collect();
        let twice = classify(&rep, &head, &doubled).unwrap().0;
        let argmax = |z: [f64; 4]| (0..4).max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap()).unwrap();
        for k in 0..4 {
            assert!((twice[k] - 2.0 * base[k]).abs() < 1e-12);
        }
        assert_eq!(argmax(base), argmax(twice));

        let wrong = DocumentRepresentation(array![1.0, 2.0]);
        assert!(classify(&wrong, &head, &params).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BackboneConfig::new(Architecture::TextCnn, 4);
        cfg.kernel_sizes = vec![3, 7];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::new(Architecture::RnnTrans, 4);
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::new(Architecture::RnnTrans, 0).validate().is_err());
    }
}
