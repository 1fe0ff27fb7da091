//! Classifier on top of the two encoders: mean pooling, fusion with
//! explicit features, a two-layer MLP and softmax, plus ablation modes.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Problem};
use crate::encoder::{encode_pair, Encoder, EncoderConfig, EncoderOutput, SeqBatch};
use crate::error::{Error, Result};
use crate::features::{extract_explicit, FeatureNormalizer};
use crate::lexer::{build_vocab, encode_problem, EncodedSequence, Side, Vocab};
use crate::metrics::argmax;
use crate::numerics::{
    load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Tensor, Var, INIT_STD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    Full,
    NoText,
    NoCode,
    NoFeature,
    NoCoupling,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoText,
        AblationMode::NoCode,
        AblationMode::NoFeature,
        AblationMode::NoCoupling,
    ];

    pub fn uses_code(self) -> bool {
        self != Self::NoCode
    }

    pub fn uses_text(self) -> bool {
        self != Self::NoText
    }

    pub fn uses_features(self) -> bool {
        self != Self::NoFeature
    }

    /// Coupling needs both encoders and is off in the coupling ablation.
    pub fn couples(self) -> bool {
        matches!(self, Self::Full | Self::NoFeature)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "FULL",
            Self::NoText => "NO_TEXT",
            Self::NoCode => "NO_CODE",
            Self::NoFeature => "NO_FEATURE",
            Self::NoCoupling => "NO_COUPLING",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mode {s:?} (expected FULL, NO_TEXT, NO_CODE, NO_FEATURE or NO_COUPLING)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let t = Tensor::new(vec![1, logits.len()], logits.to_vec())
            .expect("row vector")
            .softmax_rows();
        let probs = t.into_data();
        let label = argmax(&probs);
        Self { probs, label }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Code,
    Text,
    Features,
}

/// Classifier input `[h_code, h_text, x_r]` and where each part sits.
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub x: Var,
    pub spans: Vec<(Component, Range<usize>)>,
    pub width: usize,
}

/// Mean of the hidden rows at real-token positions of each sequence.
pub fn mean_pool(g: &mut Graph, out: &EncoderOutput, batch: &SeqBatch) -> Result<Var> {
    if batch.real_lens.contains(&0) {
        return Err(Error::invalid("empty sequence"));
    }
    g.mean_row_groups(out.hidden, batch.token_rows())
}

/// Concatenates the pooled vectors and features. An ablated modality is a
/// constant zero block (no gradient path); an ablated feature span is
/// dropped altogether.
pub fn fuse(
    g: &mut Graph,
    h_code: Option<Var>,
    h_text: Option<Var>,
    x_r: Option<Var>,
    batch: usize,
    dims: (usize, usize),
) -> Result<FusionInput> {
    let mut parts = Vec::new();
    let mut spans = Vec::new();
    let mut at = 0;
    for (comp, h, d) in [(Component::Code, h_code, dims.0), (Component::Text, h_text, dims.1)] {
        let v = match h {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[batch, d])),
        };
        parts.push(v);
        spans.push((comp, at..at + d));
        at += d;
    }
    if let Some(x) = x_r {
        let f = g.value(x).cols();
        parts.push(x);
        spans.push((Component::Features, at..at + f));
        at += f;
    }
    Ok(FusionInput {
        x: g.concat_cols(&parts)?,
        spans,
        width: at,
    })
}

#[derive(Clone, Debug)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Two affine layers with GELU between; returns logits.
pub fn classify(g: &mut Graph, store: &ParamStore, head: &Head, x: &FusionInput) -> Result<Var> {
    let (w1, b1) = (g.param(store, head.w1), g.param(store, head.b1));
    let h = g.linear(x.x, w1, b1)?;
    let h = g.gelu(h);
    let (w2, b2) = (g.param(store, head.w2), g.param(store, head.b2));
    g.linear(h, w2, b2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub code: EncoderConfig,
    pub text: EncoderConfig,
    pub num_classes: usize,
    /// Width of `x_r`.
    pub feature_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
}

impl ModelConfig {
    pub fn head_input(&self, mode: AblationMode) -> usize {
        self.code.d_model
            + self.text.d_model
            + if mode.uses_features() { self.feature_dim } else { 0 }
    }
}

/// One problem ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub code: EncodedSequence,
    pub text: EncodedSequence,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub min_freq: usize,
    pub max_vocab: usize,
    pub code_max_len: usize,
    pub text_max_len: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_vocab: 5000,
            code_max_len: 128,
            text_max_len: 128,
        }
    }
}

/// Vocabularies and feature statistics, all fitted on training problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub code_vocab: Vocab,
    pub text_vocab: Vocab,
    pub normalizer: FeatureNormalizer,
    pub code_max_len: usize,
    pub text_max_len: usize,
}

impl Featurizer {
    /// `tag_vocab` comes from the whole corpus so feature width is fixed;
    /// every statistic comes from `train`.
    pub fn fit(train: &Corpus, tag_vocab: Vec<String>, cfg: &FeaturizerConfig) -> Self {
        Self {
            code_vocab: build_vocab(train, Side::Code, cfg.min_freq, cfg.max_vocab),
            text_vocab: build_vocab(train, Side::Text, cfg.min_freq, cfg.max_vocab),
            normalizer: FeatureNormalizer::fit(&train.problems, tag_vocab),
            code_max_len: cfg.code_max_len,
            text_max_len: cfg.text_max_len,
        }
    }

    pub fn prepare(&self, p: &Problem) -> Result<Example> {
        let (code, text) = encode_problem(
            p,
            &self.code_vocab,
            &self.text_vocab,
            self.code_max_len,
            self.text_max_len,
        )?;
        Ok(Example {
            id: p.id.clone(),
            code,
            text,
            features: extract_explicit(p, &self.normalizer).0,
            label: p.difficulty,
        })
    }

    pub fn prepare_all(&self, problems: &[Problem]) -> Result<Vec<Example>> {
        problems.iter().map(|p| self.prepare(p)).collect()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub fusion: FusionInput,
    pub code: Option<EncoderOutput>,
    pub text: Option<EncoderOutput>,
}

#[derive(Clone, Debug)]
pub struct CBertModel {
    pub config: ModelConfig,
    /// Mode the head was sized for.
    pub mode: AblationMode,
    pub code: Encoder,
    pub text: Encoder,
    pub head: Head,
    pub store: ParamStore,
}

impl CBertModel {
    pub fn new(config: ModelConfig, mode: AblationMode, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let code = Encoder::new("code", config.code.clone(), &mut store, &mut rng)?;
        let text = Encoder::new("text", config.text.clone(), &mut store, &mut rng)?;
        let d_in = config.head_input(mode);
        let head = Head {
            w1: store.normal("head.fc1.w", &[d_in, config.hidden], INIT_STD, &mut rng)?,
            b1: store.zeros("head.fc1.b", &[config.hidden])?,
            w2: store.normal("head.fc2.w", &[config.hidden, config.num_classes], INIT_STD, &mut rng)?,
            b2: store.zeros("head.fc2.b", &[config.num_classes])?,
        };
        Ok(Self {
            config,
            mode,
            code,
            text,
            head,
            store,
        })
    }

    /// Builds the forward graph for a batch under `mode`; the mode must
    /// agree with the head width the model was built with.
    pub fn forward_graph(&self, g: &mut Graph, batch: &[&Example], mode: AblationMode) -> Result<ForwardPass> {
        self.forward_graph_with(&self.store, g, batch, mode)
    }

    /// As [`Self::forward_graph`], reading parameter values from `store`
    /// (which must share this model's layout).
    pub fn forward_graph_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &[&Example],
        mode: AblationMode,
    ) -> Result<ForwardPass> {
        if self.config.head_input(mode) != self.config.head_input(self.mode) {
            return Err(Error::config(format!(
                "model built for {} cannot run as {mode}: head widths differ",
                self.mode
            )));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = batch.len();
        let code_seqs: Vec<&EncodedSequence> = batch.iter().map(|e| &e.code).collect();
        let text_seqs: Vec<&EncodedSequence> = batch.iter().map(|e| &e.text).collect();
        let cb = SeqBatch::new(&code_seqs)?;
        let tb = SeqBatch::new(&text_seqs)?;
        let couple = mode.couples() && self.code.config.couple && self.text.config.couple;
        let (code_out, text_out) = match (mode.uses_code(), mode.uses_text()) {
            (true, true) => {
                let (c, t) = encode_pair(g, store, &self.code, &self.text, &cb, &tb, couple)?;
                (Some(c), Some(t))
            }
            (true, false) => (Some(self.code.forward(g, store, &cb)?), None),
            (false, true) => (None, Some(self.text.forward(g, store, &tb)?)),
            (false, false) => unreachable!("every mode keeps a modality"),
        };
        let h_code = code_out.as_ref().map(|o| mean_pool(g, o, &cb)).transpose()?;
        let h_text = text_out.as_ref().map(|o| mean_pool(g, o, &tb)).transpose()?;
        let x_r = if mode.uses_features() {
            let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.features.clone()).collect();
            let t = Tensor::from_rows(&rows)?;
            if t.cols() != self.config.feature_dim {
                return Err(Error::Shape {
                    op: "features",
                    left: vec![n, t.cols()],
                    right: vec![n, self.config.feature_dim],
                });
            }
            Some(g.constant(t))
        } else {
            None
        };
        let fusion = fuse(
            g,
            h_code,
            h_text,
            x_r,
            n,
            (self.config.code.d_model, self.config.text.d_model),
        )?;
        let logits = classify(g, store, &self.head, &fusion)?;
        Ok(ForwardPass {
            logits,
            fusion,
            code: code_out,
            text: text_out,
        })
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, g: &mut Graph, batch: &[&Example], mode: AblationMode) -> Result<Var> {
        self.loss_with(&self.store, g, batch, mode)
    }

    pub fn loss_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &[&Example],
        mode: AblationMode,
    ) -> Result<Var> {
        let pass = self.forward_graph_with(store, g, batch, mode)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        g.cross_entropy(pass.logits, &labels)
    }

    pub fn predict_batch(&self, batch: &[&Example], mode: AblationMode) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, batch, mode)?;
        let logits = g.value(pass.logits);
        Ok((0..batch.len()).map(|i| Prediction::from_logits(logits.row(i))).collect())
    }

    pub fn predict(&self, examples: &[Example], mode: AblationMode, batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            out.extend(self.predict_batch(&refs, mode)?);
        }
        Ok(out)
    }

    /// Prediction for a single (preprocessed) problem.
    pub fn forward(&self, p: &Problem, featurizer: &Featurizer, mode: AblationMode) -> Result<Prediction> {
        let ex = featurizer.prepare(p)?;
        Ok(self.predict_batch(&[&ex], mode)?.remove(0))
    }

    pub fn save(&self, path: &Path, featurizer: &Featurizer, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "model": self.config,
            "mode": self.mode,
            "featurizer": featurizer,
            "extra": extra,
        });
        save_checkpoint(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Featurizer, serde_json::Value)> {
        let (store, meta) = load_checkpoint(path)?;
        let bad = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("metadata lacks {k:?}")));
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(|e| bad(e.to_string()))?;
        let mode: AblationMode = serde_json::from_value(field("mode")?).map_err(|e| bad(e.to_string()))?;
        let featurizer: Featurizer =
            serde_json::from_value(field("featurizer")?).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(config, mode, 0)?;
        let copied = model.store.copy_prefix_from(&store, "")?;
        if copied != store.len() {
            return Err(bad(format!("{} parameters in file, {copied} used", store.len())));
        }
        Ok((model, featurizer, meta.get("extra").cloned().unwrap_or_default()))
    }
}
