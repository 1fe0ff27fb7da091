//! Fine-tuning, masked-token pre-training of the code encoder, and the
//! fold-based cross-validation driver.

use std::collections::HashSet;
use std::io::Write;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FoldPlan, Problem, NUM_FOLDS};
use crate::features::{baseline_fit, baseline_predict, BaselineConfig, LinearBaseline};
use crate::encoder::{Encoder, EncoderConfig, SeqBatch};
use crate::error::{Error, Result};
use crate::lexer::vocab::{MASK, RESERVED};
use crate::lexer::{EncodedSequence, TokenType};
use crate::metrics::{aggregate, evaluate, macro_f1, Aggregate, EvalBatch, MetricTriple};
use crate::model::{AblationMode, CBertModel, Example, Featurizer, FeaturizerConfig, ModelConfig, Prediction};
use crate::numerics::{Adam, Graph, Optimizer, ParamId, ParamStore, Var, INIT_STD};

/// Mixes a base seed with a path of small integers (splitmix64 steps).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: AblationMode,
    /// Epochs without tuning-set improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 1,
            mode: AblationMode::Full,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("epochs, batch_size and patience must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Tuning-set macro F1 per epoch (empty without a tuning set).
    pub tune_f1: Vec<f64>,
    /// Number of epochs that produced the kept weights.
    pub best_epoch: usize,
    pub best_tune_f1: Option<f64>,
}

/// Epoch batches: shuffle, group by combined used length so batches carry
/// little padding, then shuffle the batch order.
fn epoch_batches(examples: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| (examples[i].code.used_len() + examples[i].text.used_len()) / 8);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

/// Macro F1 of `model` on `examples`.
pub fn score_f1(model: &CBertModel, examples: &[Example], mode: AblationMode) -> Result<f64> {
    let preds = model.predict(examples, mode, 64)?;
    let batch = EvalBatch::new(
        examples.iter().map(|e| e.label).collect(),
        preds.into_iter().map(|p| p.probs).collect(),
        model.config.num_classes,
    )?;
    Ok(macro_f1(&batch))
}

pub fn evaluate_examples(model: &CBertModel, examples: &[Example], mode: AblationMode) -> Result<MetricTriple> {
    let preds = model.predict(examples, mode, 64)?;
    let batch = EvalBatch::new(
        examples.iter().map(|e| e.label).collect(),
        preds.into_iter().map(|p| p.probs).collect(),
        model.config.num_classes,
    )?;
    Ok(evaluate(&batch))
}

/// Mini-batch Adam on cross-entropy. With a tuning set, stops after
/// `patience` epochs without a macro-F1 gain and keeps the best weights.
pub fn train(
    model: &mut CBertModel,
    examples: &[Example],
    cfg: &TrainConfig,
    tune: Option<&[Example]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x7a11]));
    let mut opt = Adam::new(cfg.lr);
    let mut out = TrainOutcome::default();
    let mut best_store: Option<ParamStore> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(examples, cfg.batch_size, &mut rng) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &refs, cfg.mode)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!(
                        "training loss at epoch {} (batch of {}, first id {})",
                        epoch + 1,
                        refs.len(),
                        refs[0].id
                    ),
                });
            }
            total += value * refs.len() as f64;
            g.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        let epoch_loss = total / examples.len() as f64;
        out.loss_curve.push(epoch_loss);
        match tune {
            Some(tune) => {
                let f1 = score_f1(model, tune, cfg.mode)?;
                debug!("epoch {}: loss {epoch_loss:.5} tune F1 {f1:.4}", epoch + 1);
                out.tune_f1.push(f1);
                if out.best_tune_f1.is_none_or(|b| f1 > b) {
                    out.best_tune_f1 = Some(f1);
                    out.best_epoch = epoch + 1;
                    best_store = Some(model.store.clone());
                    since_best = 0;
                    if f1 >= 1.0 {
                        // nothing can beat a perfect score
                        break;
                    }
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        break;
                    }
                }
            }
            None => {
                debug!("epoch {}: loss {epoch_loss:.5}", epoch + 1);
                out.best_epoch = epoch + 1;
            }
        }
    }
    if let Some(store) = best_store {
        model.store = store;
    }
    Ok(out)
}

pub fn write_loss_csv<W: Write>(mut w: W, curve: &[f64]) -> Result<()> {
    let io = |e| Error::io("<loss csv>", e);
    writeln!(w, "epoch,loss").map_err(io)?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1).map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
            epochs: 10,
            lr: 1e-3,
            seed: 1,
            batch_size: 16,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob must lie in [0, 1]"));
        }
        if self.mask_prob == 0.0 {
            return Err(Error::config("no masked positions: mask_prob is 0, the objective is undefined"));
        }
        let parts = [self.replace_mask, self.replace_random, self.keep];
        if parts.iter().any(|&p| p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("replace_mask + replace_random + keep must equal 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("MLM epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// A code encoder with a token-prediction head.
#[derive(Clone, Debug)]
pub struct MlmModel {
    pub encoder: Encoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub store: ParamStore,
}

impl MlmModel {
    /// The encoder is registered as `code.*` so its weights drop straight
    /// into a classifier.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new("code", config.clone(), &mut store, &mut rng)?;
        let head_w = store.normal("mlm.w", &[config.d_model, config.vocab_size], INIT_STD, &mut rng)?;
        let head_b = store.zeros("mlm.b", &[config.vocab_size])?;
        Ok(Self {
            encoder,
            head_w,
            head_b,
            store,
        })
    }

    /// Copies the encoder weights into `model`'s code encoder.
    pub fn transfer_to(&self, model: &mut CBertModel) -> Result<usize> {
        model.store.copy_prefix_from(&self.store, "code.")
    }

    fn logits_at(
        &self,
        g: &mut Graph,
        seqs: &[&EncodedSequence],
        rows: &[(usize, usize)],
    ) -> Result<Var> {
        let batch = SeqBatch::new(seqs)?;
        let out = self.encoder.forward(g, &self.store, &batch)?;
        let idx: Vec<usize> = rows.iter().map(|&(b, pos)| batch.row(b, pos)).collect();
        let h = g.gather_rows(out.hidden, &idx)?;
        let w = g.param(&self.store, self.head_w);
        let b = g.param(&self.store, self.head_b);
        g.linear(h, w, b)
    }
}

/// One masked copy of a sequence: corrupted ids and `(position, original id)`
/// targets. Only real-token positions are ever chosen.
fn mask_sequence(
    seq: &EncodedSequence,
    cfg: &MlmConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> (EncodedSequence, Vec<(usize, u32)>) {
    let mut out = seq.clone();
    let mut targets = Vec::new();
    for pos in seq.token_positions() {
        if rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        targets.push((pos, seq.ids[pos]));
        let r: f64 = rng.random();
        if r < cfg.replace_mask {
            out.ids[pos] = MASK;
        } else if r < cfg.replace_mask + cfg.replace_random && vocab_size > RESERVED.len() {
            out.ids[pos] = rng.random_range(RESERVED.len()..vocab_size) as u32;
        }
    }
    (out, targets)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmOutcome {
    pub loss_curve: Vec<f64>,
}

/// Masked-token pre-training over code sequences, encoder uncoupled.
pub fn mlm_pretrain(model: &mut MlmModel, seqs: &[EncodedSequence], cfg: &MlmConfig) -> Result<MlmOutcome> {
    cfg.validate()?;
    if seqs.len() < 10 {
        warn!("MLM pre-training on only {} sequences", seqs.len());
    }
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences for MLM pre-training"));
    }
    let vocab_size = model.encoder.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x313]));
    let mut opt = Adam::new(cfg.lr);
    let mut out = MlmOutcome::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut corrupted = Vec::with_capacity(chunk.len());
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (b, &i) in chunk.iter().enumerate() {
                let (s, t) = mask_sequence(&seqs[i], cfg, vocab_size, &mut rng);
                corrupted.push(s);
                for (pos, id) in t {
                    rows.push((b, pos));
                    labels.push(id as usize);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let refs: Vec<&EncodedSequence> = corrupted.iter().collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let logits = model.logits_at(&mut g, &refs, &rows)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("MLM loss at epoch {}", epoch + 1),
                });
            }
            total += value * labels.len() as f64;
            count += labels.len();
            g.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        if count == 0 {
            return Err(Error::invalid("no masked positions in an entire epoch"));
        }
        let l = total / count as f64;
        debug!("MLM epoch {}: loss {l:.5}", epoch + 1);
        out.loss_curve.push(l);
    }
    Ok(out)
}

/// Top-1 recovery of masked tokens: positions chosen with `mask_prob`,
/// every chosen position replaced by the mask token.
pub fn mlm_recovery(model: &MlmModel, seqs: &[EncodedSequence], mask_prob: f64, seed: u64) -> Result<f64> {
    let cfg = MlmConfig {
        mask_prob,
        replace_mask: 1.0,
        replace_random: 0.0,
        keep: 0.0,
        ..Default::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in seqs.chunks(32) {
        let mut corrupted = Vec::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, s) in chunk.iter().enumerate() {
            let (c, t) = mask_sequence(s, &cfg, model.encoder.config.vocab_size, &mut rng);
            corrupted.push(c);
            for (pos, id) in t {
                rows.push((b, pos));
                labels.push(id as usize);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let refs: Vec<&EncodedSequence> = corrupted.iter().collect();
        let mut g = Graph::new();
        let logits = model.logits_at(&mut g, &refs, &rows)?;
        let t = g.value(logits);
        for (i, &y) in labels.iter().enumerate() {
            if crate::metrics::argmax(t.row(i)) == y {
                hits += 1;
            }
        }
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::invalid("no masked positions"));
    }
    Ok(hits as f64 / total as f64)
}

/// Moving average with a trailing window; shorter than the input by
/// `window - 1`.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || curve.len() < window {
        return Vec::new();
    }
    curve
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Encoder geometry shared by both encoders; vocabulary sizes and lengths
/// come from the fitted [`Featurizer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// MLP hidden width; 0 means `d_model`.
    pub hidden: usize,
    pub couple: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            hidden: 0,
            couple: true,
        }
    }
}

impl ArchConfig {
    pub fn code_encoder(&self, f: &Featurizer) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: f.code_max_len,
            vocab_size: f.code_vocab.len(),
            type_vocab_size: TokenType::COUNT,
            couple: self.couple,
        }
    }

    pub fn model_config(&self, f: &Featurizer, num_classes: usize) -> ModelConfig {
        ModelConfig {
            code: self.code_encoder(f),
            text: EncoderConfig {
                max_len: f.text_max_len,
                vocab_size: f.text_vocab.len(),
                type_vocab_size: 0,
                ..self.code_encoder(f)
            },
            num_classes,
            feature_dim: f.normalizer.dim(),
            hidden: if self.hidden == 0 { self.d_model } else { self.hidden },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct CvOptions {
    pub arch: ArchConfig,
    pub featurizer: FeaturizerConfig,
    /// Pre-train the code encoder on each run's training code first.
    pub mlm: Option<MlmConfig>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_fold: usize,
    pub metrics: MetricTriple,
    /// Index into the grid of the candidate picked on the tuning fold.
    pub chosen: usize,
    pub tuning_f1: Vec<f64>,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// FNV-1a digest of the sorted training ids.
    pub train_digest: String,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: AblationMode,
    pub seed: u64,
    pub grid: Vec<TrainConfig>,
    pub options: CvOptions,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn digest_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut sorted: Vec<&str> = ids.into_iter().collect();
    sorted.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in sorted {
        for b in id.bytes().chain([0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Everything one run needs, fitted on its training problems only.
struct Run {
    featurizer: Featurizer,
    train: Vec<Example>,
    model: CBertModel,
}

fn ids_of(corpus: &Corpus, idx: &[usize]) -> HashSet<String> {
    idx.iter().map(|&i| corpus.problems[i].id.clone()).collect()
}

fn check_disjoint(corpus: &Corpus, train: &[usize], held_out: &[usize]) -> Result<()> {
    let train_ids = ids_of(corpus, train);
    if let Some(&i) = held_out.iter().find(|&&i| train_ids.contains(&corpus.problems[i].id)) {
        return Err(Error::invalid(format!(
            "leakage: held-out problem {} is in the training set",
            corpus.problems[i].id
        )));
    }
    Ok(())
}

fn prepare_run(
    corpus: &Corpus,
    train_idx: &[usize],
    opts: &CvOptions,
    cfg: &TrainConfig,
    mode: AblationMode,
    seed_path: &[u64],
) -> Result<Run> {
    let train_corpus = corpus.subset(train_idx);
    let featurizer = Featurizer::fit(&train_corpus, corpus.tag_vocab.clone(), &opts.featurizer);
    let train = featurizer.prepare_all(&train_corpus.problems)?;
    let model_cfg = opts.arch.model_config(&featurizer, corpus.num_classes);
    let mut model = CBertModel::new(model_cfg, mode, derive_seed(cfg.seed, seed_path))?;
    if let Some(mlm) = &opts.mlm {
        if mode.uses_code() {
            let mut pre = MlmModel::new(model.config.code.clone(), derive_seed(mlm.seed, seed_path))?;
            let seqs: Vec<EncodedSequence> = train.iter().map(|e| e.code.clone()).collect();
            mlm_pretrain(&mut pre, &seqs, mlm)?;
            pre.transfer_to(&mut model)?;
        }
    }
    Ok(Run {
        featurizer,
        train,
        model,
    })
}

/// For each test fold `t` in 1..=4: every grid candidate trains on the
/// non-tuning folds other than `t` and is early-stopped on fold 0; the best
/// candidate (tuning macro F1, then grid order) is retrained on all folds
/// except `t` for its best epoch count and scored on `t`.
pub fn cross_validate(
    corpus: &Corpus,
    plan: &FoldPlan,
    grid: &[TrainConfig],
    mode: AblationMode,
    opts: &CvOptions,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    if !plan.covers(corpus) {
        return Err(Error::invalid("fold plan does not cover the corpus"));
    }
    let grid: Vec<TrainConfig> = grid.iter().map(|c| TrainConfig { mode, ..c.clone() }).collect();
    for c in &grid {
        c.validate()?;
    }
    let tuning = plan.tuning_fold;
    let tune_idx = plan.indices(corpus, tuning);
    let mut folds = Vec::new();
    for t in plan.test_folds() {
        let test_idx = plan.indices(corpus, t);
        let inner_idx = plan.indices_where(corpus, |f| f != t && f != tuning);
        check_disjoint(corpus, &inner_idx, &tune_idx)?;

        let mut best: Option<(usize, f64, usize)> = None;
        let mut tuning_f1 = Vec::with_capacity(grid.len());
        for (c, cfg) in grid.iter().enumerate() {
            let mut run = prepare_run(corpus, &inner_idx, opts, cfg, mode, &[t as u64, c as u64, 0])?;
            let tune = run.featurizer.prepare_all(&corpus.subset(&tune_idx).problems)?;
            let outcome = train(&mut run.model, &run.train, cfg, Some(&tune))?;
            let f1 = outcome.best_tune_f1.unwrap_or(0.0);
            info!(
                "fold {t} candidate {c}: tuning F1 {f1:.4} at epoch {}",
                outcome.best_epoch
            );
            tuning_f1.push(f1);
            if best.is_none_or(|(_, b, _)| f1 > b) {
                best = Some((c, f1, outcome.best_epoch.max(1)));
            }
        }
        let (chosen, _, epochs) = best.expect("non-empty grid");

        let final_idx = plan.indices_where(corpus, |f| f != t);
        check_disjoint(corpus, &final_idx, &test_idx)?;
        let cfg = TrainConfig {
            epochs,
            ..grid[chosen].clone()
        };
        let mut run = prepare_run(corpus, &final_idx, opts, &cfg, mode, &[t as u64, chosen as u64, 1])?;
        let outcome = train(&mut run.model, &run.train, &cfg, None)?;
        let test = run.featurizer.prepare_all(&corpus.subset(&test_idx).problems)?;
        let metrics = evaluate_examples(&run.model, &test, mode)?;
        info!(
            "fold {t}: macro acc {:.4} macro F1 {:.4}",
            metrics.macro_acc, metrics.macro_f1
        );
        if metrics.auc_ovr.is_none() {
            warn!("fold {t}: AUC undefined on the test fold, reported as absent");
        }
        folds.push(FoldResult {
            test_fold: t,
            metrics,
            chosen,
            tuning_f1,
            epochs,
            train_size: final_idx.len(),
            test_size: test_idx.len(),
            train_digest: digest_ids(final_idx.iter().map(|&i| corpus.problems[i].id.as_str())),
            loss_curve: outcome.loss_curve,
        });
    }
    debug_assert_eq!(folds.len(), NUM_FOLDS - 1);
    let aggregate = aggregate(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>())?;
    Ok(CvReport {
        mode,
        seed: plan.seed,
        grid,
        options: opts.clone(),
        folds,
        aggregate,
    })
}

/// Fits a featurizer and model on every problem of `corpus` with a fixed
/// epoch budget (no tuning set).
pub fn train_full(
    corpus: &Corpus,
    cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<(CBertModel, Featurizer, TrainOutcome)> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut run = prepare_run(corpus, &all, opts, cfg, cfg.mode, &[99])?;
    let outcome = train(&mut run.model, &run.train, cfg, None)?;
    Ok((run.model, run.featurizer, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFold {
    pub test_fold: usize,
    pub metrics: MetricTriple,
    pub chosen: usize,
    pub tuning_f1: Vec<f64>,
    pub train_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub seed: u64,
    pub grid: Vec<BaselineConfig>,
    pub folds: Vec<BaselineFold>,
    pub aggregate: Aggregate,
}

fn baseline_metrics(model: &LinearBaseline, problems: &[Problem], k: usize) -> Result<MetricTriple> {
    let preds: Vec<Prediction> = problems.iter().map(|p| baseline_predict(model, p)).collect();
    let batch = EvalBatch::new(
        problems.iter().map(|p| p.difficulty).collect(),
        preds.into_iter().map(|p| p.probs).collect(),
        k,
    )?;
    Ok(evaluate(&batch))
}

/// The fold protocol of [`cross_validate`] applied to the feature-only
/// linear baseline; the grid ranges over its penalty and optimizer settings.
pub fn baseline_cross_validate(corpus: &Corpus, plan: &FoldPlan, grid: &[BaselineConfig]) -> Result<BaselineReport> {
    if grid.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    if !plan.covers(corpus) {
        return Err(Error::invalid("fold plan does not cover the corpus"));
    }
    let k = corpus.num_classes;
    let tuning = plan.tuning_fold;
    let tune = corpus.subset(&plan.indices(corpus, tuning));
    let mut folds = Vec::new();
    for t in plan.test_folds() {
        let inner = corpus.subset(&plan.indices_where(corpus, |f| f != t && f != tuning));
        let mut tuning_f1 = Vec::with_capacity(grid.len());
        for cfg in grid {
            let m = baseline_fit(&inner.problems, corpus.tag_vocab.clone(), k, cfg)?;
            tuning_f1.push(baseline_metrics(&m, &tune.problems, k)?.macro_f1);
        }
        let mut chosen = 0;
        for (c, &f1) in tuning_f1.iter().enumerate() {
            if f1 > tuning_f1[chosen] {
                chosen = c;
            }
        }
        let final_idx = plan.indices_where(corpus, |f| f != t);
        let test_idx = plan.indices(corpus, t);
        check_disjoint(corpus, &final_idx, &test_idx)?;
        let m = baseline_fit(&corpus.subset(&final_idx).problems, corpus.tag_vocab.clone(), k, &grid[chosen])?;
        let metrics = baseline_metrics(&m, &corpus.subset(&test_idx).problems, k)?;
        folds.push(BaselineFold {
            test_fold: t,
            metrics,
            chosen,
            tuning_f1,
            train_digest: digest_ids(final_idx.iter().map(|&i| corpus.problems[i].id.as_str())),
        });
    }
    let aggregate = aggregate(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>())?;
    Ok(BaselineReport {
        seed: plan.seed,
        grid: grid.to_vec(),
        folds,
        aggregate,
    })
}
