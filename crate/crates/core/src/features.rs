//! Explicit problem attributes, hand-crafted statement/code counts and a
//! feature-only linear baseline.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Problem;
use crate::error::{Error, Result};
use crate::lexer::{lex_code, tokenize_text, TokenType, KEYWORDS};
use crate::model::Prediction;
use crate::numerics::{Adam, Graph, Optimizer, ParamStore, Tensor};

pub const NUMERIC_NAMES: [&str; 3] = ["log_time_limit", "log_memory_limit", "log_io_size"];

fn raw_numeric(p: &Problem) -> [f64; 3] {
    [
        (p.time_limit_ms as f64).ln_1p(),
        (p.memory_limit_kb as f64).ln_1p(),
        (p.io_size_bytes as f64).ln_1p(),
    ]
}

/// z-score statistics of the log attributes plus the tag vocabulary, fitted
/// on training problems only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub tag_vocab: Vec<String>,
}

impl FeatureNormalizer {
    /// Zero-variance columns get std 1.
    pub fn fit<'a>(problems: impl IntoIterator<Item = &'a Problem>, tag_vocab: Vec<String>) -> Self {
        let rows: Vec<[f64; 3]> = problems.into_iter().map(raw_numeric).collect();
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for j in 0..3 {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                std[j] = var.sqrt();
            }
        }
        Self { mean, std, tag_vocab }
    }

    pub fn dim(&self) -> usize {
        3 + self.tag_vocab.len()
    }

    pub fn names(&self) -> Vec<String> {
        NUMERIC_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(self.tag_vocab.iter().map(|t| format!("tag:{t}")))
            .collect()
    }
}

/// `x_r`: normalized log attributes followed by a multi-hot tag vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitFeatures(pub Vec<f64>);

pub fn extract_explicit(p: &Problem, norm: &FeatureNormalizer) -> ExplicitFeatures {
    let raw = raw_numeric(p);
    let mut v: Vec<f64> = (0..3).map(|j| (raw[j] - norm.mean[j]) / norm.std[j]).collect();
    let mut hot = vec![0.0; norm.tag_vocab.len()];
    for tag in &p.category_tags {
        match norm.tag_vocab.binary_search(tag) {
            Ok(i) => hot[i] = 1.0,
            Err(_) => warn!("problem {}: unseen tag {tag:?} ignored", p.id),
        }
    }
    v.extend(hot);
    ExplicitFeatures(v)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandcraftedVector {
    pub statement_len: usize,
    pub numeric_count: usize,
    pub code_tokens: usize,
    /// One count per entry of [`KEYWORDS`], same order.
    pub keyword_counts: Vec<usize>,
    pub loops: usize,
    pub max_depth: usize,
}

impl HandcraftedVector {
    pub fn names() -> Vec<String> {
        ["statement_len", "numeric_count", "code_tokens"]
            .iter()
            .map(|s| s.to_string())
            .chain(KEYWORDS.iter().map(|k| format!("kw:{k}")))
            .chain(["loops", "max_depth"].iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.statement_len as f64,
            self.numeric_count as f64,
            self.code_tokens as f64,
        ];
        v.extend(self.keyword_counts.iter().map(|&c| c as f64));
        v.push(self.loops as f64);
        v.push(self.max_depth as f64);
        v
    }
}

fn is_numeric(tok: &str) -> bool {
    tok.parse::<f64>().is_ok() && tok.chars().next().is_some_and(|c| c.is_ascii_digit())
}

pub fn extract_handcrafted(p: &Problem) -> HandcraftedVector {
    let words = tokenize_text(&p.statement);
    let code = lex_code(&p.code);
    let kw_index: HashMap<&str, usize> = KEYWORDS.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut keyword_counts = vec![0; KEYWORDS.len()];
    let (mut loops, mut depth, mut max_depth) = (0, 0usize, 0);
    for t in &code {
        match (t.ttype, t.text.as_str()) {
            (TokenType::Keyword, kw) => {
                if let Some(&i) = kw_index.get(kw) {
                    keyword_counts[i] += 1;
                }
                if matches!(kw, "for" | "while" | "do") {
                    loops += 1;
                }
            }
            (TokenType::Punct, "{") => {
                depth += 1;
                max_depth = max_depth.max(depth);
            }
            (TokenType::Punct, "}") => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    HandcraftedVector {
        statement_len: words.len(),
        numeric_count: words.iter().filter(|w| is_numeric(w)).count(),
        code_tokens: code.len(),
        keyword_counts,
        loops,
        max_depth,
    }
}

/// Writes one CSV row per problem: id, label, explicit then hand-crafted
/// features.
pub fn write_features_csv<W: Write>(
    mut w: W,
    problems: &[Problem],
    norm: &FeatureNormalizer,
) -> Result<()> {
    let io = |e| Error::io("<features csv>", e);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(norm.names());
    header.extend(HandcraftedVector::names());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for p in problems {
        let mut cells = vec![csv_field(&p.id), p.difficulty.to_string()];
        cells.extend(extract_explicit(p, norm).0.iter().map(|v| v.to_string()));
        cells.extend(extract_handcrafted(p).to_vec().iter().map(|v| v.to_string()));
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub l2: f64,
    pub lr: f64,
    /// Full-batch optimizer steps.
    pub steps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.05,
            steps: 500,
        }
    }
}

/// Softmax-linear classifier over explicit features and standardized
/// `log1p` hand-crafted counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub normalizer: FeatureNormalizer,
    pub hand_mean: Vec<f64>,
    pub hand_std: Vec<f64>,
    pub num_classes: usize,
    /// `[dim, K]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearBaseline {
    pub fn dim(&self) -> usize {
        self.normalizer.dim() + self.hand_mean.len()
    }

    pub fn features(&self, p: &Problem) -> Vec<f64> {
        let mut v = extract_explicit(p, &self.normalizer).0;
        let hand = extract_handcrafted(p).to_vec();
        v.extend(
            hand.iter()
                .enumerate()
                .map(|(j, h)| (h.ln_1p() - self.hand_mean[j]) / self.hand_std[j]),
        );
        v
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.num_classes;
        (0..k)
            .map(|c| self.bias[c] + x.iter().enumerate().map(|(i, xi)| xi * self.weights[i * k + c]).sum::<f64>())
            .collect()
    }
}

fn design(model: &LinearBaseline, problems: &[Problem]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = problems.iter().map(|p| model.features(p)).collect();
    Tensor::from_rows(&rows)
}

/// Mean cross-entropy plus `l2 * |W|^2` on the training set.
pub fn baseline_objective(model: &LinearBaseline, problems: &[Problem], l2: f64) -> Result<f64> {
    let x = design(model, problems)?;
    let labels: Vec<usize> = problems.iter().map(|p| p.difficulty).collect();
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = model.logits(x.row(i));
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        nll += lse - z[y];
    }
    let penalty: f64 = model.weights.iter().map(|w| w * w).sum();
    Ok(nll / labels.len() as f64 + l2 * penalty)
}

pub fn baseline_fit(
    train: &[Problem],
    tag_vocab: Vec<String>,
    num_classes: usize,
    cfg: &BaselineConfig,
) -> Result<LinearBaseline> {
    if train.is_empty() {
        return Err(Error::invalid("baseline needs at least one training problem"));
    }
    let normalizer = FeatureNormalizer::fit(train, tag_vocab);
    let hands: Vec<Vec<f64>> = train
        .iter()
        .map(|p| extract_handcrafted(p).to_vec().iter().map(|h| h.ln_1p()).collect())
        .collect();
    let hd = hands[0].len();
    let n = hands.len() as f64;
    let hand_mean: Vec<f64> = (0..hd).map(|j| hands.iter().map(|h| h[j]).sum::<f64>() / n).collect();
    let hand_std: Vec<f64> = (0..hd)
        .map(|j| {
            let var = hands.iter().map(|h| (h[j] - hand_mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LinearBaseline {
        normalizer,
        hand_mean,
        hand_std,
        num_classes,
        weights: vec![],
        bias: vec![0.0; num_classes],
    };
    let dim = model.dim();
    model.weights = vec![0.0; dim * num_classes];

    let x = design(&model, train)?;
    let labels: Vec<usize> = train.iter().map(|p| p.difficulty).collect();
    let mut store = ParamStore::new();
    let w = store.zeros("baseline.w", &[dim, num_classes])?;
    let b = store.zeros("baseline.b", &[num_classes])?;
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.steps {
        store.zero_grad();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let z = g.linear(xv, wv, bv)?;
        let ce = g.cross_entropy(z, &labels)?;
        let sq = g.sum_squares(wv);
        let pen = g.scale(sq, cfg.l2);
        let loss = g.add(ce, pen)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite {
                value: g.value(loss).data()[0],
                context: "baseline training loss".into(),
            });
        }
        g.backward(loss, &mut store)?;
        opt.step(&mut store);
    }
    model.weights = store.value(w).data().to_vec();
    model.bias = store.value(b).data().to_vec();
    Ok(model)
}

pub fn baseline_predict(model: &LinearBaseline, p: &Problem) -> Prediction {
    Prediction::from_logits(&model.logits(&model.features(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SignalSplit};

    fn problem(statement: &str, code: &str) -> Problem {
        Problem {
            id: "p".into(),
            statement: statement.into(),
            code: code.into(),
            time_limit_ms: 0,
            memory_limit_kb: 0,
            io_size_bytes: 0,
            category_tags: vec![],
            difficulty: 0,
        }
    }

    #[test]
    fn handcrafted_counting_rules() {
        let h = extract_handcrafted(&problem("a b 12 7", "for(;;){while(1){}}"));
        assert_eq!((h.loops, h.max_depth), (2, 2));
        assert_eq!((h.statement_len, h.numeric_count), (4, 2));
        let h = extract_handcrafted(&problem("x", ""));
        assert_eq!(h.code_tokens, 0);
        assert!(h.keyword_counts.iter().all(|&c| c == 0));
        assert_eq!((h.loops, h.max_depth), (0, 0));
        assert_eq!(h.to_vec().len(), HandcraftedVector::names().len());
    }

    #[test]
    fn explicit_layout() {
        let mut p = problem("s", "c");
        p.time_limit_ms = 1000;
        p.category_tags = vec!["dp".into(), "zzz".into()];
        let norm = FeatureNormalizer::fit([&p], vec!["dp".into(), "greedy".into()]);
        let x = extract_explicit(&p, &norm);
        assert_eq!(x.0.len(), norm.dim());
        // single training row: centered to zero with unit std
        assert_eq!(&x.0[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&x.0[3..], &[1.0, 0.0]);
        assert_eq!(extract_explicit(&p, &norm), x);
    }

    #[test]
    fn zero_attributes_are_z_scored_zeros() {
        let mut a = problem("s", "c");
        a.time_limit_ms = 100;
        let b = problem("s", "c");
        let norm = FeatureNormalizer::fit([&a, &b], vec![]);
        let x = extract_explicit(&b, &norm);
        let expected = (0.0 - norm.mean[0]) / norm.std[0];
        assert_eq!(x.0[0], expected);
        assert_eq!(x.0[1], 0.0);
    }

    #[test]
    fn zero_model_is_uniform() {
        let c = generate_synthetic(30, 3, 1, SignalSplit::FeaturesOnly).unwrap();
        let cfg = BaselineConfig {
            steps: 0,
            ..Default::default()
        };
        let m = baseline_fit(&c.problems, c.tag_vocab.clone(), 3, &cfg).unwrap();
        let pred = baseline_predict(&m, &c.problems[0]);
        assert!(pred.probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(pred.label, 0);
    }

    #[test]
    fn separable_features_are_learned() {
        let c = generate_synthetic(150, 3, 4, SignalSplit::FeaturesOnly).unwrap();
        let m = baseline_fit(&c.problems, c.tag_vocab.clone(), 3, &BaselineConfig::default()).unwrap();
        let hits = c
            .problems
            .iter()
            .filter(|p| baseline_predict(&m, p).label == p.difficulty)
            .count();
        assert!(hits as f64 / c.len() as f64 >= 0.99, "{hits}");
    }

    #[test]
    fn stronger_penalty_never_raises_likelihood() {
        let c = generate_synthetic(60, 3, 9, SignalSplit::Both).unwrap();
        let mut prev_nll = f64::NEG_INFINITY;
        for l2 in [0.005, 0.01, 0.02, 0.04] {
            let cfg = BaselineConfig {
                l2,
                lr: 0.05,
                steps: 3000,
            };
            let m = baseline_fit(&c.problems, c.tag_vocab.clone(), 3, &cfg).unwrap();
            let nll = baseline_objective(&m, &c.problems, 0.0).unwrap();
            assert!(nll >= prev_nll - 1e-6, "l2={l2}: {nll} < {prev_nll}");
            prev_nll = nll;
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = generate_synthetic(30, 3, 1, SignalSplit::Both).unwrap();
        let norm = FeatureNormalizer::fit(&c.problems, c.tag_vocab.clone());
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &c.problems, &norm).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 31);
        let width = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == width));
        assert!(lines[0].starts_with("id,label,log_time_limit"));
    }
}
