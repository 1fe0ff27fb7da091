use std::collections::HashSet;
use std::fs;

use cbert::corpus::{generate_synthetic, load_corpus, make_folds, Corpus, PreprocessConfig, SignalSplit};
use cbert::features::{baseline_fit, baseline_predict, BaselineConfig};
use cbert::model::{AblationMode, CBertModel, FeaturizerConfig};
use cbert::training::{
    baseline_cross_validate, cross_validate, digest_ids, mlm_pretrain, smooth, train_full, ArchConfig, CvOptions,
    MlmConfig, MlmModel, TrainConfig,
};

fn tiny() -> CvOptions {
    CvOptions {
        arch: ArchConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            hidden: 0,
            couple: true,
        },
        featurizer: FeaturizerConfig {
            code_max_len: 32,
            text_max_len: 24,
            ..Default::default()
        },
        mlm: None,
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..Default::default()
    }
}

fn corpus(n: usize, seed: u64, split: SignalSplit) -> Corpus {
    generate_synthetic(n, 3, seed, split)
        .unwrap()
        .preprocess(&PreprocessConfig::default())
        .0
}

#[test]
fn loader_rejects_bad_lines_and_keeps_the_rest() {
    let c = corpus(30, 1, SignalSplit::Both);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    c.write_jsonl(&path).unwrap();
    let mut text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap().to_string();
    text.push_str("not json\n");
    text.push_str(&first); // duplicate id
    text.push('\n');
    text.push_str(&first.replace(&format!("\"id\":\"{}\"", c.problems[0].id), "\"id\":\"fresh\"").replace(
        &format!("\"difficulty\":{}", c.problems[0].difficulty),
        "\"difficulty\":7",
    ));
    text.push('\n');
    fs::write(&path, text).unwrap();
    let (loaded, report) = load_corpus(&path, 3).unwrap();
    assert_eq!(loaded.len(), 30);
    assert_eq!(report.rejected.len(), 3);
    assert_eq!(report.rejected[0].0, 31);
}

#[test]
fn cross_validation_never_trains_on_its_test_fold() {
    let c = corpus(60, 2, SignalSplit::Both);
    let plan = make_folds(&c, 3).unwrap();
    let rep = cross_validate(&c, &plan, &[quick()], AblationMode::Full, &tiny()).unwrap();
    assert_eq!(rep.folds.len(), 4);
    let mut seen_test = HashSet::new();
    for f in &rep.folds {
        let test: Vec<&str> = plan.indices(&c, f.test_fold).iter().map(|&i| c.problems[i].id.as_str()).collect();
        let train: Vec<&str> = plan
            .indices_where(&c, |g| g != f.test_fold)
            .iter()
            .map(|&i| c.problems[i].id.as_str())
            .collect();
        assert_eq!(f.train_digest, digest_ids(train.iter().copied()));
        assert!(test.iter().all(|t| !train.contains(t)));
        assert_eq!(f.train_size + f.test_size, c.len());
        assert!(seen_test.insert(f.test_fold));
        assert_eq!(f.loss_curve.len(), f.epochs);
    }
    assert!(!seen_test.contains(&plan.tuning_fold));
}

#[test]
fn single_class_corpus_reports_absent_auc() {
    let mut c = corpus(60, 4, SignalSplit::Both);
    for p in &mut c.problems {
        p.difficulty = 1;
    }
    let plan = make_folds(&c, 1).unwrap();
    let rep = cross_validate(&c, &plan, &[quick()], AblationMode::Full, &tiny()).unwrap();
    assert!(rep.aggregate.auc_ovr.is_none());
    assert_eq!(rep.aggregate.auc_absent, 4);
    assert!(rep.folds.iter().all(|f| f.metrics.auc_ovr.is_none()));
    let json = rep.to_json().unwrap();
    assert!(!json.contains("NaN"));
}

#[test]
fn empty_grid_is_an_error() {
    let c = corpus(30, 1, SignalSplit::Both);
    let plan = make_folds(&c, 1).unwrap();
    assert!(cross_validate(&c, &plan, &[], AblationMode::Full, &tiny()).is_err());
}

#[test]
fn reports_repeat_exactly_under_a_seed() {
    let c = corpus(45, 5, SignalSplit::Both);
    let plan = make_folds(&c, 5).unwrap();
    let grid = [quick(), TrainConfig { lr: 2e-3, ..quick() }];
    let a = cross_validate(&c, &plan, &grid, AblationMode::NoCoupling, &tiny()).unwrap();
    let b = cross_validate(&c, &plan, &grid, AblationMode::NoCoupling, &tiny()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(a.folds.iter().all(|f| f.tuning_f1.len() == 2));
}

#[test]
fn pretrained_encoder_reaches_the_classifier() {
    let c = corpus(40, 6, SignalSplit::CodeOnly);
    let opts = CvOptions {
        mlm: Some(MlmConfig {
            epochs: 1,
            ..Default::default()
        }),
        ..tiny()
    };
    let (with_mlm, _, _) = train_full(&c, &TrainConfig { epochs: 1, lr: 0.0, ..quick() }, &opts).unwrap();
    let (without, _, _) = train_full(&c, &TrainConfig { epochs: 1, lr: 0.0, ..quick() }, &tiny()).unwrap();
    let id = with_mlm.store.id("code.layer0.attn.q.w").unwrap();
    assert_ne!(with_mlm.store.value(id), without.store.value(id));
    let tid = with_mlm.store.id("text.layer0.attn.q.w").unwrap();
    assert_eq!(with_mlm.store.value(tid), without.store.value(tid));
}

#[test]
fn mlm_loss_falls_on_synthetic_code() {
    let c = corpus(80, 7, SignalSplit::CodeOnly);
    let opts = tiny();
    let f = cbert::model::Featurizer::fit(&c, c.tag_vocab.clone(), &opts.featurizer);
    let mut m = MlmModel::new(opts.arch.code_encoder(&f), 3).unwrap();
    let seqs: Vec<_> = f.prepare_all(&c.problems).unwrap().into_iter().map(|e| e.code).collect();
    let out = mlm_pretrain(
        &mut m,
        &seqs,
        &MlmConfig {
            epochs: 8,
            lr: 3e-3,
            ..Default::default()
        },
    )
    .unwrap();
    let s = smooth(&out.loss_curve, 3);
    assert!(s.last().unwrap() < s.first().unwrap(), "{:?}", out.loss_curve);
}

#[test]
fn checkpoint_roundtrip_keeps_predictions() {
    let c = corpus(30, 8, SignalSplit::Both);
    let (model, f, _) = train_full(&c, &quick(), &tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, &f, serde_json::json!({"note": 1})).unwrap();
    let (back, f2, extra) = CBertModel::load(&path).unwrap();
    assert_eq!(extra["note"], 1);
    for p in &c.problems[..5] {
        let a = model.forward(p, &f, AblationMode::Full).unwrap();
        let b = back.forward(p, &f2, AblationMode::Full).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn baseline_separates_feature_signal() {
    let c = corpus(90, 9, SignalSplit::FeaturesOnly);
    let m = baseline_fit(&c.problems, c.tag_vocab.clone(), 3, &BaselineConfig::default()).unwrap();
    let hits = c.problems.iter().filter(|p| baseline_predict(&m, p).label == p.difficulty).count();
    assert!(hits as f64 / c.len() as f64 >= 0.99, "{hits}/{}", c.len());

    let plan = make_folds(&c, 2).unwrap();
    let rep = baseline_cross_validate(&c, &plan, &[BaselineConfig::default()]).unwrap();
    assert_eq!(rep.folds.len(), 4);
    assert!(rep.aggregate.macro_acc.mean >= 0.9);
}
