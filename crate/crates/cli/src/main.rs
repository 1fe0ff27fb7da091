mod config;

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, LevelFilter};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cbert::corpus::{
    generate_synthetic, load_corpus, make_folds, Corpus, FoldPlan, PreprocessConfig, Problem, SignalSplit,
};
use cbert::features::{write_features_csv, FeatureNormalizer};
use cbert::lexer::{lex_code, tokenize_text};
use cbert::metrics::{evaluate, percent, Aggregate, EvalBatch};
use cbert::model::{AblationMode, CBertModel, Featurizer};
use cbert::numerics::save_checkpoint;
use cbert::training::{
    baseline_cross_validate, cross_validate, derive_seed, mlm_pretrain, mlm_recovery, train_full, write_loss_csv,
    CvReport, MlmModel, TrainConfig,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cbert", version, about = "Difficulty estimation for programming problems")]
struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON object of dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one dotted key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of difficulty classes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// MLM-pretrain the code encoder on each training set before fine-tuning.
    #[arg(long)]
    pretrain: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut sets = Vec::new();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(k) = self.k {
            sets.push(format!("num_classes={k}"));
        }
        if let Some(m) = self.mode {
            sets.push(format!("mode={}", m.as_str()));
        }
        if let Some(e) = self.epochs {
            sets.push(format!("train.epochs={e}"));
        }
        if self.pretrain {
            sets.push("pretrain=true".into());
        }
        sets.extend(self.sets.iter().cloned());
        RunConfig::resolve(self.config.as_deref(), &sets)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Fold assignment written by `prepare`; derived from the seed otherwise.
    #[arg(long)]
    folds: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted difficulty signals.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "both")]
        split: SignalSplit,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Clean a corpus, build vocabularies and assign folds.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tokenize a source file (or a statement with --text) into TSV.
    Lex {
        /// Input file, `-` for standard input.
        input: PathBuf,
        #[arg(long)]
        text: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Dump explicit and hand-crafted feature vectors as CSV.
    Features {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Masked-token pre-training of the code encoder with held-out recovery.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Fraction of problems held out for the recovery score.
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cross-validate the model; optionally fit and save a final model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also train on the whole corpus and write model.ckpt.
        #[arg(long)]
        save_model: bool,
    },
    /// Score a checkpoint on a labelled corpus, or cross-validate without artifacts.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Cross-validate the feature-only linear baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Cross-validate every ablation mode.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict difficulty for problems in a JSONL file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n,
            k,
            seed,
            split,
            out,
        } => {
            let corpus = generate_synthetic(n, k, seed, split)?;
            corpus.write_jsonl(&out)?;
            info!("wrote {} problems to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Prepare { corpus, out_dir, cfg } => prepare(&corpus, &out_dir, &cfg.resolve()?),
        Command::Lex { input, text, out } => lex(&input, text, &out),
        Command::Features { corpus, out, cfg } => {
            let cfg = cfg.resolve()?;
            let corpus = load(&corpus, &cfg)?;
            let norm = FeatureNormalizer::fit(&corpus.problems, corpus.tag_vocab.clone());
            let f = create(&out)?;
            write_features_csv(f, &corpus.problems, &norm)?;
            info!("wrote {} feature rows to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            corpus,
            out_dir,
            holdout,
            cfg,
        } => pretrain(&corpus, &out_dir, holdout, &cfg.resolve()?),
        Command::Train { run, save_model } => train_cmd(&run, save_model),
        Command::Eval {
            run,
            checkpoint,
            baseline,
        } => eval_cmd(&run, checkpoint.as_deref(), baseline),
        Command::Ablate { run } => ablate(&run),
        Command::Predict { checkpoint, input, out } => predict(&checkpoint, &input, &out),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_manifest(out_dir: &Path, command: &str, cfg: &RunConfig, paths: Value) -> Result<()> {
    write_json(
        &out_dir.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "paths": paths,
            "config": cfg,
        }),
    )
}

fn preprocess_config(cfg: &RunConfig) -> PreprocessConfig {
    PreprocessConfig {
        remove_stopwords: cfg.preprocess.remove_stopwords,
        ..PreprocessConfig::default()
    }
}

/// Loads and cleans a corpus; rejected lines and dropped problems are logged.
fn load(path: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let (raw, report) = load_corpus(path, cfg.num_classes)?;
    if !report.rejected.is_empty() {
        log::warn!("{}: {} lines rejected", path.display(), report.rejected.len());
    }
    let (corpus, dropped) = raw.preprocess(&preprocess_config(cfg));
    if corpus.is_empty() {
        bail!("{}: no problems left after preprocessing", path.display());
    }
    info!(
        "{}: {} problems ({} dropped), class counts {:?}",
        path.display(),
        corpus.len(),
        dropped.len(),
        corpus.class_counts()
    );
    Ok(corpus)
}

fn fold_plan(args: &RunArgs, corpus: &Corpus, cfg: &RunConfig) -> Result<FoldPlan> {
    let plan = match &args.folds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => make_folds(corpus, cfg.seed)?,
    };
    if !plan.covers(corpus) {
        bail!("fold plan does not cover every problem of {}", args.corpus.display());
    }
    Ok(plan)
}

fn prepare(corpus_path: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let corpus = load(corpus_path, cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    corpus.write_jsonl(&out_dir.join("prepared.jsonl"))?;
    // Whole-corpus vocabularies are for inspection; training refits per fold.
    let featurizer = Featurizer::fit(&corpus, corpus.tag_vocab.clone(), &cfg.featurizer);
    featurizer.code_vocab.save(&out_dir.join("vocab_code.json"))?;
    featurizer.text_vocab.save(&out_dir.join("vocab_text.json"))?;
    let plan = make_folds(&corpus, cfg.seed)?;
    write_json(&out_dir.join("folds.json"), &plan)?;
    write_manifest(
        out_dir,
        "prepare",
        cfg,
        json!({"corpus": corpus_path, "out_dir": out_dir}),
    )?;
    info!(
        "prepared {} problems; vocab sizes code {} text {}; fold sizes {:?}",
        corpus.len(),
        featurizer.code_vocab.len(),
        featurizer.text_vocab.len(),
        plan.fold_sizes()
    );
    Ok(())
}

fn lex(input: &Path, text: bool, out: &Path) -> Result<()> {
    let mut src = String::new();
    if input.as_os_str() == "-" {
        io::stdin().read_to_string(&mut src)?;
    } else {
        src = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    }
    let mut w = create(out)?;
    if text {
        for tok in tokenize_text(&src) {
            writeln!(w, "{tok}")?;
        }
    } else {
        for tok in lex_code(&src) {
            writeln!(w, "{}\t{}", tok.ttype.as_str(), tok.text.escape_default())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pretrain(corpus_path: &Path, out_dir: &Path, holdout: f64, cfg: &RunConfig) -> Result<()> {
    if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
        bail!("--holdout must lie in (0, 1), got {holdout}");
    }
    cfg.mlm.validate()?;
    let corpus = load(corpus_path, cfg)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[7])));
    let n_held = ((corpus.len() as f64 * holdout).round() as usize).clamp(1, corpus.len().saturating_sub(1).max(1));
    let (held_idx, train_idx) = order.split_at(n_held);
    if train_idx.is_empty() {
        bail!("corpus too small to hold out problems for pre-training");
    }
    let train = corpus.subset(train_idx);
    let held = corpus.subset(held_idx);
    let featurizer = Featurizer::fit(&train, corpus.tag_vocab.clone(), &cfg.featurizer);
    let enc_cfg = cfg.arch.code_encoder(&featurizer);
    let mut model = MlmModel::new(enc_cfg.clone(), cfg.seed)?;
    let seqs = |c: &Corpus| -> Result<Vec<_>> {
        Ok(featurizer.prepare_all(&c.problems)?.into_iter().map(|e| e.code).collect())
    };
    let mlm_cfg = cbert::training::MlmConfig {
        seed: cfg.seed,
        ..cfg.mlm.clone()
    };
    let outcome = mlm_pretrain(&mut model, &seqs(&train)?, &mlm_cfg)?;
    let recovery = mlm_recovery(&model, &seqs(&held)?, mlm_cfg.mask_prob, derive_seed(cfg.seed, &[8]))?;
    let chance = 1.0 / enc_cfg.vocab_size as f64;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut w = create(&out_dir.join("mlm_loss.csv"))?;
    write_loss_csv(&mut w, &outcome.loss_curve)?;
    w.flush()?;
    save_checkpoint(
        &out_dir.join("mlm.ckpt"),
        &model.store,
        json!({"encoder": enc_cfg, "featurizer": featurizer}),
    )?;
    write_json(
        &out_dir.join("mlm_report.json"),
        &json!({
            "train_size": train.len(),
            "heldout_size": held.len(),
            "vocab_size": enc_cfg.vocab_size,
            "loss_curve": outcome.loss_curve,
            "recovery": recovery,
            "chance": chance,
        }),
    )?;
    write_manifest(
        out_dir,
        "pretrain",
        cfg,
        json!({"corpus": corpus_path, "out_dir": out_dir}),
    )?;
    eprintln!(
        "masked-token recovery {} (chance {}, {:.1}x)",
        percent(recovery),
        percent(chance),
        recovery / chance
    );
    Ok(())
}

fn summary_line(label: &str, agg: &Aggregate) -> String {
    let pm = |s: &cbert::metrics::Summary| match s.sd {
        Some(sd) => format!("{} ± {}", percent(s.mean), percent(sd)),
        None => percent(s.mean),
    };
    let auc = agg.auc_ovr.as_ref().map(pm).unwrap_or_else(|| "n/a".into());
    format!(
        "{label:<12} AUC {auc:<18} ACC {:<18} F1 {}",
        pm(&agg.macro_acc),
        pm(&agg.macro_f1)
    )
}

fn run_cv(args: &RunArgs, corpus: &Corpus, cfg: &RunConfig, mode: AblationMode) -> Result<CvReport> {
    let plan = fold_plan(args, corpus, cfg)?;
    Ok(cross_validate(corpus, &plan, &cfg.grid_configs(), mode, &cfg.cv_options())?)
}

fn train_cmd(args: &RunArgs, save_model: bool) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = load(&args.corpus, &cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_manifest(
        &args.out_dir,
        "train",
        &cfg,
        json!({"corpus": args.corpus, "folds": args.folds, "out_dir": args.out_dir}),
    )?;
    let report = run_cv(args, &corpus, &cfg, cfg.mode)?;
    write_text(&args.out_dir.join("cv_report.json"), &report.to_json()?)?;
    for f in &report.folds {
        let mut w = create(&args.out_dir.join(format!("loss_fold{}.csv", f.test_fold)))?;
        write_loss_csv(&mut w, &f.loss_curve)?;
        w.flush()?;
    }
    eprintln!("{}", summary_line(report.mode.as_str(), &report.aggregate));

    if save_model {
        let (chosen, epochs) = final_schedule(&report);
        let train_cfg = TrainConfig {
            epochs,
            ..report.grid[chosen].clone()
        };
        let (model, featurizer, outcome) = train_full(&corpus, &train_cfg, &cfg.cv_options())?;
        let path = args.out_dir.join("model.ckpt");
        model.save(
            &path,
            &featurizer,
            json!({"preprocess": preprocess_config(&cfg), "train": train_cfg}),
        )?;
        let mut w = create(&args.out_dir.join("loss_full.csv"))?;
        write_loss_csv(&mut w, &outcome.loss_curve)?;
        w.flush()?;
        info!("saved {} ({} epochs)", path.display(), epochs);
    }
    Ok(())
}

/// Grid candidate picked on the most folds (earliest on ties) and the mean
/// epoch count of the folds that picked it.
fn final_schedule(report: &CvReport) -> (usize, usize) {
    let mut votes = vec![0usize; report.grid.len()];
    for f in &report.folds {
        votes[f.chosen] += 1;
    }
    let chosen = (0..votes.len()).fold(0, |best, c| if votes[c] > votes[best] { c } else { best });
    let picked: Vec<usize> = report.folds.iter().filter(|f| f.chosen == chosen).map(|f| f.epochs).collect();
    let epochs = (picked.iter().sum::<usize>() as f64 / picked.len().max(1) as f64).round() as usize;
    (chosen, epochs.max(1))
}

fn eval_cmd(args: &RunArgs, checkpoint: Option<&Path>, baseline: bool) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = load(&args.corpus, &cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_manifest(
        &args.out_dir,
        "eval",
        &cfg,
        json!({"corpus": args.corpus, "folds": args.folds, "checkpoint": checkpoint, "out_dir": args.out_dir}),
    )?;
    if let Some(ckpt) = checkpoint {
        let (model, featurizer, _) = load_model(ckpt)?;
        if model.config.num_classes != corpus.num_classes {
            bail!(
                "checkpoint has {} classes, corpus configured with {}",
                model.config.num_classes,
                corpus.num_classes
            );
        }
        let examples = featurizer.prepare_all(&corpus.problems)?;
        let preds = model.predict(&examples, model.mode, 32)?;
        let batch = EvalBatch::new(
            examples.iter().map(|e| e.label).collect(),
            preds.into_iter().map(|p| p.probs).collect(),
            corpus.num_classes,
        )?;
        let metrics = evaluate(&batch);
        write_json(
            &args.out_dir.join("eval_report.json"),
            &json!({"mode": model.mode, "size": corpus.len(), "metrics": metrics}),
        )?;
        let auc = metrics.auc_ovr.map(percent).unwrap_or_else(|| "n/a".into());
        eprintln!(
            "AUC {auc} ACC {} F1 {}",
            percent(metrics.macro_acc),
            percent(metrics.macro_f1)
        );
    } else if baseline {
        let plan = fold_plan(args, &corpus, &cfg)?;
        let report = baseline_cross_validate(&corpus, &plan, std::slice::from_ref(&cfg.baseline))?;
        write_json(&args.out_dir.join("baseline_report.json"), &report)?;
        eprintln!("{}", summary_line("BASELINE", &report.aggregate));
    } else {
        let report = run_cv(args, &corpus, &cfg, cfg.mode)?;
        write_text(&args.out_dir.join("cv_report.json"), &report.to_json()?)?;
        eprintln!("{}", summary_line(report.mode.as_str(), &report.aggregate));
    }
    Ok(())
}

fn ablate(args: &RunArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = load(&args.corpus, &cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_manifest(
        &args.out_dir,
        "ablate",
        &cfg,
        json!({"corpus": args.corpus, "folds": args.folds, "out_dir": args.out_dir}),
    )?;
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        info!("ablation {mode}");
        let report = run_cv(args, &corpus, &cfg, mode)?;
        write_text(
            &args.out_dir.join(format!("cv_{}.json", mode.as_str().to_lowercase())),
            &report.to_json()?,
        )?;
        eprintln!("{}", summary_line(mode.as_str(), &report.aggregate));
        rows.push(json!({
            "mode": mode,
            "auc_ovr": report.aggregate.auc_ovr,
            "macro_acc": report.aggregate.macro_acc,
            "macro_f1": report.aggregate.macro_f1,
        }));
    }
    write_json(
        &args.out_dir.join("ablation_report.json"),
        &json!({"seed": cfg.seed, "metrics": ["auc_ovr", "macro_acc", "macro_f1"], "rows": rows}),
    )
}

fn load_model(path: &Path) -> Result<(CBertModel, Featurizer, Value)> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(CBertModel::load(path)?)
}

fn predict(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (model, featurizer, extra) = load_model(checkpoint)?;
    let pre: PreprocessConfig = match extra.get("preprocess") {
        Some(v) => serde_json::from_value(v.clone()).context("checkpoint preprocessing settings")?,
        None => PreprocessConfig::default(),
    };
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut v: Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", input.display(), i + 1))?;
        // Labels are optional here.
        if let Some(obj) = v.as_object_mut() {
            obj.entry("difficulty").or_insert(json!(0));
        }
        let p: Problem = serde_json::from_value(v).with_context(|| format!("{}:{}", input.display(), i + 1))?;
        problems.push(p);
    }
    let corpus = Corpus {
        problems,
        num_classes: model.config.num_classes,
        tag_vocab: featurizer.normalizer.tag_vocab.clone(),
    };
    let (clean, dropped) = corpus.preprocess(&pre);
    if !dropped.is_empty() {
        log::warn!("no prediction for {} unusable problems: {:?}", dropped.len(), dropped);
    }
    let examples = featurizer.prepare_all(&clean.problems)?;
    let preds = model.predict(&examples, model.mode, 32)?;
    let mut w = create(out)?;
    for (ex, p) in examples.iter().zip(preds) {
        let row = json!({"id": ex.id, "probs": p.probs, "label": p.label, "mode": model.mode});
        writeln!(w, "{}", serde_json::to_string(&row)?)?;
    }
    w.flush()?;
    info!("wrote {} predictions to {}", examples.len(), out.display());
    Ok(())
}
