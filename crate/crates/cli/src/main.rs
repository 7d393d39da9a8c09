//! `coach`: train, evaluate and apply two-step slot-filling models.

mod config;
mod error;
mod manifest;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coach::corpus::{few_shot_augment, leave_one_out_split, load_bio_corpus, load_token_sequences, write_bio, write_bio_corpus, CorpusFormat};
use coach::eval::{evaluate_with_breakdown, percent};
use coach::model::{CoachModel, EntityEncoderMode};
use coach::trainer::{run_experiment_matrix, train_with_log, TrainReport};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use error::CliError;
use manifest::{inputs_hash, RunManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.tsv";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "coach", version, about = "Two-step cross-domain slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every domain but the target; select on target validation data.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Tag an untagged corpus file.
    Predict(PredictArgs),
    /// Every target domain × shot count × seed, aggregated per domain.
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    target_domain: Option<String>,
    #[arg(long)]
    few_shot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_template_reg: bool,
    #[arg(long)]
    entity_encoder: Option<EntityEncoderMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Domain of the corpus; defaults to the checkpoint's target domain.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value = "bio")]
    format: String,
    /// Also report unseen/seen slot-type partitions.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One token per line (first column), blank lines between utterances.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    domain: Option<String>,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated; overrides `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated; overrides `shots` in the config.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

/// Stored alongside the model weights.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct CheckpointExtra {
    target_domain: String,
    source_slot_names: BTreeSet<String>,
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Matrix(a) => cmd_matrix(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_format(s: &str) -> Result<CorpusFormat, CliError> {
    match s {
        "bio" => Ok(CorpusFormat::Bio),
        "conll" => Ok(CorpusFormat::Conll),
        other => Err(CliError::new("config.invalid", format!("unknown corpus format {other:?}"))),
    }
}

fn load_checkpoint(path: &Path) -> Result<(CoachModel, CheckpointExtra), CliError> {
    if !path.is_file() {
        return Err(CliError::new("config.path", format!("checkpoint: no such file {}", path.display())));
    }
    let (model, extra) = CoachModel::load(path)?;
    let extra = serde_json::from_value(extra).unwrap_or_default();
    Ok((model, extra))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn report_tsv(report: &TrainReport, test: &coach::eval::F1Report) -> String {
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map(percent).unwrap_or_else(|| "-".into());
    let _ = writeln!(s, "seed\t{}", report.seed);
    let _ = writeln!(s, "config_hash\t{}", report.config_hash);
    let _ = writeln!(s, "epochs\t{}", report.epochs.len());
    let _ = writeln!(s, "best_epoch\t{}", report.best_epoch);
    let _ = writeln!(s, "best_validation_f1\t{}", opt(report.best_validation_f1));
    let _ = writeln!(s, "stopped_early\t{}", report.stopped_early);
    let _ = writeln!(s, "wall_clock_secs\t{:.3}", report.wall_clock_secs);
    let _ = writeln!(s, "test_f1\t{}", percent(test.f1));
    for (name, part) in [("test_unseen_f1", &test.unseen), ("test_seen_f1", &test.seen)] {
        let _ = writeln!(s, "{name}\t{}", part.as_ref().map(|r| percent(r.f1)).unwrap_or_else(|| "-".into()));
    }
    s.push('\n');
    s.push_str("epoch\tstep1\tstep2\treg\tvalidation_f1\n");
    for e in &report.epochs {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", e.epoch, e.step1, e.step2, e.reg, opt(e.validation_f1));
    }
    s
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&a.config)?;
    if a.target_domain.is_some() {
        config.target_domain = a.target_domain;
    }
    if let Some(k) = a.few_shot {
        config.few_shot = k;
    }
    if a.seed.is_some() {
        config.seed = a.seed;
    }
    if a.no_template_reg {
        config.use_template_reg = false;
    }
    if let Some(m) = a.entity_encoder {
        config.entity_encoder = m;
    }
    let seed = config.resolve_seed()?;
    config.check_paths()?;
    let target = config
        .target_domain
        .clone()
        .ok_or_else(|| CliError::new("config.invalid", "no target domain (set target_domain or --target-domain)"))?;
    if !config.corpora.contains_key(&target) {
        return Err(CliError::new("config.invalid", format!("target domain {target:?} has no corpus")));
    }
    let train_config = config.train_config(seed);
    train_config.validate()?;

    RunManifest {
        command: "train".into(),
        config_path: Some(a.config.clone()),
        config_snapshot: config.to_toml(),
        seed,
        out_dir: a.out.clone(),
        inputs_hash: inputs_hash(&config.input_files())?,
    }
    .write()?;

    let registry = config.load_registry()?;
    let corpora = config.load_corpora(&registry)?;
    let split = leave_one_out_split(&corpora, &target, config.validation_size, seed)?;
    let split = few_shot_augment(&split, config.few_shot, seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let table = config.embedding_table(&split, &registry, seed)?;

    let mut log = File::create(a.out.join(LOG_FILE))?;
    let (model, report) = train_with_log(&split, &registry, table, &train_config, Some(&mut log))?;
    let extra = CheckpointExtra {
        target_domain: target,
        source_slot_names: split.source_slot_names.clone(),
        seed,
    };
    model.save(&a.out.join(CHECKPOINT_FILE), serde_json::to_value(&extra).expect("extra serializes"))?;
    write_file(&a.out.join("validation.bio"), |w| write_bio_corpus(w, &split.validation))?;
    write_file(&a.out.join("test.bio"), |w| write_bio_corpus(w, &split.test))?;

    let (test_report, _) = evaluate_with_breakdown(&model, &split.test, Some(&split.source_slot_names))?;
    std::fs::write(a.out.join(REPORT_FILE), report_tsv(&report, &test_report))?;
    println!(
        "best epoch {} validation F1 {} test F1 {}",
        report.best_epoch,
        report.best_validation_f1.map(percent).unwrap_or_else(|| "-".into()),
        percent(test_report.f1)
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let format = parse_format(&a.format)?;
    let (model, extra) = load_checkpoint(&a.checkpoint)?;
    if !a.corpus.is_file() {
        return Err(CliError::new("config.path", format!("corpus: no such file {}", a.corpus.display())));
    }
    let domain = a.domain.unwrap_or(extra.target_domain);
    let data = load_bio_corpus(&a.corpus, &domain, format)?.utterances;
    let source = a.breakdown.then_some(&extra.source_slot_names);
    let (report, _) = evaluate_with_breakdown(&model, &data, source)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let (model, extra) = load_checkpoint(&a.checkpoint)?;
    if !a.input.is_file() {
        return Err(CliError::new("config.path", format!("input: no such file {}", a.input.display())));
    }
    let domain = a.domain.unwrap_or(extra.target_domain);
    let slots: Vec<usize> = model.candidate_slots(&domain);
    let sequences = load_token_sequences(&a.input)?;
    let desc = model.description_tensor()?;
    let tags = sequences
        .iter()
        .map(|tokens| Ok(model.predict_with(&desc, tokens, &slots)?.tags))
        .collect::<coach::Result<Vec<_>>>()?;
    let pairs: Vec<(&[String], &[String])> = sequences.iter().zip(&tags).map(|(t, l)| (t.as_slice(), l.as_slice())).collect();
    match &a.output {
        Some(path) => write_file(path, |w| write_bio(w, &pairs)),
        None => {
            let mut out = std::io::stdout().lock();
            write_bio(&mut out, &pairs)?;
            Ok(())
        }
    }
}

fn cmd_matrix(a: MatrixArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(s) = a.seeds {
        config.seeds = s;
    }
    if let Some(s) = a.shots {
        config.shots = s;
    }
    let seed = config.resolve_seed()?;
    config.check_paths()?;
    if config.seeds.is_empty() || config.shots.is_empty() {
        return Err(CliError::new("config.invalid", "seeds and shots must be non-empty"));
    }
    let base = config.train_config(seed);
    base.validate()?;

    RunManifest {
        command: "matrix".into(),
        config_path: Some(a.config.clone()),
        config_snapshot: config.to_toml(),
        seed,
        out_dir: a.out.clone(),
        inputs_hash: inputs_hash(&config.input_files())?,
    }
    .write()?;

    let registry = config.load_registry()?;
    let corpora = config.load_corpora(&registry)?;
    let report = run_experiment_matrix(&corpora, &registry, &config.shots, &config.seeds, config.validation_size, &base, &|split, s| {
        config.embedding_table(split, &registry, s)
    })?;
    std::fs::write(a.out.join(REPORT_FILE), report.table1_tsv())?;
    std::fs::write(a.out.join("unseen_seen.tsv"), report.table2_tsv())?;
    write_file(&a.out.join("cells.jsonl"), |w| {
        for c in &report.cells {
            let line = serde_json::json!({
                "target": c.target,
                "shots": c.shots,
                "seed": c.seed,
                "best_epoch": c.best_epoch,
                "f1": c.report.f1,
                "unseen_f1": c.report.unseen.as_ref().map(|r| r.f1),
                "seen_f1": c.report.seen.as_ref().map(|r| r.f1),
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    print!("{}", report.table1_tsv());
    Ok(())
}
