//! `duet`: one subcommand per stage, composed through files.
//!
//! Exit status: 0 on success, 1 when some rows failed but the rest of the work
//! was written, 2 on configuration, usage or input errors.

mod config;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use duet_core::corpus::{self, QAExample, Split};
use duet_core::eval::{self, LlmGrader, MetricReport, SimParams};
use duet_core::finetune_data::{self, DEFAULT_NEGATIVES_PER_EXAMPLE, DEFAULT_NOISE_PER_EXAMPLE};
use duet_core::io::{write_atomic, write_jsonl_file};
use duet_core::pipeline::{answer_batch, BatchOptions};
use duet_core::retriever::{self, IndexParams};
use duet_core::{Duet, Exec};
use serde_json::Value;

use crate::config::{build_generator, AppConfig, BackendSpec};

#[derive(Parser)]
#[command(name = "duet", version, about = "Two-arm retrieval-augmented question answering with a referee")]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a HotpotQA JSON file into a corpus (and optionally a QA example file).
    Ingest(IngestArgs),
    /// Build and save a BM25 index over a corpus.
    Index(IndexArgs),
    /// Answer one question and print the full record as JSON.
    Answer(AnswerArgs),
    /// Answer a file of questions and write a JSONL run file.
    Run(RunArgs),
    /// Emit fine-tuning JSONL files for the internal arm, external arm and judge.
    BuildSft(BuildSftArgs),
    /// Score one or more run files against gold answers.
    Eval(EvalArgs),
    /// Monte-Carlo estimate of referee accuracy over a delta sweep (CSV on stdout).
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// HotpotQA JSON file (a top-level array of rows).
    #[arg(long)]
    input: PathBuf,
    /// train, validation (or dev), or test.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Keep only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
    /// Output corpus file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the parsed QA examples as JSONL.
    #[arg(long)]
    examples_out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus file written by `ingest`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output index file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// BM25 term-frequency saturation.
    #[arg(long, default_value_t = IndexParams::default().k1)]
    k1: f64,
    /// BM25 length normalization in [0, 1].
    #[arg(long, default_value_t = IndexParams::default().b)]
    b: f64,
}

#[derive(Args)]
struct PipelineArgs {
    /// Corpus file (overrides `corpus` in the config).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index file (overrides `index` in the config).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Documents retrieved per question (overrides `retrieval_k`).
    #[arg(long)]
    k: Option<usize>,
    /// Referee margin (overrides `referee.delta`).
    #[arg(long)]
    delta: Option<f64>,
    /// Referee strategy: alignment, text_feature or summarize (overrides `referee.strategy`).
    #[arg(long)]
    strategy: Option<duet_core::Strategy>,
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Question text.
    #[arg(long)]
    question: String,
    /// Identifier recorded in the output.
    #[arg(long, default_value = "q0")]
    qid: String,
    /// Keep stage timings in the output.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Questions: a HotpotQA JSON array, or JSONL with `qid` (or `_id`) and `question`.
    #[arg(long)]
    questions: PathBuf,
    /// Output run file (overrides `run_output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pipelines in flight (overrides `workers`; default 1).
    #[arg(long)]
    workers: Option<usize>,
    /// Answer only the first N questions.
    #[arg(long)]
    limit: Option<usize>,
    /// Keep wall-clock timings in the run file (the output is then not reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SftKind {
    Internal,
    External,
    Judge,
    All,
}

#[derive(Args)]
struct BuildSftArgs {
    /// HotpotQA JSON file to draw examples and documents from.
    #[arg(long)]
    input: PathBuf,
    /// Split of the input file.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Use only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
    /// Which record families to build.
    #[arg(long, value_enum, default_value = "all")]
    kind: SftKind,
    /// Noise documents per external-arm example.
    #[arg(long, default_value_t = DEFAULT_NOISE_PER_EXAMPLE)]
    noise: usize,
    /// Negative answers per judge example.
    #[arg(long, default_value_t = DEFAULT_NEGATIVES_PER_EXAMPLE)]
    negatives: usize,
    /// Sampling seed (overrides `seed`; default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for internal_sft.jsonl, external_sft.jsonl and judge_pairs.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run file; repeat to compare several runs side by side.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    /// Gold answers: a HotpotQA JSON array or the JSONL written by `ingest --examples-out`.
    #[arg(long)]
    gold: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also grade final answers with the `judge` backend from the config (not comparable to EM).
    #[arg(long)]
    llm_grade: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Internal arm accuracy.
    #[arg(long, default_value_t = 0.231)]
    pi: f64,
    /// External arm accuracy.
    #[arg(long, default_value_t = 0.327)]
    pe: f64,
    /// Correlation between the arms' correctness.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rho: f64,
    /// Probability the referee ranks the correct arm first when the arms disagree.
    #[arg(long, default_value_t = 1.0)]
    judge_quality: f64,
    /// Comma-separated deltas.
    #[arg(long, value_delimiter = ',', default_values_t = SimParams::default().delta_sweep)]
    delta_sweep: Vec<f64>,
    /// Monte-Carlo trials.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// RNG seed (overrides `seed`; default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_ROWS_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let cfg = AppConfig::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Index(a) => cmd_index(&cfg, a),
        Command::Answer(a) => cmd_answer(cfg, a),
        Command::Run(a) => cmd_run(cfg, a),
        Command::BuildSft(a) => cmd_build_sft(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Simulate(a) => cmd_simulate(&cfg, a),
    }
}

fn require(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .with_context(|| format!("no {name} path given (flag --{name} or config `{name}`)"))
}

fn cmd_ingest(a: IngestArgs) -> Result<ExitCode> {
    let (examples, corpus) = corpus::ingest_hotpotqa(&a.input, a.split, a.limit)?;
    let out = a.out.context("--out is required")?;
    corpus::save_corpus(&corpus, &out)?;
    if let Some(p) = &a.examples_out {
        write_jsonl_file(p, &examples).with_context(|| format!("writing {}", p.display()))?;
    }
    let stats = corpus.stats();
    eprintln!(
        "ingested {} examples, {} documents ({} tokens) -> {}",
        examples.len(),
        stats.document_count,
        stats.total_token_count,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_index(cfg: &AppConfig, a: IndexArgs) -> Result<ExitCode> {
    let corpus_path = require(a.corpus, &cfg.corpus, "corpus")?;
    let out = require(a.out, &cfg.index, "index").context("use --out or config `index`")?;
    let corpus = corpus::load_corpus(&corpus_path)?;
    let params = IndexParams {
        k1: a.k1,
        b: a.b,
        ..IndexParams::default()
    };
    let index = retriever::build_index_with(&corpus, params, Exec::default())?;
    retriever::save_index(&index, &out)?;
    eprintln!(
        "indexed {} documents, {} terms -> {}",
        index.doc_count(),
        index.terms().count(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn build_duet(mut cfg: AppConfig, a: &PipelineArgs) -> Result<Duet> {
    if let Some(k) = a.k {
        cfg.retrieval_k = Some(k);
    }
    if let Some(d) = a.delta {
        cfg.referee.delta = d;
    }
    if let Some(s) = a.strategy {
        cfg.referee.strategy = s;
    }
    let corpus_path = require(a.corpus.clone(), &cfg.corpus, "corpus")?;
    let corpus = corpus::load_corpus(&corpus_path)?;
    let index = match a.index.clone().or_else(|| cfg.index.clone()) {
        Some(p) => retriever::load_index(&p)?,
        None => {
            log::info!("no index given; building one in memory");
            retriever::build_index(&corpus, IndexParams::default())?
        }
    };
    Ok(Duet::new(Arc::new(corpus), Arc::new(index), cfg.pipeline()?)?)
}

fn cmd_answer(cfg: AppConfig, a: AnswerArgs) -> Result<ExitCode> {
    let duet = build_duet(cfg, &a.pipeline)?;
    match duet.answer(&a.qid, &a.question) {
        Ok(mut ans) => {
            if !a.timings {
                ans.strip_timings();
            }
            println!("{}", serde_json::to_string_pretty(&ans)?);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(EXIT_ROWS_FAILED))
        }
    }
}

fn qid_of(v: &Value) -> Option<&str> {
    v.get("qid").or_else(|| v.get("_id")).and_then(Value::as_str)
}

fn load_questions(path: &Path) -> Result<Vec<(String, String)>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Value> = if raw.trim_start().starts_with('[') {
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
    } else {
        raw.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
            .collect::<Result<_>>()?
    };
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let qid = qid_of(row).with_context(|| format!("question {}: missing `qid`/`_id`", i + 1))?;
        let question = row
            .get("question")
            .and_then(Value::as_str)
            .with_context(|| format!("question {}: missing `question`", i + 1))?;
        if !seen.insert(qid.to_owned()) {
            bail!("question {}: duplicate qid {qid:?}", i + 1);
        }
        out.push((qid.to_owned(), question.to_owned()));
    }
    if out.is_empty() {
        bail!("{} contains no questions", path.display());
    }
    Ok(out)
}

fn cmd_run(cfg: AppConfig, a: RunArgs) -> Result<ExitCode> {
    let out = require(a.out, &cfg.run_output, "out").context("use --out or config `run_output`")?;
    let workers = a.workers.or(cfg.workers).unwrap_or(1);
    if workers == 0 {
        bail!("--workers must be >= 1");
    }
    let mut questions = load_questions(&a.questions)?;
    if let Some(n) = a.limit {
        questions.truncate(n);
    }
    let duet = build_duet(cfg, &a.pipeline)?;
    let opts = BatchOptions {
        exec: Exec::default(),
        record_timings: a.timings,
    };
    let summary = answer_batch(&duet, &questions, workers, &out, opts)?;
    eprintln!("{} rows ({} errors) -> {}", summary.rows, summary.errors, out.display());
    Ok(if summary.errors > 0 {
        ExitCode::from(EXIT_ROWS_FAILED)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_build_sft(cfg: &AppConfig, a: BuildSftArgs) -> Result<ExitCode> {
    let (examples, corpus) = corpus::ingest_hotpotqa(&a.input, a.split, a.limit)?;
    let templates = cfg.templates()?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    if !a.out_dir.is_dir() {
        bail!("--out-dir {} is not a directory", a.out_dir.display());
    }
    let want = |k: SftKind| a.kind == k || a.kind == SftKind::All;
    let mut failed = false;
    let mut emit = |name: &str, built: Result<Vec<finetune_data::FinetuneRecord>, finetune_data::FinetuneError>| {
        let path = a.out_dir.join(name);
        match built.and_then(|records| finetune_data::write_records(&path, &records).map(|_| records.len())) {
            Ok(n) => eprintln!("{n} records -> {}", path.display()),
            Err(e) => {
                eprintln!("error: {name}: {e}");
                failed = true;
            }
        }
    };
    if want(SftKind::Internal) {
        emit("internal_sft.jsonl", finetune_data::build_internal_sft(&examples, &templates.internal));
    }
    if want(SftKind::External) {
        emit(
            "external_sft.jsonl",
            finetune_data::build_external_sft(&examples, &corpus, a.noise, seed, &templates.external),
        );
    }
    if want(SftKind::Judge) {
        emit("judge_pairs.jsonl", finetune_data::build_judge_pairs(&examples, a.negatives, seed));
    }
    Ok(if failed {
        ExitCode::from(EXIT_ROWS_FAILED)
    } else {
        ExitCode::SUCCESS
    })
}

fn load_gold(path: &Path) -> Result<Vec<QAExample>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.trim_start().starts_with('[') {
        return Ok(corpus::ingest_hotpotqa_str(&raw, Split::Validation, None)?.0);
    }
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn cmd_eval(cfg: &AppConfig, a: EvalArgs) -> Result<ExitCode> {
    let gold = load_gold(&a.gold)?;
    let grader = if a.llm_grade {
        let spec: &BackendSpec = cfg.judge.as_ref().context("--llm-grade needs a `judge` backend in the config")?;
        Some(LlmGrader::new(build_generator(spec)?))
    } else {
        None
    };

    let mut reports: Vec<(String, MetricReport)> = Vec::new();
    let mut graded = Vec::new();
    for path in &a.run {
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let rows = duet_core::pipeline::read_run(path)?;
        let report = eval::evaluate_records(&rows, &gold, Exec::default())
            .with_context(|| format!("scoring {}", path.display()))?;
        if let Some(g) = &grader {
            graded.push((label.clone(), g.accuracy(&rows, &gold)?));
        }
        reports.push((label, report));
    }

    if a.json {
        let body: Vec<Value> = reports
            .iter()
            .map(|(label, r)| {
                let mut v = serde_json::json!({ "run": label, "report": r });
                if let Some((_, acc)) = graded.iter().find(|(l, _)| l == label) {
                    v["llm_accuracy"] = Value::from(*acc);
                }
                v
            })
            .collect();
        let out = if body.len() == 1 { body[0].clone() } else { Value::Array(body) };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for (label, r) in &reports {
            if reports.len() > 1 {
                println!("== {label}");
            }
            print!("{}", eval::render_report(r));
        }
        if reports.len() > 1 {
            println!();
            print!("{}", eval::render_strategy_table(&reports));
        }
        for (label, acc) in &graded {
            println!("LLM-graded accuracy ({label}): {:.1}", 100.0 * acc);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(cfg: &AppConfig, a: SimulateArgs) -> Result<ExitCode> {
    let params = SimParams {
        p_i: a.pi,
        p_e: a.pe,
        correlation: a.rho,
        judge_quality: a.judge_quality,
        delta_sweep: a.delta_sweep,
        trials: a.trials,
        seed: a.seed.or(cfg.seed).unwrap_or(0),
    };
    let rows = eval::simulate_referee(&params)?;
    let csv = eval::sim_csv(&rows);
    match &a.out {
        Some(p) => write_atomic(p, |w| w.write_all(csv.as_bytes())).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
