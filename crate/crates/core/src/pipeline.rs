//! End-to-end answering of one question, and batches of them.
//!
//! For every question the internal arm and the external arm (retrieve, then
//! generate from the hits) are launched concurrently, each bounded by a
//! per-arm timeout. When both answer, the configured referee decides. The
//! degradation ladder is:
//!
//! | internal | external            | result                                    |
//! |----------|---------------------|-------------------------------------------|
//! | ok       | ok                  | referee verdict                           |
//! | ok       | no retrieval hits   | internal answer, `no_retrieval_hits`      |
//! | ok       | failed / timed out  | internal answer, `external_failed`        |
//! | failed   | ok                  | external answer, `internal_failed`        |
//! | failed   | failed or no hits   | [`PipelineError::BothArmsFailed`]         |
//!
//! A referee failure is always an error; the pipeline never picks an arm on
//! the referee's behalf.

use std::path::Path;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Generator;
use crate::corpus::Corpus;
use crate::io::{check_writable, write_jsonl_file};
use crate::par::Exec;
use crate::prompting::{build_external_prompt, build_internal_prompt, TemplateSet, DEFAULT_CHAR_BUDGET};
use crate::referee::{Arm, CandidateAnswer, RefereeConfig, RefereeVerdict};
use crate::retriever::{InvertedIndex, RetrievalHit};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RETRIEVAL_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("both arms failed (internal: {internal}; external: {external})")]
    BothArmsFailed { internal: String, external: String },
    #[error("referee failed: {0}")]
    Referee(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("run file line {line}: {message}")]
    RunFormat { line: usize, message: String },
}

#[derive(Clone)]
pub struct PipelineConfig {
    pub internal_backend: Arc<dyn Generator>,
    pub external_backend: Arc<dyn Generator>,
    pub referee: RefereeConfig,
    /// Number of documents handed to the external arm.
    pub retrieval_k: usize,
    pub templates: TemplateSet,
    pub per_arm_timeout: Duration,
    /// Character cap on the external arm's user prompt.
    pub char_budget: Option<usize>,
}

impl PipelineConfig {
    pub fn new(
        internal_backend: Arc<dyn Generator>,
        external_backend: Arc<dyn Generator>,
        referee: RefereeConfig,
    ) -> Self {
        Self {
            internal_backend,
            external_backend,
            referee,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            templates: TemplateSet::default(),
            per_arm_timeout: Duration::from_secs(120),
            char_budget: Some(DEFAULT_CHAR_BUDGET),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.retrieval_k == 0 {
            return Err(PipelineError::Config("retrieval_k must be >= 1".into()));
        }
        self.referee.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeReason {
    NoRetrievalHits,
    InternalFailed,
    ExternalFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degradation {
    pub reason: DegradeReason,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub internal_ms: f64,
    pub retrieval_ms: f64,
    pub external_ms: f64,
    pub referee_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Everything produced while answering one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuetAnswer {
    pub qid: String,
    pub question: String,
    /// Absent only when the internal arm failed.
    pub answer_internal: Option<CandidateAnswer>,
    pub answer_external: Option<CandidateAnswer>,
    pub retrieved: Vec<RetrievalHit>,
    pub verdict: RefereeVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<Degradation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl DuetAnswer {
    /// Drops wall-clock measurements so that identical runs serialize identically.
    pub fn strip_timings(&mut self) {
        self.timings = None;
        for c in [&mut self.answer_internal, &mut self.answer_external].into_iter().flatten() {
            if let Some(meta) = c.gen_meta.as_mut() {
                meta.latency = Duration::ZERO;
            }
        }
    }
}

/// The pipeline bound to one external collection.
#[derive(Clone)]
pub struct Duet {
    corpus: Arc<Corpus>,
    index: Arc<InvertedIndex>,
    cfg: Arc<PipelineConfig>,
}

enum ExternalOutcome {
    NoHits,
    Answered {
        hits: Vec<RetrievalHit>,
        answer: CandidateAnswer,
        retrieval: Duration,
        generation: Duration,
    },
    Failed {
        hits: usize,
        error: String,
    },
}

fn spawn<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> mpsc::Receiver<T> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        // the receiver may have given up after a timeout
        let _ = tx.send(f());
    });
    rx
}

fn wait<T>(rx: &mpsc::Receiver<T>, deadline: Instant, timeout: Duration) -> Result<T, String> {
    match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
        Ok(v) => Ok(v),
        Err(mpsc::RecvTimeoutError::Timeout) => Err(format!("timed out after {timeout:?}")),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err("arm panicked".into()),
    }
}

impl Duet {
    pub fn new(corpus: Arc<Corpus>, index: Arc<InvertedIndex>, cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if let Some(missing) = index.doc_ids().iter().find(|id| !corpus.contains(id)) {
            return Err(PipelineError::Config(format!(
                "index references document {missing:?} that is not in the corpus"
            )));
        }
        Ok(Self {
            corpus,
            index,
            cfg: Arc::new(cfg),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn internal_arm(cfg: &PipelineConfig, question: &str) -> Result<(CandidateAnswer, Duration), String> {
        let started = Instant::now();
        let req = build_internal_prompt(question, &cfg.templates.internal).map_err(|e| e.to_string())?;
        let result = cfg.internal_backend.generate(&req).map_err(|e| e.to_string())?;
        let answer = CandidateAnswer::from_generation(result, Arm::Internal).map_err(|e| e.to_string())?;
        Ok((answer, started.elapsed()))
    }

    fn external_arm(&self, question: &str) -> ExternalOutcome {
        let started = Instant::now();
        let hits = match self.index.search(question, self.cfg.retrieval_k) {
            Ok(h) if h.is_empty() => return ExternalOutcome::NoHits,
            Ok(h) => h,
            Err(e) => return ExternalOutcome::Failed { hits: 0, error: e.to_string() },
        };
        let retrieval = started.elapsed();
        let docs: Vec<_> = hits.iter().filter_map(|h| self.corpus.get(&h.doc_id)).collect();
        let generated = build_external_prompt(question, &docs, &self.cfg.templates.external, self.cfg.char_budget)
            .map_err(|e| e.to_string())
            .and_then(|req| self.cfg.external_backend.generate(&req).map_err(|e| e.to_string()))
            .and_then(|r| CandidateAnswer::from_generation(r, Arm::External).map_err(|e| e.to_string()));
        match generated {
            Ok(answer) => ExternalOutcome::Answered {
                hits,
                answer,
                retrieval,
                generation: started.elapsed() - retrieval,
            },
            Err(error) => ExternalOutcome::Failed { hits: hits.len(), error },
        }
    }

    /// Answers one question.
    pub fn answer(&self, qid: &str, question: &str) -> Result<DuetAnswer, PipelineError> {
        let started = Instant::now();
        let timeout = self.cfg.per_arm_timeout;
        let deadline = started + timeout;

        let internal_rx = {
            let cfg = Arc::clone(&self.cfg);
            let q = question.to_owned();
            spawn(move || Self::internal_arm(&cfg, &q))
        };
        let external_rx = {
            let this = self.clone();
            let q = question.to_owned();
            spawn(move || this.external_arm(&q))
        };
        let internal = wait(&internal_rx, deadline, timeout).and_then(|r| r);
        let external = wait(&external_rx, deadline, timeout)
            .unwrap_or_else(|error| ExternalOutcome::Failed { hits: 0, error });

        let mut timings = StageTimings::default();
        if let Ok((_, d)) = &internal {
            timings.internal_ms = ms(*d);
        }

        let (answer_internal, answer_external, retrieved, verdict, degraded) = match (internal, external) {
            (Ok((a_i, _)), ExternalOutcome::Answered { hits, answer: a_e, retrieval, generation }) => {
                timings.retrieval_ms = ms(retrieval);
                timings.external_ms = ms(generation);
                let referee_started = Instant::now();
                let verdict = self
                    .cfg
                    .referee
                    .decide(question, &a_i, &a_e)
                    .map_err(|e| PipelineError::Referee(e.to_string()))?;
                timings.referee_ms = ms(referee_started.elapsed());
                (Some(a_i), Some(a_e), hits, verdict, None)
            }
            (Ok((a_i, _)), ExternalOutcome::NoHits) => {
                let verdict = RefereeVerdict::fallback(&a_i);
                let why = Degradation {
                    reason: DegradeReason::NoRetrievalHits,
                    detail: "no document shares a term with the question".into(),
                };
                (Some(a_i), None, Vec::new(), verdict, Some(why))
            }
            (Ok((a_i, _)), ExternalOutcome::Failed { hits, error }) => {
                log::warn!("{qid}: external arm failed: {error}");
                let verdict = RefereeVerdict::fallback(&a_i);
                let why = Degradation {
                    reason: DegradeReason::ExternalFailed,
                    detail: format!("{error} ({hits} documents retrieved)"),
                };
                (Some(a_i), None, Vec::new(), verdict, Some(why))
            }
            (Err(internal_err), ExternalOutcome::Answered { hits, answer: a_e, retrieval, generation }) => {
                log::warn!("{qid}: internal arm failed: {internal_err}");
                timings.retrieval_ms = ms(retrieval);
                timings.external_ms = ms(generation);
                let verdict = RefereeVerdict::fallback(&a_e);
                let why = Degradation {
                    reason: DegradeReason::InternalFailed,
                    detail: internal_err,
                };
                (None, Some(a_e), hits, verdict, Some(why))
            }
            (Err(internal), ExternalOutcome::NoHits) => {
                return Err(PipelineError::BothArmsFailed {
                    internal,
                    external: "no retrieval hits".into(),
                })
            }
            (Err(internal), ExternalOutcome::Failed { error, .. }) => {
                return Err(PipelineError::BothArmsFailed {
                    internal,
                    external: error,
                })
            }
        };
        timings.total_ms = ms(started.elapsed());

        Ok(DuetAnswer {
            qid: qid.to_owned(),
            question: question.to_owned(),
            answer_internal,
            answer_external,
            retrieved,
            verdict,
            degraded,
            timings: Some(timings),
        })
    }
}

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: RunBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunBody {
    Answer(Box<DuetAnswer>),
    Error { qid: String, error: String },
}

impl RunRecord {
    pub fn qid(&self) -> &str {
        match &self.body {
            RunBody::Answer(a) => &a.qid,
            RunBody::Error { qid, .. } => qid,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.body, RunBody::Error { .. })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions {
    pub exec: Exec,
    /// Keep wall-clock timings in the run file (makes runs non-reproducible).
    pub record_timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSummary {
    pub rows: usize,
    pub errors: usize,
}

/// Answers every `(qid, question)` with at most `workers` pipelines in flight
/// and writes the run file in input order. Failed questions become error rows.
pub fn answer_batch(
    duet: &Duet,
    questions: &[(String, String)],
    workers: usize,
    out_path: &Path,
    opts: BatchOptions,
) -> Result<BatchSummary, PipelineError> {
    if workers == 0 {
        return Err(PipelineError::Config("workers must be >= 1".into()));
    }
    let io_err = |e: std::io::Error| PipelineError::Io {
        path: out_path.display().to_string(),
        message: e.to_string(),
    };
    check_writable(out_path).map_err(io_err)?;

    let records = run_questions(duet, questions, workers, opts);
    write_jsonl_file(out_path, &records).map_err(io_err)?;
    Ok(BatchSummary {
        rows: records.len(),
        errors: records.iter().filter(|r| r.is_error()).count(),
    })
}

/// The in-memory part of [`answer_batch`].
pub fn run_questions(duet: &Duet, questions: &[(String, String)], workers: usize, opts: BatchOptions) -> Vec<RunRecord> {
    opts.exec.map_bounded(questions, workers.max(1), |(qid, question)| {
        let body = match duet.answer(qid, question) {
            Ok(mut a) => {
                if !opts.record_timings {
                    a.strip_timings();
                }
                RunBody::Answer(Box::new(a))
            }
            Err(e) => {
                log::warn!("{qid}: {e}");
                RunBody::Error {
                    qid: qid.clone(),
                    error: e.to_string(),
                }
            }
        };
        RunRecord {
            format_version: RUN_FORMAT_VERSION,
            body,
        }
    })
}

pub fn read_run(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let raw = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_run(&raw)
}

pub fn parse_run(raw: &str) -> Result<Vec<RunRecord>, PipelineError> {
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(line).map_err(|e| PipelineError::RunFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.format_version != RUN_FORMAT_VERSION {
            return Err(PipelineError::RunFormat {
                line: i + 1,
                message: format!("unsupported format_version {}", rec.format_version),
            });
        }
        rows.push(rec);
    }
    Ok(rows)
}
