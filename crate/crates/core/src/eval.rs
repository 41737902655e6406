//! Scoring and the referee-gain simulator.
//!
//! Run files are scored with HotpotQA-style exact match and token F1 for each
//! arm and for the final answer. The simulator estimates what a referee of a
//! given quality gains over the external arm alone, without any model calls.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, Generator};
use crate::corpus::QAExample;
use crate::par::Exec;
use crate::pipeline::{read_run, PipelineError, RunBody, RunRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("run row {line}: qid {qid:?} is not in the gold set")]
    UnknownQid { line: usize, qid: String },
    #[error("gold example {0:?} has no answer")]
    UnlabeledGold(String),
    #[error(transparent)]
    Run(#[from] PipelineError),
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("grader: {0}")]
    Grader(#[from] BackendError),
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Harmonic mean of token precision and recall over normalized token multisets.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportArm {
    Internal,
    External,
    Duet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    /// Rows this arm was scored over.
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub per_arm: BTreeMap<ReportArm, ArmScore>,
    /// `em(duet) − em(external arm)`.
    pub referee_gain_vs_external: f64,
    pub error_rows: usize,
    pub degraded_rows: usize,
    /// Verdict sources seen in the run, with row counts.
    pub verdict_sources: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    em: f64,
    f1: f64,
}

impl Tally {
    fn score(&self) -> ArmScore {
        if self.n == 0 {
            return ArmScore::default();
        }
        ArmScore {
            n: self.n,
            em: self.em / self.n as f64,
            f1: self.f1 / self.n as f64,
        }
    }
}

/// Scores a run file against gold answers.
pub fn evaluate_run(run_path: &Path, gold: &[QAExample]) -> Result<MetricReport, EvalError> {
    evaluate_records(&read_run(run_path)?, gold, Exec::default())
}

pub fn evaluate_records(rows: &[RunRecord], gold: &[QAExample], exec: Exec) -> Result<MetricReport, EvalError> {
    let gold_by_qid: HashMap<&str, &QAExample> = gold.iter().map(|g| (g.qid.as_str(), g)).collect();
    let mut answers = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let ex = gold_by_qid.get(row.qid()).ok_or_else(|| EvalError::UnknownQid {
            line: i + 1,
            qid: row.qid().to_owned(),
        })?;
        let answer = ex.answer.as_deref().ok_or_else(|| EvalError::UnlabeledGold(ex.qid.clone()))?;
        answers.push(answer);
    }

    struct RowScore {
        duet: (f64, f64),
        internal: Option<(f64, f64)>,
        external: Option<(f64, f64)>,
    }
    let pairs: Vec<(&RunRecord, &str)> = rows.iter().zip(answers).collect();
    let scored = exec.map(&pairs, |(row, gold)| {
        let s = |pred: &str| (exact_match(pred, gold) as u8 as f64, token_f1(pred, gold));
        match &row.body {
            RunBody::Error { .. } => RowScore {
                duet: (0.0, 0.0),
                internal: None,
                external: None,
            },
            RunBody::Answer(a) => RowScore {
                duet: s(&a.verdict.final_answer),
                internal: a.answer_internal.as_ref().map(|c| s(&c.text)),
                external: a.answer_external.as_ref().map(|c| s(&c.text)),
            },
        }
    });

    let mut duet = Tally::default();
    let mut internal = Tally::default();
    let mut external = Tally::default();
    for r in &scored {
        for (tally, score) in [(&mut duet, Some(r.duet)), (&mut internal, r.internal), (&mut external, r.external)] {
            if let Some((em, f1)) = score {
                tally.n += 1;
                tally.em += em;
                tally.f1 += f1;
            }
        }
    }

    let mut error_rows = 0;
    let mut degraded_rows = 0;
    let mut verdict_sources = BTreeMap::new();
    for row in rows {
        match &row.body {
            RunBody::Error { .. } => error_rows += 1,
            RunBody::Answer(a) => {
                degraded_rows += a.degraded.is_some() as usize;
                let key = serde_json::to_value(a.verdict.strategy)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                *verdict_sources.entry(key).or_insert(0) += 1;
            }
        }
    }

    let n = rows.len();
    let duet = duet.score();
    let internal = internal.score();
    let external = external.score();
    let mut notes = Vec::new();
    if error_rows > 0 {
        notes.push(format!("{error_rows} error row(s) counted as incorrect"));
    }
    for (label, arm) in [("internal", internal), ("external", external)] {
        if arm.n < n {
            notes.push(format!("{label} arm scored over {} of {n} rows", arm.n));
        }
    }

    let mut per_arm = BTreeMap::new();
    per_arm.insert(ReportArm::Internal, internal);
    per_arm.insert(ReportArm::External, external);
    per_arm.insert(ReportArm::Duet, duet);
    Ok(MetricReport {
        n,
        em: duet.em,
        f1: duet.f1,
        referee_gain_vs_external: duet.em - external.em,
        per_arm,
        error_rows,
        degraded_rows,
        verdict_sources,
        notes,
    })
}

const ROW_LABELS: [(ReportArm, &str); 3] = [
    (ReportArm::Internal, "Internal arm"),
    (ReportArm::External, "External arm"),
    (ReportArm::Duet, "Final answer"),
];

/// Overall table: one row per arm plus the final answer.
pub fn render_report(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:>6} {:>7} {:>7}", "System", "N", "EM", "F1");
    for (arm, label) in ROW_LABELS {
        let s = report.per_arm.get(&arm).copied().unwrap_or_default();
        let _ = writeln!(out, "{:<22} {:>6} {:>7.1} {:>7.1}", label, s.n, 100.0 * s.em, 100.0 * s.f1);
    }
    let _ = writeln!(out, "Referee gain vs external arm: {:+.1} EM points", 100.0 * report.referee_gain_vs_external);
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}

/// Side-by-side comparison of referee strategies, one column per run.
pub fn render_strategy_table(runs: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<26}", "");
    for (label, _) in runs {
        let _ = write!(out, " {label:>14}");
    }
    out.push('\n');
    let _ = write!(out, "{:<26}", "Final-answer EM");
    for (_, r) in runs {
        let _ = write!(out, " {:>14.1}", 100.0 * r.em);
    }
    out.push('\n');
    let _ = write!(out, "{:<26}", "Gain vs external arm");
    for (_, r) in runs {
        let _ = write!(out, " {:>+14.1}", 100.0 * r.referee_gain_vs_external);
    }
    out.push('\n');
    out
}

/// Optional model-based grading; never used by the deterministic metrics.
pub struct LlmGrader {
    backend: Arc<dyn Generator>,
}

impl LlmGrader {
    pub fn new(backend: Arc<dyn Generator>) -> Self {
        Self { backend }
    }

    pub fn grade(&self, question: &str, prediction: &str, gold: &str) -> Result<bool, EvalError> {
        let user = format!(
            "Question: {question}\nReference answer: {gold}\nPredicted answer: {prediction}\n\
             Is the predicted answer correct? Reply with yes or no."
        );
        let req = GenerationRequest::new("You grade answers to questions.", user);
        let reply = self.backend.generate(&req)?;
        Ok(reply.text.trim_start().to_lowercase().starts_with("yes"))
    }

    /// Fraction of rows whose final answer the grader accepts.
    pub fn accuracy(&self, rows: &[RunRecord], gold: &[QAExample]) -> Result<f64, EvalError> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let gold_by_qid: HashMap<&str, &QAExample> = gold.iter().map(|g| (g.qid.as_str(), g)).collect();
        let mut correct = 0usize;
        for (i, row) in rows.iter().enumerate() {
            let ex = gold_by_qid.get(row.qid()).ok_or_else(|| EvalError::UnknownQid {
                line: i + 1,
                qid: row.qid().to_owned(),
            })?;
            let gold_answer = ex.answer.as_deref().ok_or_else(|| EvalError::UnlabeledGold(ex.qid.clone()))?;
            if let RunBody::Answer(a) = &row.body {
                correct += self.grade(&ex.question, &a.verdict.final_answer, gold_answer)? as usize;
            }
        }
        Ok(correct as f64 / rows.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Referee-gain simulator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Internal arm accuracy.
    pub p_i: f64,
    /// External arm accuracy.
    pub p_e: f64,
    /// Pearson correlation of the two arms' correctness indicators.
    pub correlation: f64,
    /// Probability the referee ranks the correct arm first when exactly one arm is correct.
    pub judge_quality: f64,
    pub delta_sweep: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            p_i: 0.231,
            p_e: 0.327,
            correlation: 0.0,
            judge_quality: 1.0,
            delta_sweep: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            trials: 100_000,
            seed: 0,
        }
    }
}

/// Joint distribution of (internal correct, external correct).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTable {
    pub both: f64,
    pub internal_only: f64,
    pub external_only: f64,
    pub neither: f64,
}

const PROB_EPS: f64 = 1e-12;

impl SimParams {
    pub fn joint(&self) -> Result<JointTable, EvalError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EvalError::InvalidParams(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("p_i", self.p_i)?;
        unit("p_e", self.p_e)?;
        unit("judge_quality", self.judge_quality)?;
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(EvalError::InvalidParams(format!(
                "correlation must lie in [-1, 1], got {}",
                self.correlation
            )));
        }
        if self.trials == 0 {
            return Err(EvalError::InvalidParams("trials must be >= 1".into()));
        }
        if self.delta_sweep.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(EvalError::InvalidParams("every delta must be >= 0".into()));
        }
        let (pi, pe) = (self.p_i, self.p_e);
        let both = pi * pe + self.correlation * (pi * (1.0 - pi) * pe * (1.0 - pe)).sqrt();
        let t = JointTable {
            both,
            internal_only: pi - both,
            external_only: pe - both,
            neither: 1.0 - pi - pe + both,
        };
        for (name, v) in [
            ("both", t.both),
            ("internal_only", t.internal_only),
            ("external_only", t.external_only),
            ("neither", t.neither),
        ] {
            if !(-PROB_EPS..=1.0 + PROB_EPS).contains(&v) {
                return Err(EvalError::InvalidParams(format!(
                    "correlation {} is infeasible for p_i={pi}, p_e={pe}: P({name}) = {v}",
                    self.correlation
                )));
            }
        }
        Ok(JointTable {
            both: t.both.clamp(0.0, 1.0),
            internal_only: t.internal_only.clamp(0.0, 1.0),
            external_only: t.external_only.clamp(0.0, 1.0),
            neither: t.neither.clamp(0.0, 1.0),
        })
    }

    /// `1 − (1 − p_i)(1 − p_e)`: the best a selector can do over independent arms.
    pub fn union_bound(&self) -> f64 {
        1.0 - (1.0 - self.p_i) * (1.0 - self.p_e)
    }

    /// Mean of the score margin (correct minus wrong arm) under which the
    /// correct arm wins with probability `judge_quality` at `delta = 0`.
    fn margin_mean(&self) -> f64 {
        if self.judge_quality >= 1.0 {
            f64::INFINITY
        } else if self.judge_quality <= 0.0 {
            f64::NEG_INFINITY
        } else {
            Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(self.judge_quality)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub delta: f64,
    pub accuracy: f64,
    /// Monte-Carlo standard error of `accuracy`.
    pub std_error: f64,
    /// `accuracy − p_e`.
    pub gain: f64,
    pub union_bound: f64,
}

pub const SIM_SHARD_TRIALS: u64 = 16_384;

/// Monte-Carlo estimate of the final-answer accuracy for each delta.
///
/// Each trial draws which arms are correct from the joint table. When exactly
/// one arm is correct the referee sees a score margin `D ~ N(μ, 1)` in favour
/// of the correct arm, with `μ = Φ⁻¹(judge_quality)`, and applies the margin
/// rule: internal iff `s_i − s_e > delta`. All deltas share the same draws.
pub fn simulate_referee(params: &SimParams) -> Result<Vec<SimRow>, EvalError> {
    simulate_referee_with(params, Exec::default())
}

pub fn simulate_referee_with(params: &SimParams, exec: Exec) -> Result<Vec<SimRow>, EvalError> {
    let table = params.joint()?;
    let mu = params.margin_mean();
    let deltas = &params.delta_sweep;
    let shards = params.trials.div_ceil(SIM_SHARD_TRIALS);

    let counts = exec.map_range(shards as usize, |shard| {
        let shard = shard as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(shard);
        let n = SIM_SHARD_TRIALS.min(params.trials - shard * SIM_SHARD_TRIALS);
        let mut correct = vec![0u64; deltas.len()];
        let cut_both = table.both;
        let cut_internal = cut_both + table.internal_only;
        let cut_external = cut_internal + table.external_only;
        for _ in 0..n {
            let u: f64 = rng.gen();
            if u < cut_both {
                correct.iter_mut().for_each(|c| *c += 1);
            } else if u < cut_external {
                let internal_right = u < cut_internal;
                let z: f64 = rng.sample(StandardNormal);
                let margin = mu + z;
                for (c, &delta) in correct.iter_mut().zip(deltas) {
                    // margin = s_correct − s_wrong
                    let picks_internal = if internal_right { margin > delta } else { -margin > delta };
                    *c += (picks_internal == internal_right) as u64;
                }
            }
        }
        correct
    });

    let mut totals = vec![0u64; deltas.len()];
    for shard in counts {
        for (t, c) in totals.iter_mut().zip(shard) {
            *t += c;
        }
    }
    let trials = params.trials as f64;
    Ok(deltas
        .iter()
        .zip(totals)
        .map(|(&delta, hits)| {
            let accuracy = hits as f64 / trials;
            SimRow {
                delta,
                accuracy,
                std_error: (accuracy * (1.0 - accuracy) / trials).sqrt(),
                gain: accuracy - params.p_e,
                union_bound: params.union_bound(),
            }
        })
        .collect())
}

/// CSV with header `delta,accuracy,gain,union_bound`.
pub fn sim_csv(rows: &[SimRow]) -> String {
    let mut out = String::from("delta,accuracy,gain,union_bound\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.delta, r.accuracy, r.gain, r.union_bound);
    }
    out
}
