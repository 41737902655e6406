//! The referee: turns the internal answer `a_i` and the external answer `a_e`
//! into the final answer.
//!
//! The two classification strategies score each candidate against the
//! question and apply a margin rule biased towards the external answer:
//! the internal answer wins only if `s_i − s_e > delta`. Ties and near-ties go
//! to the document-supported answer. The summarize strategy hands both
//! candidates to a judge model instead.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, EmbeddingVector, GenerationResult, Generator};
use crate::prompting::{build_judge_prompt, PromptError, PromptTemplate, TemplateSet};
use crate::retriever::{tokenize, IndexParams};

pub const DEFAULT_DELTA: f64 = 0.05;

/// Answers longer than this many tokens are discounted by the length prior.
const LENGTH_PRIOR_TOKENS: f64 = 16.0;

#[derive(Debug, Error)]
pub enum RefereeError {
    #[error("embedding vectors differ in dimension ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("cannot take the cosine of a zero vector")]
    ZeroVector,
    #[error("candidate answer is empty")]
    EmptyCandidate,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("referee misconfigured: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("judge prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("judge returned an empty completion")]
    JudgeEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub text: String,
    pub arm: Arm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_meta: Option<GenerationResult>,
}

impl CandidateAnswer {
    pub fn new(text: impl Into<String>, arm: Arm) -> Result<Self, RefereeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RefereeError::EmptyCandidate);
        }
        Ok(Self {
            text,
            arm,
            gen_meta: None,
        })
    }

    /// Wraps a generation, trimming surrounding whitespace from the completion.
    pub fn from_generation(result: GenerationResult, arm: Arm) -> Result<Self, RefereeError> {
        let mut c = Self::new(result.text.trim(), arm)?;
        c.gen_meta = Some(result);
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Alignment,
    TextFeature,
    Summarize,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alignment" => Ok(Strategy::Alignment),
            "text_feature" | "text-feature" => Ok(Strategy::TextFeature),
            "summarize" => Ok(Strategy::Summarize),
            other => Err(format!("unknown strategy {other:?} (alignment, text_feature, summarize)")),
        }
    }
}

/// What produced a verdict: one of the strategies, or the pipeline's fallback
/// when only one arm produced an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Alignment,
    TextFeature,
    Summarize,
    Fallback,
}

impl From<Strategy> for VerdictSource {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Alignment => VerdictSource::Alignment,
            Strategy::TextFeature => VerdictSource::TextFeature,
            Strategy::Summarize => VerdictSource::Summarize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenArm {
    Internal,
    External,
    Synthesized,
}

impl From<Arm> for ChosenArm {
    fn from(a: Arm) -> Self {
        match a {
            Arm::Internal => ChosenArm::Internal,
            Arm::External => ChosenArm::External,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefereeVerdict {
    pub final_answer: String,
    pub chosen_arm: ChosenArm,
    pub score_internal: Option<f64>,
    pub score_external: Option<f64>,
    pub strategy: VerdictSource,
}

impl RefereeVerdict {
    /// Verdict for a question where only `candidate`'s arm answered.
    pub fn fallback(candidate: &CandidateAnswer) -> Self {
        Self {
            final_answer: candidate.text.clone(),
            chosen_arm: candidate.arm.into(),
            score_internal: None,
            score_external: None,
            strategy: VerdictSource::Fallback,
        }
    }
}

#[derive(Clone)]
pub struct RefereeConfig {
    pub strategy: Strategy,
    /// External-preference margin, `>= 0`.
    pub delta: f64,
    pub judge_backend: Option<Arc<dyn Generator>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub judge_template: PromptTemplate,
}

impl std::fmt::Debug for RefereeConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RefereeConfig")
            .field("strategy", &self.strategy)
            .field("delta", &self.delta)
            .field("judge_backend", &self.judge_backend.as_ref().map(|j| j.model_name().to_owned()))
            .field("embedder", &self.embedder.is_some())
            .finish()
    }
}

impl RefereeConfig {
    pub fn alignment(embedder: Arc<dyn Embedder>, delta: f64) -> Self {
        Self {
            strategy: Strategy::Alignment,
            delta,
            judge_backend: None,
            embedder: Some(embedder),
            judge_template: TemplateSet::default().judge,
        }
    }

    pub fn text_feature(delta: f64) -> Self {
        Self {
            strategy: Strategy::TextFeature,
            delta,
            judge_backend: None,
            embedder: None,
            judge_template: TemplateSet::default().judge,
        }
    }

    pub fn summarize(judge: Arc<dyn Generator>) -> Self {
        Self {
            strategy: Strategy::Summarize,
            delta: DEFAULT_DELTA,
            judge_backend: Some(judge),
            embedder: None,
            judge_template: TemplateSet::default().judge,
        }
    }

    pub fn with_judge_template(mut self, template: PromptTemplate) -> Self {
        self.judge_template = template;
        self
    }

    pub fn validate(&self) -> Result<(), RefereeError> {
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(RefereeError::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        match self.strategy {
            Strategy::Alignment if self.embedder.is_none() => {
                Err(RefereeError::Config("alignment strategy needs an embedder".into()))
            }
            Strategy::Summarize if self.judge_backend.is_none() => {
                Err(RefereeError::Config("summarize strategy needs a judge backend".into()))
            }
            _ => Ok(()),
        }
    }

    /// Dispatches to the configured strategy.
    pub fn decide(
        &self,
        question: &str,
        a_i: &CandidateAnswer,
        a_e: &CandidateAnswer,
    ) -> Result<RefereeVerdict, RefereeError> {
        self.validate()?;
        match self.strategy {
            Strategy::Alignment => alignment_select(question, a_i, a_e, self),
            Strategy::TextFeature => text_feature_select(question, a_i, a_e, self),
            Strategy::Summarize => summarize_select(question, a_i, a_e, self),
        }
    }
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RefereeError> {
    if u.dim() != v.dim() {
        return Err(RefereeError::DimMismatch(u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(RefereeError::ZeroVector);
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// The margin rule: internal only when it beats external by more than `delta`.
pub fn margin_choice(score_internal: f64, score_external: f64, delta: f64) -> Arm {
    if score_internal - score_external > delta {
        Arm::Internal
    } else {
        Arm::External
    }
}

fn check_inputs(question: &str, a_i: &CandidateAnswer, a_e: &CandidateAnswer) -> Result<(), RefereeError> {
    if question.trim().is_empty() {
        return Err(RefereeError::EmptyQuestion);
    }
    if a_i.text.trim().is_empty() || a_e.text.trim().is_empty() {
        return Err(RefereeError::EmptyCandidate);
    }
    Ok(())
}

fn scored_verdict(
    a_i: &CandidateAnswer,
    a_e: &CandidateAnswer,
    s_i: f64,
    s_e: f64,
    delta: f64,
    strategy: Strategy,
) -> RefereeVerdict {
    let arm = margin_choice(s_i, s_e, delta);
    let chosen = if arm == Arm::Internal { a_i } else { a_e };
    RefereeVerdict {
        final_answer: chosen.text.clone(),
        chosen_arm: arm.into(),
        score_internal: Some(s_i),
        score_external: Some(s_e),
        strategy: strategy.into(),
    }
}

/// Scores each candidate by cosine(embed(q), embed(answer)).
pub fn alignment_select(
    question: &str,
    a_i: &CandidateAnswer,
    a_e: &CandidateAnswer,
    cfg: &RefereeConfig,
) -> Result<RefereeVerdict, RefereeError> {
    check_inputs(question, a_i, a_e)?;
    let embedder = cfg
        .embedder
        .as_ref()
        .ok_or_else(|| RefereeError::Config("alignment strategy needs an embedder".into()))?;
    let q = embedder.embed(question)?;
    let s_i = cosine(&q, &embedder.embed(&a_i.text)?)?;
    let s_e = cosine(&q, &embedder.embed(&a_e.text)?)?;
    Ok(scored_verdict(a_i, a_e, s_i, s_e, cfg.delta, Strategy::Alignment))
}

/// Lexical score in `[0, 1]`: the mean of
/// * the fraction of answer tokens that also occur in the question, and
/// * a length prior `exp(−max(0, n − 16) / 16)` over the answer's token count `n`.
pub fn text_feature_score(question: &str, answer: &str) -> Result<f64, RefereeError> {
    if question.trim().is_empty() {
        return Err(RefereeError::EmptyQuestion);
    }
    if answer.trim().is_empty() {
        return Err(RefereeError::EmptyCandidate);
    }
    let params = IndexParams::default();
    let q: HashSet<String> = tokenize(question, &params).into_iter().collect();
    let a = tokenize(answer, &params);
    let n = a.len() as f64;
    let overlap = if a.is_empty() {
        0.0
    } else {
        a.iter().filter(|t| q.contains(*t)).count() as f64 / n
    };
    let prior = (-(n - LENGTH_PRIOR_TOKENS).max(0.0) / LENGTH_PRIOR_TOKENS).exp();
    Ok(0.5 * overlap + 0.5 * prior)
}

pub fn text_feature_select(
    question: &str,
    a_i: &CandidateAnswer,
    a_e: &CandidateAnswer,
    cfg: &RefereeConfig,
) -> Result<RefereeVerdict, RefereeError> {
    check_inputs(question, a_i, a_e)?;
    let s_i = text_feature_score(question, &a_i.text)?;
    let s_e = text_feature_score(question, &a_e.text)?;
    Ok(scored_verdict(a_i, a_e, s_i, s_e, cfg.delta, Strategy::TextFeature))
}

/// Asks the judge model for a final answer and keeps its first non-empty line.
pub fn summarize_select(
    question: &str,
    a_i: &CandidateAnswer,
    a_e: &CandidateAnswer,
    cfg: &RefereeConfig,
) -> Result<RefereeVerdict, RefereeError> {
    check_inputs(question, a_i, a_e)?;
    let judge = cfg
        .judge_backend
        .as_ref()
        .ok_or_else(|| RefereeError::Config("summarize strategy needs a judge backend".into()))?;
    let request = build_judge_prompt(question, a_i, a_e, &cfg.judge_template)?;
    let completion = judge.generate(&request)?;
    let first_line = completion
        .text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or(RefereeError::JudgeEmpty)?;
    Ok(RefereeVerdict {
        final_answer: first_line.to_owned(),
        chosen_arm: ChosenArm::Synthesized,
        score_internal: None,
        score_external: None,
        strategy: VerdictSource::Summarize,
    })
}
