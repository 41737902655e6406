//! Training data for the three roles, emitted as strict JSONL:
//!
//! * `internal_sft`: question-only prompt → gold answer;
//! * `external_sft`: gold documents mixed with sampled noise documents →
//!   gold answer;
//! * `judge_pair`: `(question, answer)` pairs labeled positive (gold) or
//!   negative (another example's gold answer), for alignment training.
//!
//! Every builder takes an explicit seed and emits records in input order.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, QAExample};
use crate::eval::normalize_answer;
use crate::io::write_jsonl_file;
use crate::prompting::{build_external_prompt, build_internal_prompt, PromptError, PromptTemplate};

pub const DEFAULT_NOISE_PER_EXAMPLE: usize = 3;
pub const DEFAULT_NEGATIVES_PER_EXAMPLE: usize = 3;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("example {qid}: {message}")]
    Row { qid: String, message: String },
    #[error("need at least 2 distinct answers to sample negatives, found {0}")]
    TooFewAnswers(usize),
    #[error("negatives_per_example must be >= 1")]
    NoNegatives,
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    InternalSft,
    ExternalSft,
    JudgePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub kind: RecordKind,
    pub prompt: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PairLabel>,
    pub qid: String,
    pub doc_ids: Vec<String>,
}

fn gold_answer(ex: &QAExample) -> Result<&str, FinetuneError> {
    match ex.answer.as_deref() {
        Some(a) if !a.trim().is_empty() => Ok(a),
        _ => Err(FinetuneError::Row {
            qid: ex.qid.clone(),
            message: "example has no gold answer".into(),
        }),
    }
}

pub fn build_internal_sft(examples: &[QAExample], template: &PromptTemplate) -> Result<Vec<FinetuneRecord>, FinetuneError> {
    examples
        .iter()
        .map(|ex| {
            let answer = gold_answer(ex)?;
            let prompt = build_internal_prompt(&ex.question, template)?.flat_prompt();
            Ok(FinetuneRecord {
                kind: RecordKind::InternalSft,
                prompt,
                completion: answer.to_owned(),
                label: None,
                qid: ex.qid.clone(),
                doc_ids: Vec::new(),
            })
        })
        .collect()
}

/// Samples `count` distinct items from `pool` that `reject` does not exclude.
/// `available` is the exact number of admissible items in `pool`.
fn sample_distinct<'a, T, R: Rng>(
    rng: &mut R,
    pool: &'a [T],
    count: usize,
    available: usize,
    reject: impl Fn(&T) -> bool,
) -> Vec<&'a T> {
    if count == 0 {
        return Vec::new();
    }
    // Rejection sampling is fast while most of the pool is admissible.
    if available >= 2 * count && pool.len() <= 4 * available {
        let mut picked = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        while picked.len() < count {
            let i = rng.gen_range(0..pool.len());
            if !reject(&pool[i]) && seen.insert(i) {
                picked.push(&pool[i]);
            }
        }
        return picked;
    }
    let admissible: Vec<&T> = pool.iter().filter(|d| !reject(d)).collect();
    admissible.choose_multiple(rng, count).copied().collect()
}

/// External-arm training data: every gold document plus `noise_per_example`
/// noise documents, shuffled. Noise comes from the example's own distractors
/// first, then from the rest of the corpus.
pub fn build_external_sft(
    examples: &[QAExample],
    corpus: &Corpus,
    noise_per_example: usize,
    seed: u64,
    template: &PromptTemplate,
) -> Result<Vec<FinetuneRecord>, FinetuneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_ids: Vec<String> = corpus.doc_ids().cloned().collect();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let row_err = |message: String| FinetuneError::Row {
            qid: ex.qid.clone(),
            message,
        };
        let answer = gold_answer(ex)?;
        if let Some(missing) = ex.gold_doc_ids.iter().chain(&ex.noise_doc_ids).find(|id| !corpus.contains(id)) {
            return Err(row_err(format!("document {missing:?} is not in the corpus")));
        }
        if ex.gold_doc_ids.is_empty() {
            return Err(row_err("example has no gold documents".into()));
        }

        let own: Vec<String> = ex.noise_doc_ids.iter().cloned().collect();
        let from_own = noise_per_example.min(own.len());
        let mut noise: Vec<String> = own.choose_multiple(&mut rng, from_own).cloned().collect();

        let still_needed = noise_per_example - from_own;
        if still_needed > 0 {
            let taken: HashSet<&str> = ex.gold_doc_ids.iter().chain(&noise).map(String::as_str).collect();
            let available = all_ids.len() - taken.len();
            if available < still_needed {
                return Err(row_err(format!(
                    "needs {noise_per_example} noise documents but only {} exist (short by {})",
                    from_own + available,
                    still_needed - available
                )));
            }
            let extra: Vec<String> = sample_distinct(&mut rng, &all_ids, still_needed, available, |id| taken.contains(id.as_str()))
                .into_iter()
                .cloned()
                .collect();
            noise.extend(extra);
        }

        let mut ids: Vec<String> = ex.gold_doc_ids.iter().cloned().chain(noise).collect();
        ids.shuffle(&mut rng);
        let docs: Vec<&Document> = ids.iter().map(|id| corpus.get(id).expect("checked above")).collect();
        let prompt = build_external_prompt(&ex.question, &docs, template, None)?.flat_prompt();
        out.push(FinetuneRecord {
            kind: RecordKind::ExternalSft,
            prompt,
            completion: answer.to_owned(),
            label: None,
            qid: ex.qid.clone(),
            doc_ids: ids,
        });
    }
    Ok(out)
}

/// One positive and `negatives_per_example` negative `(question, answer)`
/// pairs per example. Negatives are other examples' gold answers that differ
/// from this example's gold answer after normalization.
pub fn build_judge_pairs(
    examples: &[QAExample],
    negatives_per_example: usize,
    seed: u64,
) -> Result<Vec<FinetuneRecord>, FinetuneError> {
    if negatives_per_example == 0 {
        return Err(FinetuneError::NoNegatives);
    }
    // Distinct answers by normalized form, first spelling wins.
    let mut keys: Vec<String> = Vec::new();
    let mut spellings: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for ex in examples {
        let a = gold_answer(ex)?;
        let key = normalize_answer(a);
        if seen.insert(key.clone()) {
            keys.push(key);
            spellings.push(a.to_owned());
        }
    }
    if keys.len() < 2 {
        return Err(FinetuneError::TooFewAnswers(keys.len()));
    }
    let index_of: std::collections::HashMap<&str, usize> =
        keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let slots: Vec<usize> = (0..keys.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(examples.len() * (1 + negatives_per_example));
    for ex in examples {
        let gold = gold_answer(ex)?;
        let own = index_of[normalize_answer(gold).as_str()];
        let available = keys.len() - 1;
        if available < negatives_per_example {
            return Err(FinetuneError::Row {
                qid: ex.qid.clone(),
                message: format!(
                    "only {available} answers differ from the gold answer, {negatives_per_example} negatives requested"
                ),
            });
        }
        let pair = |completion: String, label| FinetuneRecord {
            kind: RecordKind::JudgePair,
            prompt: ex.question.clone(),
            completion,
            label: Some(label),
            qid: ex.qid.clone(),
            doc_ids: Vec::new(),
        };
        out.push(pair(gold.to_owned(), PairLabel::Positive));
        for &i in sample_distinct(&mut rng, &slots, negatives_per_example, available, |&s| s == own) {
            out.push(pair(spellings[i].clone(), PairLabel::Negative));
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[FinetuneRecord]) -> Result<(), FinetuneError> {
    write_jsonl_file(path, records).map_err(|e| FinetuneError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
