//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use duet_core::backends::{HashedEmbedder, MockGenerator};
use duet_core::corpus::{ingest_hotpotqa, DocumentSource, Split};
use duet_core::retriever::{build_index, IndexParams};
use duet_core::{Corpus, Document, Duet, PipelineConfig, QAExample, RefereeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn two_row_fixture() -> (Vec<QAExample>, Corpus) {
    ingest_hotpotqa(&fixture("hotpot_2row.json"), Split::Train, None).unwrap()
}

/// The 2-row fixture wired to scripted mocks and the hashed-embedding referee.
pub fn fixture_duet() -> Duet {
    let (_, corpus) = two_row_fixture();
    let index = build_index(&corpus, IndexParams::default()).unwrap();
    let internal = MockGenerator::from_script_file(&fixture("internal_script.jsonl"))
        .unwrap()
        .with_fallback("unknown")
        .with_name("mock-internal");
    let external = MockGenerator::from_script_file(&fixture("external_script.jsonl"))
        .unwrap()
        .with_fallback("unknown")
        .with_name("mock-external");
    let referee = RefereeConfig::alignment(Arc::new(HashedEmbedder::new(256)), 0.05);
    let cfg = PipelineConfig::new(Arc::new(internal), Arc::new(external), referee);
    Duet::new(Arc::new(corpus), Arc::new(index), cfg).unwrap()
}

pub fn fixture_questions() -> Vec<(String, String)> {
    two_row_fixture()
        .0
        .into_iter()
        .map(|e| (e.qid, e.question))
        .collect()
}

// ---------------------------------------------------------------------------
// Brute-force BM25

/// Lowercased maximal runs of alphanumeric characters.
pub fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every document against every query term from scratch and returns
/// the top `k` positive scores, ties broken by ascending doc id. Documents are
/// indexed as `title + " " + text`, and [`corpus_of`] uses the id as the title.
pub fn brute_force_bm25(docs: &[(String, String)], query: &str, k: usize, k1: f64, b: f64) -> Vec<(String, f64)> {
    let tokenized: Vec<(String, Vec<String>)> =
        docs.iter().map(|(id, t)| (id.clone(), oracle_tokens(&format!("{id} {t}")))).collect();
    let n = tokenized.len() as f64;
    let total: usize = tokenized.iter().map(|(_, t)| t.len()).sum();
    let avgdl = total as f64 / n;
    let query = oracle_tokens(query);
    let mut scored = Vec::new();
    for (id, toks) in &tokenized {
        let dl = toks.len() as f64;
        let mut s = 0.0;
        for q in &query {
            let tf = toks.iter().filter(|t| *t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = tokenized.iter().filter(|(_, t)| t.contains(q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let norm = if avgdl > 0.0 { dl / avgdl } else { 1.0 };
            s += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm));
        }
        if s > 0.0 {
            scored.push((id.clone(), s));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub const VOCAB: &[&str] = &[
    "river", "city", "tower", "capital", "bridge", "music", "film", "actor", "born", "year", "war", "king", "queen",
    "north", "south", "lake", "mountain", "island", "band", "album", "novel", "author", "team", "coach", "league",
    "Paris", "Vienna", "Danube", "Rhine", "Alps",
];

/// A random corpus of up to `max_docs` documents with up to `max_tokens` tokens each.
pub fn random_corpus(rng: &mut impl Rng, max_docs: usize, max_tokens: usize) -> Vec<(String, String)> {
    let n = rng.gen_range(1..=max_docs);
    let vocab_size = rng.gen_range(3..=VOCAB.len());
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=max_tokens);
            let text: Vec<&str> = (0..len).map(|_| VOCAB[rng.gen_range(0..vocab_size)]).collect();
            (format!("d{i:04}"), text.join(" "))
        })
        .collect()
}

pub fn random_query(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(1..=6);
    (0..len)
        .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn corpus_of(docs: &[(String, String)]) -> Corpus {
    Corpus::from_documents(
        "test",
        docs.iter()
            .map(|(id, text)| Document::new(id.clone(), id.clone(), vec![text.clone()], DocumentSource::ExternalCorpus).unwrap()),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Referee simulator closed form

/// `P(correct)` for the margin rule with score margin `D ~ N(Φ⁻¹(q), 1)`:
/// `p11 + p10·Φ(μ − δ) + p01·Φ(μ + δ)`.
pub fn expected_accuracy(p_i: f64, p_e: f64, rho: f64, q: f64, delta: f64) -> f64 {
    let p11 = p_i * p_e + rho * (p_i * (1.0 - p_i) * p_e * (1.0 - p_e)).sqrt();
    let p10 = p_i - p11;
    let p01 = p_e - p11;
    let std = Normal::new(0.0, 1.0).unwrap();
    let (win_i, win_e) = if q >= 1.0 {
        (if delta.is_finite() { 1.0 } else { 0.0 }, 1.0)
    } else if q <= 0.0 {
        (0.0, if delta.is_finite() { 0.0 } else { 1.0 })
    } else {
        let mu = std.inverse_cdf(q);
        (std.cdf(mu - delta), std.cdf(mu + delta))
    };
    p11 + p10 * win_i + p01 * win_e
}

// ---------------------------------------------------------------------------
// Synthetic HotpotQA slice

/// `rows` HotpotQA-format training rows with 2 supporting and 8 distractor
/// paragraphs each. Distractor titles repeat across rows so deduplication is
/// exercised; answers cycle through 997 distinct strings.
pub fn synthetic_hotpot(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared: Vec<(String, Vec<String>)> = (0..400)
        .map(|i| {
            (
                format!("Shared topic {i}"),
                vec![format!("Shared topic {i} concerns {}.", VOCAB[i % VOCAB.len()])],
            )
        })
        .collect();
    let out: Vec<serde_json::Value> = (0..rows)
        .map(|r| {
            let answer = format!("Answer {}", r % 997);
            let gold_a = (format!("Gold A{r}"), vec![format!("Fact A{r} names {answer}."), " It is notable.".to_owned()]);
            let gold_b = (format!("Gold B{r}"), vec![format!("Fact B{r} links to Gold A{r}.")]);
            let mut context = vec![gold_a.clone(), gold_b.clone()];
            for _ in 0..8 {
                let d = &shared[rng.gen_range(0..shared.len())];
                if !context.iter().any(|(t, _)| t == &d.0) {
                    context.push(d.clone());
                }
            }
            json!({
                "_id": format!("syn{r:05}"),
                "question": format!("Which answer does fact A{r} name via B{r}?"),
                "answer": answer,
                "type": "bridge",
                "level": "medium",
                "supporting_facts": [[gold_a.0, 0], [gold_b.0, 0]],
                "context": context.iter().map(|(t, s)| json!([t, s])).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string(&out).unwrap()
}
