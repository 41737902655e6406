//! Okapi BM25 over an in-memory inverted index.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} IDF(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! IDF(t)      = ln((N − df + 0.5) / (df + 0.5) + 1)
//! ```
//!
//! Query terms are summed as given, so a repeated query term counts twice.
//! Ranking is by score descending with ties broken by ascending `doc_id`;
//! documents scoring zero are never returned.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::io::write_atomic;
use crate::par::Exec;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("document {0:?} is not in the index")]
    UnknownDocument(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("index file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexParams {
    /// Term-frequency saturation.
    pub k1: f64,
    /// Length normalization in `[0, 1]`.
    pub b: f64,
    pub lowercase: bool,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            lowercase: true,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(RetrievalError::InvalidParams(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::InvalidParams(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Splits on every non-alphanumeric character (Unicode-aware), dropping empties.
pub fn tokenize(text: &str, params: &IndexParams) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if params.lowercase { t.to_lowercase() } else { t.to_owned() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

/// Immutable BM25 index. Documents are addressed internally by their position
/// in the sorted `doc_id` list, so posting lists sorted by position are also
/// sorted by `doc_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: IndexParams,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

pub fn build_index(corpus: &Corpus, params: IndexParams) -> Result<InvertedIndex, RetrievalError> {
    build_index_with(corpus, params, Exec::default())
}

pub fn build_index_with(corpus: &Corpus, params: IndexParams, exec: Exec) -> Result<InvertedIndex, RetrievalError> {
    params.validate()?;
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let docs: Vec<_> = corpus.documents().collect();
    // Per-document term counts are independent; the merge below runs in doc order.
    let counted = exec.map(&docs, |doc| {
        let terms = tokenize(&format!("{} {}", doc.title, doc.text), &params);
        let len = terms.len() as u32;
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        (len, tf)
    });

    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(docs.len());
    for (i, (len, tf)) in counted.into_iter().enumerate() {
        doc_lengths.push(len);
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting { doc: i as u32, tf: count });
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    Ok(InvertedIndex {
        params,
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        avg_doc_length: total as f64 / doc_lengths.len() as f64,
        doc_lengths,
        postings,
    })
}

impl InvertedIndex {
    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.position(doc_id).map(|i| self.doc_lengths[i])
    }

    /// Posting list of `term` as `(doc_id, tf)` pairs in `doc_id` order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|list| list.iter().map(|p| (self.doc_ids[p.doc as usize].as_str(), p.tf)).collect())
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn position(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let IndexParams { k1, b, .. } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_doc_length > 0.0 {
            doc_len as f64 / self.avg_doc_length
        } else {
            1.0
        };
        idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
    }

    /// BM25 score of one document for already-tokenized query terms.
    pub fn bm25_score(&self, query_terms: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let pos = self
            .position(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDocument(doc_id.to_owned()))?;
        let mut score = 0.0;
        for term in query_terms {
            let Some(list) = self.postings.get(term) else { continue };
            if let Ok(i) = list.binary_search_by_key(&(pos as u32), |p| p.doc) {
                score += self.term_weight(self.idf(list.len()), list[i].tf, self.doc_lengths[pos]);
            }
        }
        Ok(score)
    }

    /// Top-`k` documents for `question`.
    pub fn search(&self, question: &str, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let terms = tokenize(question, &self.params);
        // Term-at-a-time accumulation. Each document receives its per-term
        // contributions in query order, matching `bm25_score` exactly.
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for p in list {
                *acc.entry(p.doc).or_insert(0.0) += self.term_weight(idf, p.tf, self.doc_lengths[p.doc as usize]);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        // positions are in doc_id order, so ascending position == ascending doc_id
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc, score))| RetrievalHit {
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Runs [`InvertedIndex::search`] for many questions, output in input order.
    pub fn search_many(
        &self,
        questions: &[String],
        k: usize,
        exec: Exec,
    ) -> Result<Vec<Vec<RetrievalHit>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        exec.map(questions, |q| self.search(q, k)).into_iter().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    params: IndexParams,
    doc_count: usize,
    avg_doc_length: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum IndexLine {
    Doc { doc_id: String, length: u32 },
    Term { term: String, postings: Vec<(String, u32)> },
}

pub fn save_index(index: &InvertedIndex, path: &Path) -> Result<(), RetrievalError> {
    let header = IndexHeader {
        format_version: INDEX_FORMAT_VERSION,
        params: index.params,
        doc_count: index.doc_count(),
        avg_doc_length: index.avg_doc_length,
    };
    write_atomic(path, |out: &mut dyn Write| {
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for (doc_id, &length) in index.doc_ids.iter().zip(&index.doc_lengths) {
            serde_json::to_writer(&mut *out, &IndexLine::Doc { doc_id: doc_id.clone(), length })?;
            out.write_all(b"\n")?;
        }
        for term in index.postings.keys() {
            let postings = index.postings(term).into_iter().map(|(d, tf)| (d.to_owned(), tf)).collect();
            serde_json::to_writer(&mut *out, &IndexLine::Term { term: term.clone(), postings })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<InvertedIndex, RetrievalError> {
    let io_err = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt = |line: usize, message: String| RetrievalError::Format { line, message };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();
    let header: IndexHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(io_err)?).map_err(|e| fmt(1, e.to_string()))?,
        None => return Err(fmt(1, "missing header".into())),
    };
    if header.format_version != INDEX_FORMAT_VERSION {
        return Err(fmt(1, format!("unsupported format_version {}", header.format_version)));
    }
    header.params.validate()?;

    let mut doc_ids = Vec::with_capacity(header.doc_count);
    let mut doc_lengths = Vec::with_capacity(header.doc_count);
    let mut postings = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        match serde_json::from_str(&line.map_err(io_err)?).map_err(|e| fmt(n, e.to_string()))? {
            IndexLine::Doc { doc_id, length } => {
                if !postings.is_empty() {
                    return Err(fmt(n, "document line after term lines".into()));
                }
                if doc_ids.last().is_some_and(|last: &String| *last >= doc_id) {
                    return Err(fmt(n, "document lines must be strictly sorted by doc_id".into()));
                }
                doc_ids.push(doc_id);
                doc_lengths.push(length);
            }
            IndexLine::Term { term, postings: list } => {
                let mut resolved = Vec::with_capacity(list.len());
                for (doc_id, tf) in list {
                    let pos = doc_ids
                        .binary_search(&doc_id)
                        .map_err(|_| fmt(n, format!("posting for unknown document {doc_id:?}")))?;
                    if resolved.last().is_some_and(|p: &Posting| p.doc >= pos as u32) {
                        return Err(fmt(n, "postings must be sorted by doc_id".into()));
                    }
                    resolved.push(Posting { doc: pos as u32, tf });
                }
                postings.insert(term, resolved);
            }
        }
    }
    if doc_ids.len() != header.doc_count {
        return Err(fmt(1, format!("header declares {} documents, found {}", header.doc_count, doc_ids.len())));
    }
    if doc_ids.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    // Recomputed rather than trusted, so scores match a fresh build bit for bit.
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avg_doc_length = total as f64 / doc_lengths.len() as f64;
    if (avg_doc_length - header.avg_doc_length).abs() > 1e-9 * avg_doc_length.max(1.0) {
        return Err(fmt(
            1,
            format!("header avg_doc_length {} disagrees with document lengths ({avg_doc_length})", header.avg_doc_length),
        ));
    }
    Ok(InvertedIndex {
        params: header.params,
        doc_ids,
        doc_lengths,
        avg_doc_length,
        postings,
    })
}
