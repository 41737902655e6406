//! HotpotQA ingestion and the on-disk corpus layout.
//!
//! A HotpotQA row carries its own small context (gold paragraphs plus
//! distractors). Ingestion turns every context paragraph into a [`Document`],
//! classifies it as gold or noise for its row using `supporting_facts`, and
//! pools all paragraphs into one deduplicated [`Corpus`].
//!
//! The corpus file is line-delimited JSON: one header line followed by one
//! document per line, ordered by `doc_id`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::io::{byte_offset, write_atomic};
use crate::retriever::{tokenize, IndexParams};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TASK_LABEL: &str = "hotpotqa";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed JSON at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("row {index} (qid {qid:?}): {message}")]
    Row {
        index: usize,
        qid: Option<String>,
        message: String,
    },
    #[error("duplicate _id {qid:?} at row {index}")]
    DuplicateQid { index: usize, qid: String },
    #[error("incompatible corpus file: {0}")]
    Incompatible(String),
    #[error("corpus file line {line}: {message}")]
    Line { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn requires_answer(self) -> bool {
        matches!(self, Split::Train | Split::Validation)
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, validation or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentSource {
    DatasetContext,
    ExternalCorpus,
}

/// One retrievable paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub sentences: Vec<String>,
    pub source: DocumentSource,
}

impl Document {
    /// Builds a document whose `text` is the single-space join of `sentences`.
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        sentences: Vec<String>,
        source: DocumentSource,
    ) -> Option<Self> {
        if sentences.is_empty() {
            return None;
        }
        Some(Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: sentences.join(" "),
            sentences,
            source,
        })
    }

    fn is_well_formed(&self) -> bool {
        !self.sentences.is_empty() && self.text == self.sentences.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub question: String,
    pub answer: Option<String>,
    pub gold_doc_ids: BTreeSet<String>,
    pub noise_doc_ids: BTreeSet<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub document_count: usize,
    pub total_token_count: usize,
}

/// An immutable-after-construction collection of documents keyed by `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    task_label: String,
    documents: BTreeMap<String, Document>,
    stats: CorpusStats,
}

fn token_count(doc: &Document) -> usize {
    tokenize(&doc.text, &IndexParams::default()).len()
}

impl Corpus {
    pub fn new(task_label: impl Into<String>) -> Self {
        Self {
            task_label: task_label.into(),
            documents: BTreeMap::new(),
            stats: CorpusStats::default(),
        }
    }

    /// Builds a corpus from documents; fails on a duplicate `doc_id`.
    pub fn from_documents(
        task_label: impl Into<String>,
        docs: impl IntoIterator<Item = Document>,
    ) -> Result<Self, String> {
        let mut corpus = Self::new(task_label);
        for doc in docs {
            corpus.insert(doc)?;
        }
        Ok(corpus)
    }

    fn insert(&mut self, doc: Document) -> Result<(), String> {
        if !doc.is_well_formed() {
            return Err(format!("document {:?} has no sentences or inconsistent text", doc.doc_id));
        }
        if self.documents.contains_key(&doc.doc_id) {
            return Err(format!("duplicate doc_id {:?}", doc.doc_id));
        }
        self.stats.document_count += 1;
        self.stats.total_token_count += token_count(&doc);
        self.documents.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    /// Adds every document of `other`; fails on a colliding `doc_id`.
    pub fn extend(&mut self, other: Corpus) -> Result<(), String> {
        for doc in other.documents.into_values() {
            self.insert(doc)?;
        }
        Ok(())
    }

    pub fn task_label(&self) -> &str {
        &self.task_label
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.documents.contains_key(doc_id)
    }

    /// Documents in ascending `doc_id` order.
    pub fn documents(&self) -> impl ExactSizeIterator<Item = &Document> {
        self.documents.values()
    }

    pub fn doc_ids(&self) -> impl ExactSizeIterator<Item = &String> {
        self.documents.keys()
    }
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the first `limit` rows of a HotpotQA JSON file.
pub fn ingest_hotpotqa(
    path: &Path,
    split: Split,
    limit: Option<usize>,
) -> Result<(Vec<QAExample>, Corpus), CorpusError> {
    let raw = read_file(path)?;
    ingest_hotpotqa_str(&raw, split, limit)
}

/// Same as [`ingest_hotpotqa`] over an in-memory JSON string.
pub fn ingest_hotpotqa_str(
    raw: &str,
    split: Split,
    limit: Option<usize>,
) -> Result<(Vec<QAExample>, Corpus), CorpusError> {
    let rows: Vec<Value> = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let take = limit.unwrap_or(rows.len()).min(rows.len());

    let mut examples = Vec::with_capacity(take);
    let mut corpus = Corpus::new(DEFAULT_TASK_LABEL);
    let mut seen_qids = HashSet::new();
    // (title, text) -> doc_id of the first occurrence
    let mut dedup: HashMap<(String, String), String> = HashMap::new();

    for (index, row) in rows.iter().take(take).enumerate() {
        let parsed = parse_row(index, row, split)?;
        if !seen_qids.insert(parsed.qid.clone()) {
            return Err(CorpusError::DuplicateQid {
                index,
                qid: parsed.qid,
            });
        }
        let row_err = |message: String| CorpusError::Row {
            index,
            qid: Some(parsed.qid.clone()),
            message,
        };

        let gold_titles: HashSet<&str> = parsed.supporting_titles.iter().map(String::as_str).collect();
        let context_titles: HashSet<&str> = parsed.context.iter().map(|(t, _)| t.as_str()).collect();
        if let Some(missing) = parsed
            .supporting_titles
            .iter()
            .find(|t| !context_titles.contains(t.as_str()))
        {
            return Err(row_err(format!("supporting fact title {missing:?} is not in the context")));
        }

        let mut gold = BTreeSet::new();
        let mut noise = BTreeSet::new();
        let mut local_ids = HashSet::new();
        for (title, sentences) in &parsed.context {
            let is_gold = gold_titles.contains(title.as_str());
            let doc_id = format!("{}:{}", parsed.qid, title);
            if !local_ids.insert(doc_id.clone()) {
                return Err(row_err(format!("context title {title:?} appears twice")));
            }
            let Some(doc) = Document::new(doc_id, title.clone(), sentences.clone(), DocumentSource::DatasetContext)
            else {
                if is_gold {
                    return Err(row_err(format!("supporting paragraph {title:?} has no sentences")));
                }
                log::debug!("row {index}: skipping empty distractor paragraph {title:?}");
                continue;
            };
            let key = (doc.title.clone(), doc.text.clone());
            let id = match dedup.get(&key) {
                Some(existing) => existing.clone(),
                None => {
                    let id = doc.doc_id.clone();
                    corpus.insert(doc).map_err(row_err)?;
                    dedup.insert(key, id.clone());
                    id
                }
            };
            if is_gold {
                gold.insert(id);
            } else {
                noise.insert(id);
            }
        }
        if gold.is_empty() {
            return Err(row_err("row has no supporting documents".into()));
        }
        // Two distinct titles can only collide post-dedup if their (title, text)
        // pairs match, which forces equal titles and thus equal gold status.
        debug_assert!(gold.is_disjoint(&noise));

        examples.push(QAExample {
            qid: parsed.qid,
            question: parsed.question,
            answer: parsed.answer,
            gold_doc_ids: gold,
            noise_doc_ids: noise,
            split,
        });
    }
    Ok((examples, corpus))
}

struct ParsedRow {
    qid: String,
    question: String,
    answer: Option<String>,
    context: Vec<(String, Vec<String>)>,
    supporting_titles: Vec<String>,
}

fn parse_row(index: usize, row: &Value, split: Split) -> Result<ParsedRow, CorpusError> {
    let qid = row.get("_id").and_then(Value::as_str).map(str::to_owned);
    let err = |message: String| CorpusError::Row {
        index,
        qid: qid.clone(),
        message,
    };
    let field = |name: &str| row.get(name).ok_or_else(|| err(format!("missing field `{name}`")));

    let Some(qid_str) = qid.clone() else {
        return Err(err("missing or non-string field `_id`".into()));
    };
    let question = field("question")?
        .as_str()
        .ok_or_else(|| err("`question` is not a string".into()))?
        .to_owned();

    let answer = match row.get("answer") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Null) | None if !split.requires_answer() => None,
        Some(_) => return Err(err("`answer` is not a string".into())),
        None => return Err(err("missing field `answer`".into())),
    };

    let bad_context = || err("`context` must be a list of [title, [sentences]]".into());
    let mut context = Vec::new();
    for entry in field("context")?.as_array().ok_or_else(bad_context)? {
        let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(bad_context)?;
        let title = pair[0].as_str().ok_or_else(bad_context)?.to_owned();
        let sentences = pair[1]
            .as_array()
            .ok_or_else(bad_context)?
            .iter()
            .map(|s| s.as_str().map(str::to_owned).ok_or_else(bad_context))
            .collect::<Result<Vec<_>, _>>()?;
        context.push((title, sentences));
    }

    let bad_facts = || err("`supporting_facts` must be a list of [title, sentence_index]".into());
    let mut supporting_titles = Vec::new();
    for fact in field("supporting_facts")?.as_array().ok_or_else(bad_facts)? {
        let pair = fact.as_array().filter(|p| p.len() == 2).ok_or_else(bad_facts)?;
        let title = pair[0].as_str().ok_or_else(bad_facts)?;
        pair[1].as_u64().ok_or_else(bad_facts)?;
        if !supporting_titles.iter().any(|t| t == title) {
            supporting_titles.push(title.to_owned());
        }
    }

    Ok(ParsedRow {
        qid: qid_str,
        question,
        answer,
        context,
        supporting_titles,
    })
}

#[derive(Deserialize)]
struct PlainDocument {
    title: String,
    text: String,
}

/// Loads an external collection in the plain `{"title","text"}` JSONL format.
///
/// Document ids are `ext:<line number>` (1-based, blank lines skipped in the
/// count). Each text becomes a single sentence.
pub fn load_plain_documents(path: &Path, task_label: &str) -> Result<Corpus, CorpusError> {
    let raw = read_file(path)?;
    let mut corpus = Corpus::new(task_label);
    let mut n = 0usize;
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: PlainDocument = serde_json::from_str(line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Line {
                line: i + 1,
                message: "empty `text`".into(),
            });
        }
        n += 1;
        let document = Document::new(format!("ext:{n}"), doc.title, vec![doc.text], DocumentSource::ExternalCorpus)
            .expect("one sentence");
        corpus
            .insert(document)
            .map_err(|message| CorpusError::Line { line: i + 1, message })?;
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format_version: Value,
    task_label: String,
    document_count: usize,
    #[serde(default)]
    total_token_count: Option<usize>,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let header = CorpusHeader {
        format_version: Value::from(CORPUS_FORMAT_VERSION),
        task_label: corpus.task_label.clone(),
        document_count: corpus.stats.document_count,
        total_token_count: Some(corpus.stats.total_token_count),
    };
    write_atomic(path, |out| {
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        crate::io::write_jsonl(out, &corpus.documents.values().collect::<Vec<_>>())
    })
    .map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();

    let header_line = lines
        .next()
        .ok_or_else(|| CorpusError::Incompatible("missing header line".into()))?
        .map_err(io_err)?;
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| CorpusError::Incompatible(format!("unreadable header: {e}")))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(CorpusError::Incompatible(format!(
            "format_version {} is not supported (expected {CORPUS_FORMAT_VERSION})",
            header.format_version
        )));
    }

    let mut corpus = Corpus::new(header.task_label);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 2,
            message: e.to_string(),
        })?;
        corpus
            .insert(doc)
            .map_err(|message| CorpusError::Line { line: i + 2, message })?;
    }
    if corpus.stats.document_count != header.document_count {
        return Err(CorpusError::Incompatible(format!(
            "header declares {} documents but the file holds {}",
            header.document_count, corpus.stats.document_count
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(qid: &str, ctx: &[(&str, &[&str])], facts: &[(&str, u64)]) -> Value {
        serde_json::json!({
            "_id": qid,
            "question": format!("question {qid}?"),
            "answer": format!("answer {qid}"),
            "context": ctx.iter().map(|(t, s)| serde_json::json!([t, s])).collect::<Vec<_>>(),
            "supporting_facts": facts.iter().map(|(t, i)| serde_json::json!([t, i])).collect::<Vec<_>>(),
        })
    }

    #[test]
    fn empty_array_gives_empty_everything() {
        let (ex, corpus) = ingest_hotpotqa_str("[]", Split::Train, None).unwrap();
        assert!(ex.is_empty());
        assert!(corpus.is_empty());
        assert_eq!(corpus.stats().document_count, 0);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = "[{\"_id\": \"a\",, }]";
        match ingest_hotpotqa_str(raw, Split::Train, None) {
            Err(CorpusError::Parse { offset, .. }) => assert_eq!(&raw[offset..offset + 1], ","),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            ingest_hotpotqa_str("", Split::Train, None),
            Err(CorpusError::Parse { .. })
        ));
    }

    #[test]
    fn missing_field_names_the_row() {
        let mut r = row("q1", &[("A", &["x."])], &[("A", 0)]);
        r.as_object_mut().unwrap().remove("question");
        let raw = serde_json::to_string(&vec![r]).unwrap();
        match ingest_hotpotqa_str(&raw, Split::Train, None) {
            Err(CorpusError::Row { index, qid, message }) => {
                assert_eq!(index, 0);
                assert_eq!(qid.as_deref(), Some("q1"));
                assert!(message.contains("question"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_optional_only_for_test_split() {
        let mut r = row("q1", &[("A", &["x."])], &[("A", 0)]);
        r.as_object_mut().unwrap().remove("answer");
        let raw = serde_json::to_string(&vec![r]).unwrap();
        assert!(ingest_hotpotqa_str(&raw, Split::Validation, None).is_err());
        let (ex, _) = ingest_hotpotqa_str(&raw, Split::Test, None).unwrap();
        assert_eq!(ex[0].answer, None);
    }

    #[test]
    fn duplicate_qid_rejected() {
        let r = row("q1", &[("A", &["x."])], &[("A", 0)]);
        let raw = serde_json::to_string(&vec![r.clone(), r]).unwrap();
        assert!(matches!(
            ingest_hotpotqa_str(&raw, Split::Train, None),
            Err(CorpusError::DuplicateQid { index: 1, .. })
        ));
    }

    #[test]
    fn row_without_supporting_facts_is_an_error() {
        let r = row("q1", &[("A", &["x."])], &[]);
        let raw = serde_json::to_string(&vec![r]).unwrap();
        assert!(matches!(ingest_hotpotqa_str(&raw, Split::Train, None), Err(CorpusError::Row { .. })));
    }

    #[test]
    fn dedup_keeps_first_id_and_classification() {
        // "Shared" is gold for q1 and noise for q2.
        let rows = vec![
            row("q1", &[("Shared", &["s1.", "s2."]), ("Other", &["o."])], &[("Shared", 1)]),
            row("q2", &[("Shared", &["s1.", "s2."]), ("Third", &["t."])], &[("Third", 0)]),
        ];
        let raw = serde_json::to_string(&rows).unwrap();
        let (ex, corpus) = ingest_hotpotqa_str(&raw, Split::Train, None).unwrap();
        assert_eq!(corpus.len(), 3);
        assert!(ex[0].gold_doc_ids.contains("q1:Shared"));
        assert!(ex[1].noise_doc_ids.contains("q1:Shared"));
        assert!(ex[1].gold_doc_ids.contains("q2:Third"));
        assert!(!corpus.contains("q2:Shared"));
        assert_eq!(corpus.get("q1:Shared").unwrap().text, "s1. s2.");
    }

    #[test]
    fn limit_takes_prefix_in_file_order() {
        let rows: Vec<_> = (0..5)
            .map(|i| row(&format!("q{i}"), &[("A", &["x."])], &[("A", 0)]))
            .collect();
        let raw = serde_json::to_string(&rows).unwrap();
        let (ex, _) = ingest_hotpotqa_str(&raw, Split::Train, Some(3)).unwrap();
        assert_eq!(ex.iter().map(|e| e.qid.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2"]);
    }

    #[test]
    fn unknown_header_version_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "{\"format_version\":\"2b\",\"task_label\":\"x\",\"document_count\":0}\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(CorpusError::Incompatible(_))));
    }

    #[test]
    fn plain_documents_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wiki.jsonl");
        fs::write(&p, "{\"title\":\"Paris\",\"text\":\"Capital of France.\"}\n\n{\"title\":\"Lyon\",\"text\":\"A city.\"}\n")
            .unwrap();
        let c = load_plain_documents(&p, "wiki").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("ext:2").unwrap().title, "Lyon");
        assert_eq!(c.get("ext:1").unwrap().source, DocumentSource::ExternalCorpus);
    }
}
