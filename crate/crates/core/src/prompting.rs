//! Prompt templates for the internal answerer, the external answerer and the
//! summarizing judge.
//!
//! A template file is UTF-8 text. Lines above the first `---` line form the
//! system prompt; everything below is the user template. Slots are written
//! `{question}`, `{documents}`, `{answer_internal}` and `{answer_external}`;
//! `{{` and `}}` produce literal braces.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::backends::GenerationRequest;
use crate::corpus::Document;
use crate::referee::CandidateAnswer;

pub const DEFAULT_CHAR_BUDGET: usize = 12_000;

const INTERNAL_TEMPLATE: &str = include_str!("../templates/internal.txt");
const EXTERNAL_TEMPLATE: &str = include_str!("../templates/external.txt");
const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template:?}: unknown slot {{{slot}}}")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template:?}: unbalanced brace at byte {at}")]
    Unbalanced { template: String, at: usize },
    #[error("template {template:?} uses {{{slot}}}, which this prompt does not supply")]
    MissingSlot { template: String, slot: Slot },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no documents supplied; use the internal prompt instead")]
    NoDocuments,
    #[error("candidate answer is empty")]
    EmptyCandidate,
    #[error("character budget {budget} cannot fit the question plus any document")]
    BudgetTooSmall { budget: usize },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Question,
    Documents,
    AnswerInternal,
    AnswerExternal,
}

impl Slot {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "question" => Slot::Question,
            "documents" => Slot::Documents,
            "answer_internal" => Slot::AnswerInternal,
            "answer_external" => Slot::AnswerExternal,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Question => "question",
            Slot::Documents => "documents",
            Slot::AnswerInternal => "answer_internal",
            Slot::AnswerExternal => "answer_external",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    system_text: String,
    user_template: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        system_text: impl Into<String>,
        user_template: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let name = name.into();
        let user_template = user_template.into();
        let pieces = parse_pieces(&name, &user_template)?;
        Ok(Self {
            name,
            system_text: system_text.into(),
            user_template,
            pieces,
        })
    }

    /// Parses the `system\n---\nuser` file layout.
    pub fn parse(name: impl Into<String>, raw: &str) -> Result<Self, PromptError> {
        let raw = raw.strip_suffix('\n').unwrap_or(raw);
        let (system, user) = if let Some(rest) = raw.strip_prefix("---\n") {
            ("", rest)
        } else {
            raw.split_once("\n---\n").unwrap_or(("", raw))
        };
        Self::new(name, system, user)
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(name, &raw)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn system_text(&self) -> &str {
        &self.system_text
    }

    pub fn user_template(&self) -> &str {
        &self.user_template
    }

    pub fn uses(&self, slot: Slot) -> bool {
        self.pieces.contains(&Piece::Slot(slot))
    }

    /// Fails unless every slot the template uses is in `allowed`.
    fn check_slots(&self, allowed: &[Slot]) -> Result<(), PromptError> {
        for piece in &self.pieces {
            if let Piece::Slot(s) = piece {
                if !allowed.contains(s) {
                    return Err(PromptError::MissingSlot {
                        template: self.name.clone(),
                        slot: *s,
                    });
                }
            }
        }
        Ok(())
    }

    /// Renders the user template. `values` must cover every slot in use.
    pub fn render(&self, values: &[(Slot, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.user_template.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == s)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::MissingSlot {
                            template: self.name.clone(),
                            slot: *s,
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    fn request(&self, user_prompt: String) -> GenerationRequest {
        GenerationRequest::new(self.system_text.clone(), user_prompt)
    }
}

fn parse_pieces(name: &str, template: &str) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let rest = &template[i + 1..];
                let end = rest.find('}').ok_or_else(|| PromptError::Unbalanced {
                    template: name.to_owned(),
                    at: i,
                })?;
                let slot_name = &rest[..end];
                let slot = Slot::parse(slot_name).ok_or_else(|| PromptError::UnknownSlot {
                    template: name.to_owned(),
                    slot: slot_name.to_owned(),
                })?;
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(slot));
                for _ in 0..slot_name.chars().count() + 1 {
                    chars.next();
                }
            }
            '}' => {
                return Err(PromptError::Unbalanced {
                    template: name.to_owned(),
                    at: i,
                })
            }
            _ => text.push(c),
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

/// The three prompt families used by the pipeline and the data builders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub internal: PromptTemplate,
    pub external: PromptTemplate,
    pub judge: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            internal: PromptTemplate::parse("internal", INTERNAL_TEMPLATE).expect("shipped template"),
            external: PromptTemplate::parse("external", EXTERNAL_TEMPLATE).expect("shipped template"),
            judge: PromptTemplate::parse("judge", JUDGE_TEMPLATE).expect("shipped template"),
        }
    }
}

impl TemplateSet {
    /// Loads `internal.txt`, `external.txt` and `judge.txt` from `dir`; any
    /// missing file keeps the shipped default.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for (name, slot) in [
            ("internal", &mut set.internal),
            ("external", &mut set.external),
            ("judge", &mut set.judge),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = PromptTemplate::load(name, &path)?;
            }
        }
        Ok(set)
    }
}

fn require_question(question: &str) -> Result<(), PromptError> {
    if question.trim().is_empty() {
        Err(PromptError::EmptyQuestion)
    } else {
        Ok(())
    }
}

/// Question-only prompt for the internal answerer.
pub fn build_internal_prompt(question: &str, template: &PromptTemplate) -> Result<GenerationRequest, PromptError> {
    require_question(question)?;
    template.check_slots(&[Slot::Question])?;
    Ok(template.request(template.render(&[(Slot::Question, question)])?))
}

fn document_block(rank: usize, doc: &Document) -> String {
    format!("[{rank}] {}\n{}", doc.title, doc.text)
}

const BLOCK_SEPARATOR: &str = "\n\n";

/// Question-plus-documents prompt for the external answerer.
///
/// Documents keep their given (retrieval) order. With a `char_budget`, the
/// rendered user prompt is held to that many characters by dropping
/// lowest-ranked blocks first; the last surviving block may be cut short. The
/// question itself is never cut.
pub fn build_external_prompt(
    question: &str,
    docs: &[&Document],
    template: &PromptTemplate,
    char_budget: Option<usize>,
) -> Result<GenerationRequest, PromptError> {
    require_question(question)?;
    if docs.is_empty() {
        return Err(PromptError::NoDocuments);
    }
    template.check_slots(&[Slot::Question, Slot::Documents])?;
    let render = |documents: &str| template.render(&[(Slot::Question, question), (Slot::Documents, documents)]);

    let blocks: Vec<String> = docs.iter().enumerate().map(|(i, d)| document_block(i + 1, d)).collect();
    let full = render(&blocks.join(BLOCK_SEPARATOR))?;
    let Some(budget) = char_budget else {
        return Ok(template.request(full));
    };
    if full.chars().count() <= budget {
        return Ok(template.request(full));
    }

    let overhead = render("")?.chars().count();
    let mut room = budget.saturating_sub(overhead);
    let mut kept: Vec<String> = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let sep = if kept.is_empty() { 0 } else { BLOCK_SEPARATOR.len() };
        let len = block.chars().count();
        if sep + len <= room {
            room -= sep + len;
            kept.push(block.clone());
            continue;
        }
        // Cut this block's body; keep it only if its header survives intact.
        let header = format!("[{}] {}\n", i + 1, docs[i].title).chars().count();
        if room > sep + header {
            kept.push(block.chars().take(room - sep).collect());
        }
        break;
    }
    if kept.is_empty() {
        return Err(PromptError::BudgetTooSmall { budget });
    }
    Ok(template.request(render(&kept.join(BLOCK_SEPARATOR))?))
}

/// Collapses line breaks so a candidate always occupies a single line.
fn single_line(text: &str) -> String {
    text.split(['\n', '\r']).map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Prompt asking the judge to pick or synthesize one final answer.
pub fn build_judge_prompt(
    question: &str,
    a_internal: &CandidateAnswer,
    a_external: &CandidateAnswer,
    template: &PromptTemplate,
) -> Result<GenerationRequest, PromptError> {
    require_question(question)?;
    if a_internal.text.trim().is_empty() || a_external.text.trim().is_empty() {
        return Err(PromptError::EmptyCandidate);
    }
    template.check_slots(&[Slot::Question, Slot::AnswerInternal, Slot::AnswerExternal])?;
    let internal = single_line(&a_internal.text);
    let external = single_line(&a_external.text);
    let user = template.render(&[
        (Slot::Question, question),
        (Slot::AnswerInternal, &internal),
        (Slot::AnswerExternal, &external),
    ])?;
    Ok(template.request(user))
}
