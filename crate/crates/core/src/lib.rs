//! Two-arm retrieval-augmented question answering with a referee.
//!
//! Three roles cooperate on every question:
//!
//! * an **internal** answerer that replies from model memory alone,
//! * an **external** answerer that replies from documents fetched by a BM25
//!   [`retriever`],
//! * a [`referee`] that picks (or synthesizes) the final answer, leaning towards
//!   the document-supported answer when the two are close.
//!
//! Around that core sit the HotpotQA [`corpus`] loader, the fine-tuning data
//! builders in [`finetune_data`], the [`eval`] harness (EM/F1 plus a Monte-Carlo
//! referee simulator) and the [`pipeline`] that ties everything together.
//!
//! Data-parallel loops (simulation shards, batch retrieval, run scoring) go
//! through [`par`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iterators otherwise.

pub mod backends;
pub mod corpus;
pub mod eval;
pub mod finetune_data;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod prompting;
pub mod referee;
pub mod retriever;

pub use backends::{Embedder, EmbeddingVector, GenerationRequest, GenerationResult, Generator};
pub use corpus::{Corpus, Document, QAExample, Split};
pub use par::Exec;
pub use pipeline::{Duet, DuetAnswer, PipelineConfig};
pub use referee::{Arm, CandidateAnswer, RefereeConfig, RefereeVerdict, Strategy};
pub use retriever::{IndexParams, InvertedIndex, RetrievalHit};
