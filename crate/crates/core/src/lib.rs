//! Diagnostic-reasoning dialogue engine.
//!
//! Each patient turn runs through: SOAP finding extraction, dense retrieval of
//! candidate diseases, vote-based refinement, finding/disease relation analysis,
//! preference ranking, and a thought-process prompt whose final line is the
//! doctor's reply. The annotation and metrics modules build and score corpora.

pub mod abductive;
pub mod alignment;
pub mod annotation;
pub mod deductive;
pub mod dialogue;
pub mod encoder;
pub mod kb;
pub mod llm;
pub mod metrics;
pub mod retrieval;
pub mod service;
pub mod text;

pub use abductive::{Finding, FindingSet, RefinedList, Refinement, Soap};
pub use alignment::{Exemplars, PriorityRanking, ThoughtProcess};
pub use annotation::{CorpusRecord, CorpusStats, TurnDiseaseAnnotation};
pub use deductive::{DiagnosisMemory, RelationEntry, Status};
pub use dialogue::{Dialogue, DialogueHistory, DialogueTurn, Role, Utterance};
pub use encoder::{EmbeddingVector, EncoderModel, RankerModel};
pub use kb::{DiseaseDoc, KnowledgeBase};
pub use llm::{CompletionParams, LlmBackend, LlmError, MockBackend, TemplateCatalog, TemplateName};
pub use retrieval::{RetrievalResult, ScoredDisease};
pub use service::{Engine, EngineConfig, Session, SessionStore, Stage, TurnTrace};
