//! Multimodal stance detection with retrieval-augmented multi-agent debate.
//!
//! Each instance (text, image, target) flows through up to four stages:
//! retrieval of labeled exemplars with stored reasoning, analysis by text,
//! image and cross-modal agents, a stance debate, and a final adjudication.
//! Every model call goes through [`llm::ChatBackend`]; [`llm::MockBackend`]
//! makes the whole pipeline runnable offline and deterministic.

pub mod agents;
pub mod domain;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod pipeline;
pub mod scalar;
pub mod store;

pub use agents::{TemplateId, TemplateSet};
pub use domain::{
    label_from_word, label_word, CallTrace, DebateRole, ImageSource, Instance, Stage, StanceLabel, TraceEntry,
    Verdict, Vocabulary,
};
pub use embedding::{Embedding, EmbeddingProvider, HttpEmbeddingProvider, PrecomputedEmbeddings};
pub use error::{Error, Result};
pub use eval::{load_dataset, macro_f1, run_experiment, EvalReport, Scenario, Split};
pub use llm::{ChatBackend, CompletionParams, HttpChatBackend, MockBackend};
pub use pipeline::{classify, classify_batch, PipelineConfig, Providers, RunManifest};
pub use scalar::Scalar;
pub use store::{build_store, load_store, save_store, ExemplarStore};

/// Scalar used by the CLI and the on-disk store.
pub type DefaultScalar = f32;
pub type Embedding32 = Embedding<f32>;
pub type Embedding64 = Embedding<f64>;
pub type ExemplarStore32 = ExemplarStore<f32>;
pub type ExemplarStore64 = ExemplarStore<f64>;
pub type Providers32<'a> = Providers<'a, f32>;
