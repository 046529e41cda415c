//! Temporal infobox timelines in, normalized SQLite databases and scored
//! text-to-SQL answers out.
//!
//! The stages, in pipeline order:
//!
//! - [`ingest`]: timeline files and value cleaning
//! - [`schema`]: relational schema model, DDL parsing and emission, normal-form checks
//! - [`schemagen`]: schema generation by model or by deterministic rules
//! - [`populate`]: loading timelines into a database built from a schema
//! - [`llmclient`]: completion requests, record/replay, retries
//! - [`promptkit`]: question patterns, prompt bundles, gold-query refinement
//! - [`sqlgen`]: SQL extraction, safety checks, aggregate lint
//! - [`evalharness`]: execution, answer scoring, error labels, reports
//! - [`pipeline`]: the stages wired together over a run directory
//!
//! The guide under `book/` walks through each stage with runnable examples.

macro_rules! regex {
    ($re:literal $(,)?) => {{
        static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
        RE.get_or_init(|| regex::Regex::new($re).expect("static regex"))
    }};
}

pub mod evalharness;
pub mod ingest;
pub mod llmclient;
pub mod pipeline;
pub mod populate;
pub mod promptkit;
pub mod schema;
pub mod schemagen;
pub mod sqlgen;

pub use evalharness::{EvalRecord, ErrorCategory, IssueGroup, ResultSet, RunReport};
pub use ingest::{CleanValue, RawSnapshot, SnapshotTime, Timeline};
pub use llmclient::{CompletionRequest, LlmClient, RecordStore};
pub use populate::{Database, LoadMapping, LoadReport};
pub use promptkit::{FewShotExample, PatternKind, PatternTemplate, PromptBundle};
pub use schema::{Archetype, RelationalSchema, TableDef};
pub use sqlgen::SafeSql;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/cleaning.md")]
    mod cleaning {}
    #[doc = include_str!("../../../book/src/schemas.md")]
    mod schemas {}
    #[doc = include_str!("../../../book/src/population.md")]
    mod population {}
    #[doc = include_str!("../../../book/src/prompting.md")]
    mod prompting {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
