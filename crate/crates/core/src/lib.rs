//! Template-driven conversion of natural-language derivative contract
//! descriptions into schema-conformant structured representations.
//!
//! The flow is:
//!
//! 1. [`schema::load_schema_dir`] indexes a directory of JSON schema files.
//! 2. [`template::build_template`] derives a minimal template from the schema
//!    and example instances.
//! 3. [`populate::Populator`] fills the template one depth-bounded subtree at
//!    a time, optionally with chunks retrieved from a [`kb::KnowledgeBase`].
//! 4. [`eval`] scores the result for syntactical correctness, schema
//!    adherence and semantic coverage.

pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod kb;
pub mod keypath;
pub mod llm;
pub mod pipeline;
pub mod populate;
pub mod prompts;
pub mod schema;
pub mod template;

pub use error::{Error, Result};
