//! Hierarchical skill chaining for construction robots.
//!
//! * [`skill_kb`] holds the micro-skill knowledge base and its validators.
//! * [`ingest`] turns tutorial text and benchmark files into action sequences.
//! * [`chaining`] learns next-action models and rolls out skill chains.
//! * [`bim`] reads geometric task models and binds skill parameters.
//! * [`executor`] runs approved plans against a simulated world.

pub mod geom;
pub mod ingest;
pub mod llm;
pub mod bim;
pub mod chaining;
pub mod executor;
pub mod numfmt;
pub mod skill_kb;

pub use skill_kb::{MicroSkill, ObjectState, SkillId, SkillLibrary};
