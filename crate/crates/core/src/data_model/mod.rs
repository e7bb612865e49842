//! Atlas vocabularies, knowledge prompts and manifest ingestion.

pub mod atlas;
pub mod manifest;
pub mod prompt;
pub mod record;

pub use atlas::{AtlasVocab, NUM_ANSWERS, NUM_ENTITIES, NUM_REGIONS};
pub use manifest::{load_manifest, save_manifest};
pub use prompt::{build_prompt_set, entity_label_vector, render_prompt_text, KnowledgePrompt, Triple};
pub use record::{BBox, QaPair, Raster, SampleRecord, Split};
