//! Knowledge prompts: per-sample (entity, position, existence) triples and
//! their sentence rendering.

use crate::data_model::atlas::{AtlasVocab, NUM_ENTITIES, NUM_REGIONS};
use crate::error::{Error, Result};

pub const NO_FINDING_SENTENCE: &str = "No abnormality is found";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub entity: usize,
    /// Sorted, deduplicated atlas indices.
    pub regions: Vec<usize>,
    pub exist: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgePrompt {
    triples: Vec<Triple>,
    rendered: Vec<String>,
}

impl KnowledgePrompt {
    /// Triples ordered by entity index.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// One sentence per present entity, in entity order.
    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }

    pub fn positives(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| t.exist)
    }

    pub fn has_positive(&self) -> bool {
        self.triples.iter().any(|t| t.exist)
    }

    /// The text fed to the prompt encoder; falls back to the no-finding
    /// sentinel when no entity is present.
    pub fn text(&self) -> String {
        render_prompt_text(self)
    }
}

pub fn render_sentence(vocab: &AtlasVocab, triple: &Triple) -> String {
    let entity = vocab.entity(triple.entity);
    let mut chars = entity.chars();
    let capitalized: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    let places: Vec<&str> = triple.regions.iter().map(|&k| vocab.region(k)).collect();
    format!("{capitalized} is located at {}", places.join(" and "))
}

/// Validates annotations and assembles a prompt. Exact duplicates collapse;
/// a repeated entity with different fields is rejected.
pub fn build_prompt_set(annotations: &[(usize, Vec<usize>, bool)]) -> Result<KnowledgePrompt> {
    let vocab = AtlasVocab::standard();
    let mut slots: Vec<Option<Triple>> = vec![None; NUM_ENTITIES];
    for (entity, regions, exist) in annotations {
        if *entity >= NUM_ENTITIES {
            return Err(Error::Validation(format!("entity index {entity} out of range")));
        }
        if let Some(&k) = regions.iter().find(|&&k| k >= NUM_REGIONS) {
            return Err(Error::Validation(format!("region index {k} out of range")));
        }
        if *exist && regions.is_empty() {
            return Err(Error::Validation(format!(
                "entity `{}` exists but names no region",
                vocab.entity(*entity)
            )));
        }
        let mut regions = regions.clone();
        regions.sort_unstable();
        regions.dedup();
        let triple = Triple {
            entity: *entity,
            regions,
            exist: *exist,
        };
        match &slots[*entity] {
            Some(prev) if *prev != triple => {
                return Err(Error::Validation(format!(
                    "entity `{}` annotated twice with conflicting fields",
                    vocab.entity(*entity)
                )))
            }
            _ => slots[*entity] = Some(triple),
        }
    }
    let triples: Vec<Triple> = slots.into_iter().flatten().collect();
    let rendered = triples
        .iter()
        .filter(|t| t.exist)
        .map(|t| render_sentence(&vocab, t))
        .collect();
    Ok(KnowledgePrompt { triples, rendered })
}

pub fn render_prompt_text(prompt: &KnowledgePrompt) -> String {
    if prompt.rendered.is_empty() {
        NO_FINDING_SENTENCE.to_string()
    } else {
        prompt.rendered.join(". ")
    }
}

pub fn entity_label_vector(prompt: &KnowledgePrompt) -> [bool; NUM_ENTITIES] {
    let mut out = [false; NUM_ENTITIES];
    for t in prompt.positives() {
        out[t.entity] = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PNEUMONIA: usize = 6;
    const EDEMA: usize = 9;
    const HERNIA: usize = 13;

    #[test]
    fn renders_single_present_entity() {
        let p = build_prompt_set(&[(PNEUMONIA, vec![2], true)]).unwrap();
        assert_eq!(p.rendered(), ["Pneumonia is located at right mid lung zone"]);
        assert_eq!(render_prompt_text(&p), "Pneumonia is located at right mid lung zone");
    }

    #[test]
    fn absent_entities_are_not_rendered() {
        let p = build_prompt_set(&[(HERNIA, vec![28], false)]).unwrap();
        assert!(p.rendered().is_empty());
        assert_eq!(p.text(), NO_FINDING_SENTENCE);
    }

    #[test]
    fn empty_annotations_render_sentinel() {
        let p = build_prompt_set(&[]).unwrap();
        assert_eq!(render_prompt_text(&p), "No abnormality is found");
        assert_eq!(entity_label_vector(&p), [false; NUM_ENTITIES]);
    }

    #[test]
    fn multi_region_joins_in_atlas_order() {
        let p = build_prompt_set(&[(EDEMA, vec![8, 0], true)]).unwrap();
        assert_eq!(p.text(), "Edema is located at right lung and left lung");
        let q = build_prompt_set(&[(EDEMA, vec![0, 8], true)]).unwrap();
        assert_eq!(p.text(), q.text());
    }

    #[test]
    fn conflicting_duplicates_rejected_identical_merged() {
        assert!(build_prompt_set(&[(PNEUMONIA, vec![2], true), (PNEUMONIA, vec![3], true)]).is_err());
        let p = build_prompt_set(&[(PNEUMONIA, vec![2], true), (PNEUMONIA, vec![2], true)]).unwrap();
        assert_eq!(p.triples().len(), 1);
    }

    #[test]
    fn out_of_range_indices_rejected() {
        assert!(build_prompt_set(&[(14, vec![0], true)]).is_err());
        assert!(build_prompt_set(&[(0, vec![29], true)]).is_err());
        assert!(build_prompt_set(&[(0, vec![], true)]).is_err());
    }

    #[test]
    fn label_vector_examples() {
        let all: Vec<_> = (0..NUM_ENTITIES).map(|d| (d, vec![d], true)).collect();
        assert_eq!(entity_label_vector(&build_prompt_set(&all).unwrap()), [true; NUM_ENTITIES]);
        let p = build_prompt_set(&[(PNEUMONIA, vec![2], true), (HERNIA, vec![28], false)]).unwrap();
        let y = entity_label_vector(&p);
        assert_eq!(y.iter().filter(|&&b| b).count(), 1);
        assert!(y[PNEUMONIA]);
    }

    fn arb_annotations() -> impl Strategy<Value = Vec<(usize, Vec<usize>, bool)>> {
        proptest::collection::btree_map(
            0..NUM_ENTITIES,
            (proptest::collection::btree_set(0..NUM_REGIONS, 1..4), any::<bool>()),
            0..6,
        )
        .prop_map(|m| {
            m.into_iter()
                .map(|(d, (rs, e))| (d, rs.into_iter().collect(), e))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn rendered_count_matches_present_triples(ann in arb_annotations()) {
            let p = build_prompt_set(&ann).unwrap();
            prop_assert_eq!(p.rendered().len(), p.triples().iter().filter(|t| t.exist).count());
            prop_assert_eq!(render_prompt_text(&p), render_prompt_text(&p));
        }

        #[test]
        fn rendering_is_injective_on_present_triples(a in arb_annotations(), b in arb_annotations()) {
            let pa = build_prompt_set(&a).unwrap();
            let pb = build_prompt_set(&b).unwrap();
            let sa: Vec<_> = pa.positives().cloned().collect();
            let sb: Vec<_> = pb.positives().cloned().collect();
            prop_assert_eq!(sa == sb, pa.text() == pb.text());
        }
    }
}
