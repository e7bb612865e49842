//! Fixed anatomical atlas and abnormality vocabulary.

pub const NUM_REGIONS: usize = 29;
pub const NUM_ENTITIES: usize = 14;

/// Anatomical regions in atlas order.
pub const REGIONS: [&str; NUM_REGIONS] = [
    "right lung",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "right hilar structures",
    "right apical zone",
    "right costophrenic angle",
    "right hemidiaphragm",
    "left lung",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "left hilar structures",
    "left apical zone",
    "left costophrenic angle",
    "left hemidiaphragm",
    "trachea",
    "spine",
    "right clavicle",
    "left clavicle",
    "aortic arch",
    "mediastinum",
    "upper mediastinum",
    "superior vena cava",
    "cardiac silhouette",
    "cavoatrial junction",
    "right atrium",
    "carina",
    "abdomen",
];

/// The fourteen tracked abnormalities (ChestX-ray14 label set).
pub const ENTITIES: [&str; NUM_ENTITIES] = [
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural thickening",
    "hernia",
];

pub const ANSWER_YES: usize = 0;
pub const ANSWER_NO: usize = 1;
pub const NUM_ANSWERS: usize = 2 + NUM_REGIONS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtlasVocab {
    pub regions: Vec<String>,
    pub entities: Vec<String>,
    pub negative_phrases: Vec<String>,
}

impl Default for AtlasVocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl AtlasVocab {
    pub fn standard() -> Self {
        Self {
            regions: REGIONS.iter().map(|s| s.to_string()).collect(),
            entities: ENTITIES.iter().map(|s| s.to_string()).collect(),
            negative_phrases: ENTITIES.iter().map(|e| format!("no {e}")).collect(),
        }
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == name)
    }

    pub fn region(&self, k: usize) -> &str {
        &self.regions[k]
    }

    pub fn entity(&self, d: usize) -> &str {
        &self.entities[d]
    }

    pub fn negative_phrase(&self, d: usize) -> &str {
        &self.negative_phrases[d]
    }

    /// Answer classes: `yes`, `no`, then every region name in atlas order.
    pub fn answer_name(&self, class: usize) -> &str {
        match class {
            ANSWER_YES => "yes",
            ANSWER_NO => "no",
            k => &self.regions[k - 2],
        }
    }

    pub fn answer_index(&self, name: &str) -> Option<usize> {
        match name {
            "yes" => Some(ANSWER_YES),
            "no" => Some(ANSWER_NO),
            other => self.region_index(other).map(|k| k + 2),
        }
    }
}

pub fn region_answer(k: usize) -> usize {
    k + 2
}
