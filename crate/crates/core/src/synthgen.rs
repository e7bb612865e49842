//! Deterministic synthetic grounded datasets.
//!
//! Each image is a smooth chest-like background tiled into a 6×5 grid of
//! atlas cells (29 used, the last cell unused). Cell edges snap to the
//! encoder's patch grid. Every planted abnormality fills one cell with an
//! entity-specific texture whose tile period equals the patch size.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::atlas::{region_answer, AtlasVocab, ANSWER_NO, ANSWER_YES, NUM_ENTITIES, NUM_REGIONS};
use crate::data_model::prompt::{build_prompt_set, entity_label_vector};
use crate::data_model::record::{BBox, QaPair, Raster, SampleRecord, Split};
use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 6;
pub const GRID_COLS: usize = 5;

const TEXTURE_WEIGHT: f64 = 0.8;
const NOISE_AMPLITUDE: f64 = 0.02;

/// Neutral sentences appended to every report.
pub const FILLER_POOL: [&str; 8] = [
    "the heart size is within normal limits",
    "the mediastinal contours are within normal limits",
    "the osseous structures are within normal limits",
    "the hilar contours are within normal limits",
    "the soft tissues are within normal limits",
    "the bowel gas pattern is within normal limits",
    "the trachea is midline",
    "no acute osseous abnormality is seen",
];

const FILLERS_PER_REPORT: usize = 2;
const NORMAL_SENTENCE: &str = "no acute cardiopulmonary process is seen";
const CLOSED_QUESTIONS: usize = 3;

/// Plausible atlas cells for each entity, in entity order.
const DESIGNATED_REGIONS: [&[usize]; NUM_ENTITIES] = [
    &[2, 3, 10, 11],
    &[24, 26, 21],
    &[6, 14, 3, 11],
    &[0, 1, 2, 8, 9, 10],
    &[1, 2, 4, 9, 10, 12],
    &[1, 2, 3, 5, 9, 10, 11, 13],
    &[0, 2, 3, 8, 10, 11],
    &[1, 5, 9, 13],
    &[2, 3, 10, 11],
    &[0, 4, 8, 12],
    &[1, 5, 9, 13],
    &[1, 3, 9, 11],
    &[5, 6, 13, 14],
    &[7, 15, 28],
];

pub fn designated_regions(entity: usize) -> &'static [usize] {
    DESIGNATED_REGIONS[entity]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub max_entities_per_sample: usize,
    pub prob_normal: f64,
    /// Fractions for pretrain, train, val, test; must sum to 1.
    pub split_fractions: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 64,
            image_size: 64,
            patch_size: 8,
            seed: 0,
            max_entities_per_sample: 3,
            prob_normal: 0.2,
            split_fractions: [0.5, 0.3, 0.05, 0.15],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let patches = self.image_size / self.patch_size;
        if patches < GRID_ROWS.max(GRID_COLS) || self.patch_size < 2 {
            return Err(Error::Config(format!(
                "image_size {} cannot host {GRID_ROWS}x{GRID_COLS} grid cells of whole patches",
                self.image_size
            )));
        }
        if self.max_entities_per_sample > NUM_ENTITIES {
            return Err(Error::Config("max_entities_per_sample exceeds 14".into()));
        }
        if !(0.0..=1.0).contains(&self.prob_normal) {
            return Err(Error::Config("prob_normal must lie in [0, 1]".into()));
        }
        let total: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }

    /// Per-split sample counts by largest remainder.
    pub fn split_counts(&self) -> [usize; 4] {
        let n = self.num_samples as f64;
        let raw: Vec<f64> = self.split_fractions.iter().map(|f| f * n).collect();
        let mut counts = [0usize; 4];
        for i in 0..4 {
            counts[i] = raw[i].floor() as usize;
        }
        let mut rest = self.num_samples - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Atlas boxes for an image of `image_size` pixels with `patch_size` patches.
pub fn grid_boxes(image_size: usize, patch_size: usize) -> Vec<BBox> {
    let patches = image_size / patch_size;
    let edge = |i: usize, parts: usize| ((i * patches) / parts * patch_size) as u32;
    (0..NUM_REGIONS)
        .map(|k| {
            let (r, c) = (k / GRID_COLS, k % GRID_COLS);
            BBox::new(edge(c, GRID_COLS), edge(r, GRID_ROWS), edge(c + 1, GRID_COLS), edge(r + 1, GRID_ROWS))
        })
        .collect()
}

/// Texture value in `[0, 1]` of entity `d` at tile-local pixel `(x, y)`.
pub fn texture_value(entity: usize, x: usize, y: usize, tile: usize) -> f64 {
    let family = entity % 3;
    let level = (entity / 3) as f64;
    let t = tile as f64;
    let u = (x % tile) as f64 + 0.5 - t / 2.0;
    let v = (y % tile) as f64 + 0.5 - t / 2.0;
    let r = (u * u + v * v).sqrt();
    match family {
        // bright blob, width shrinking with level
        0 => {
            let sigma = t * (0.45 - 0.07 * level);
            (-(r * r) / (2.0 * sigma * sigma)).exp()
        }
        // oriented stripes
        1 => {
            let theta = level * std::f64::consts::PI / 5.0;
            let freq = (1.0 + (level as usize % 3) as f64) / t;
            let s = u * theta.cos() + v * theta.sin();
            0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * s).cos()
        }
        // concentric rings
        _ => {
            let freq = (1.0 + level) / t;
            0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * r).cos()
        }
    }
}

fn background(y: usize, x: usize, size: usize) -> f64 {
    let s = size as f64;
    let (fy, fx) = (y as f64 / s, x as f64 / s);
    let lung = |cx: f64| {
        let dx = (fx - cx) / 0.2;
        let dy = (fy - 0.5) / 0.35;
        (-(dx * dx + dy * dy)).exp()
    };
    0.55 + 0.15 * fy - 0.25 * (lung(0.3) + lung(0.7))
}

fn render_image(rng: &mut ChaCha8Rng, cfg: &SynthConfig, boxes: &[BBox], planted: &[(usize, usize)]) -> Raster {
    let size = cfg.image_size;
    let mut img = Raster::new(size, size);
    let gain = rng.gen_range(0.95..1.05);
    for y in 0..size {
        for x in 0..size {
            let noise = rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
            img.set(y, x, background(y, x, size) * gain + noise);
        }
    }
    for &(entity, region) in planted {
        let b = boxes[region];
        for y in b.y0 as usize..b.y1 as usize {
            for x in b.x0 as usize..b.x1 as usize {
                let tex = 0.1 + 0.85 * texture_value(entity, x - b.x0 as usize, y - b.y0 as usize, cfg.patch_size);
                let v = (1.0 - TEXTURE_WEIGHT) * img.get(y, x) + TEXTURE_WEIGHT * tex;
                img.set(y, x, v);
            }
        }
    }
    img.quantize();
    img
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Report sentence for a planted finding.
pub fn finding_sentence(vocab: &AtlasVocab, entity: usize, region: usize) -> String {
    format!("{} is seen in the {}", vocab.entity(entity), vocab.region(region))
}

fn compose_report(rng: &mut ChaCha8Rng, vocab: &AtlasVocab, planted: &[(usize, usize)]) -> String {
    let mut sentences: Vec<String> = if planted.is_empty() {
        vec![NORMAL_SENTENCE.to_string()]
    } else {
        planted.iter().map(|&(d, k)| finding_sentence(vocab, d, k)).collect()
    };
    let fillers: Vec<&str> = FILLER_POOL.choose_multiple(rng, FILLERS_PER_REPORT).copied().collect();
    sentences.extend(fillers.iter().map(|s| s.to_string()));
    sentences.iter().map(|s| format!("{}.", capitalize(s))).collect::<Vec<_>>().join(" ")
}

fn record_seed(sample_id: &str) -> u64 {
    let digest = Sha256::digest(sample_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Closed existence questions for three entities plus one location question
/// per present entity; seeded from the sample id.
pub fn make_qa_pairs(record: &SampleRecord) -> Vec<QaPair> {
    let vocab = AtlasVocab::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(&record.sample_id));
    let entities: Vec<usize> = (0..NUM_ENTITIES).collect();
    let mut out: Vec<QaPair> = entities
        .choose_multiple(&mut rng, CLOSED_QUESTIONS)
        .map(|&d| QaPair {
            question: format!("Is {} present?", vocab.entity(d)),
            answer: if record.label_vector[d] { ANSWER_YES } else { ANSWER_NO },
        })
        .collect();
    for t in record.prompt.positives() {
        out.push(QaPair {
            question: format!("Where is {}?", vocab.entity(t.entity)),
            answer: region_answer(t.regions[0]),
        });
    }
    out
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: usize, split: Split) -> Result<SampleRecord> {
    let vocab = AtlasVocab::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let boxes = grid_boxes(cfg.image_size, cfg.patch_size);

    let mut planted: Vec<(usize, usize)> = Vec::new();
    let normal = cfg.max_entities_per_sample == 0 || rng.gen_bool(cfg.prob_normal);
    if !normal {
        let n = rng.gen_range(1..=cfg.max_entities_per_sample);
        let mut order: Vec<usize> = (0..NUM_ENTITIES).collect();
        order.shuffle(&mut rng);
        let mut used = [false; NUM_REGIONS];
        for d in order {
            if planted.len() == n {
                break;
            }
            let free: Vec<usize> = DESIGNATED_REGIONS[d].iter().copied().filter(|&k| !used[k]).collect();
            if let Some(&k) = free.choose(&mut rng) {
                used[k] = true;
                planted.push((d, k));
            }
        }
        planted.sort_unstable();
    }

    let image = render_image(&mut rng, cfg, &boxes, &planted);
    let report = compose_report(&mut rng, &vocab, &planted);
    let annotations: Vec<(usize, Vec<usize>, bool)> = (0..NUM_ENTITIES)
        .map(|d| match planted.iter().find(|(e, _)| *e == d) {
            Some(&(_, k)) => (d, vec![k], true),
            None => (d, Vec::new(), false),
        })
        .collect();
    let prompt = build_prompt_set(&annotations)?;
    let label_vector = entity_label_vector(&prompt);
    let mut record = SampleRecord {
        sample_id: format!("s{:05}_{:016x}", index, cfg.seed),
        image,
        report,
        prompt,
        region_boxes: boxes,
        label_vector,
        qa_pairs: Vec::new(),
        split,
    };
    record.qa_pairs = make_qa_pairs(&record);
    Ok(record)
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let mut splits = Vec::with_capacity(cfg.num_samples);
    for (s, &c) in Split::ALL.iter().zip(&counts) {
        splits.extend(std::iter::repeat_n(*s, c));
    }
    splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| generate_sample(cfg, i, s))
        .collect()
}

/// Reference classifier: the entity whose clean texture best matches the
/// mean-centred pixels of `bbox`.
pub fn classify_texture(image: &Raster, bbox: &BBox, patch_size: usize) -> usize {
    let mut pixels = Vec::new();
    for y in bbox.y0 as usize..bbox.y1 as usize {
        for x in bbox.x0 as usize..bbox.x1 as usize {
            pixels.push((x - bbox.x0 as usize, y - bbox.y0 as usize, image.get(y, x)));
        }
    }
    let centred = |vals: Vec<f64>| {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.into_iter().map(|v| v - m).collect::<Vec<_>>()
    };
    let observed = centred(pixels.iter().map(|p| p.2).collect());
    (0..NUM_ENTITIES)
        .map(|d| {
            let tmpl = centred(
                pixels
                    .iter()
                    .map(|&(x, y, _)| TEXTURE_WEIGHT * 0.85 * texture_value(d, x, y, patch_size))
                    .collect(),
            );
            let dist: f64 = observed.iter().zip(&tmpl).map(|(a, b)| (a - b).powi(2)).sum();
            (d, dist)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(d, _)| d)
        .unwrap()
}
