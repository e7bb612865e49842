//! Line-delimited JSON manifest with sibling raster files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_model::atlas::{AtlasVocab, NUM_ENTITIES};
use crate::data_model::prompt::build_prompt_set;
use crate::data_model::record::{BBox, QaPair, Raster, SampleRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct EntityLine {
    name: String,
    regions: Vec<String>,
    exist: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct QaLine {
    q: String,
    a: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    sample_id: String,
    image: String,
    report: String,
    entities: Vec<EntityLine>,
    boxes: Vec<[u32; 4]>,
    labels: Vec<bool>,
    qa: Vec<QaLine>,
    split: String,
}

/// Writes `manifest.jsonl` and one PNG per sample under `dir/images/`.
pub fn save_manifest(dir: &Path, records: &[SampleRecord]) -> Result<PathBuf> {
    let vocab = AtlasVocab::standard();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let rel = format!("images/{}.png", r.sample_id);
        write_raster(&dir.join(&rel), &r.image)?;
        let line = RecordLine {
            sample_id: r.sample_id.clone(),
            image: rel,
            report: r.report.clone(),
            entities: r
                .prompt
                .triples()
                .iter()
                .map(|t| EntityLine {
                    name: vocab.entity(t.entity).to_string(),
                    regions: t.regions.iter().map(|&k| vocab.region(k).to_string()).collect(),
                    exist: t.exist,
                })
                .collect(),
            boxes: r.region_boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
            labels: r.label_vector.to_vec(),
            qa: r
                .qa_pairs
                .iter()
                .map(|qa| QaLine {
                    q: qa.question.clone(),
                    a: vocab.answer_name(qa.answer).to_string(),
                })
                .collect(),
            split: r.split.as_str().to_string(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest; image paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let vocab = AtlasVocab::standard();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::ManifestLine {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record_from_line(parsed, base, &vocab, line_no)?);
    }
    Ok(records)
}

fn record_from_line(line: RecordLine, base: &Path, vocab: &AtlasVocab, line_no: usize) -> Result<SampleRecord> {
    let invalid = |field: &str, message: String| Error::InvalidRecord {
        sample_id: line.sample_id.clone(),
        field: field.to_string(),
        message,
    };
    let mut annotations = Vec::with_capacity(line.entities.len());
    for e in &line.entities {
        let d = vocab
            .entity_index(&e.name)
            .ok_or_else(|| invalid("entities", format!("unknown entity `{}`", e.name)))?;
        let regions = e
            .regions
            .iter()
            .map(|r| {
                vocab
                    .region_index(r)
                    .ok_or_else(|| invalid("entities", format!("unknown region `{r}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        annotations.push((d, regions, e.exist));
    }
    let prompt = build_prompt_set(&annotations).map_err(|e| invalid("entities", e.to_string()))?;
    if line.labels.len() != NUM_ENTITIES {
        return Err(invalid("labels", format!("expected {NUM_ENTITIES} labels, found {}", line.labels.len())));
    }
    let mut label_vector = [false; NUM_ENTITIES];
    label_vector.copy_from_slice(&line.labels);
    let qa_pairs = line
        .qa
        .iter()
        .map(|qa| {
            vocab
                .answer_index(&qa.a)
                .map(|answer| QaPair {
                    question: qa.q.clone(),
                    answer,
                })
                .ok_or_else(|| invalid("qa", format!("answer `{}` outside vocabulary", qa.a)))
        })
        .collect::<Result<Vec<_>>>()?;
    let split = line.split.parse().map_err(|_| Error::ManifestLine {
        line: line_no,
        message: format!("unknown split `{}`", line.split),
    })?;
    let image = read_raster(&base.join(&line.image))?;
    let record = SampleRecord {
        sample_id: line.sample_id.clone(),
        image,
        report: line.report.clone(),
        prompt,
        region_boxes: line.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
        label_vector,
        qa_pairs,
        split,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    let img = image::GrayImage::from_raw(raster.width as u32, raster.height as u32, raster.to_u8())
        .ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            message: "buffer size mismatch".into(),
        })?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a PNG or PGM as 8-bit grayscale.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_u8(h as usize, w as usize, img.as_raw()))
}
