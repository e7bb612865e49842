//! Paired image/report samples and their validation.

use std::fmt;
use std::str::FromStr;

use crate::data_model::atlas::{NUM_ANSWERS, NUM_ENTITIES, NUM_REGIONS};
use crate::data_model::prompt::{entity_label_vector, KnowledgePrompt};
use crate::error::{Error, Result};

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

/// Axis-aligned half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1.saturating_sub(self.x0) as f64) * (self.y1.saturating_sub(self.y0) as f64)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0)) as f64;
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0)) as f64;
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 as f64 + self.x1 as f64) / 2.0,
            (self.y0 as f64 + self.y1 as f64) / 2.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    /// Index into the answer vocabulary (`yes`, `no`, regions).
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image: Raster,
    pub report: String,
    pub prompt: KnowledgePrompt,
    pub region_boxes: Vec<BBox>,
    pub label_vector: [bool; NUM_ENTITIES],
    pub qa_pairs: Vec<QaPair>,
    pub split: Split,
}

impl SampleRecord {
    fn invalid(&self, field: &str, message: impl Into<String>) -> Error {
        Error::InvalidRecord {
            sample_id: self.sample_id.clone(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = crate::data_model::AtlasVocab::standard();
        if self.image.pixels.len() != self.image.height * self.image.width {
            return Err(self.invalid("image", "pixel buffer does not match dimensions"));
        }
        let expected = entity_label_vector(&self.prompt);
        for (d, (&want, &got)) in expected.iter().zip(&self.label_vector).enumerate() {
            if want != got {
                return Err(self.invalid(
                    "labels",
                    format!("label for `{}` disagrees with prompt existence", vocab.entity(d)),
                ));
            }
        }
        if self.region_boxes.len() != NUM_REGIONS {
            return Err(self.invalid(
                "boxes",
                format!("expected {NUM_REGIONS} boxes, found {}", self.region_boxes.len()),
            ));
        }
        for (k, b) in self.region_boxes.iter().enumerate() {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 as usize > self.image.width || b.y1 as usize > self.image.height {
                return Err(self.invalid(
                    "boxes",
                    format!("box for `{}` lies outside the image or is empty", vocab.region(k)),
                ));
            }
        }
        if let Some(qa) = self.qa_pairs.iter().find(|qa| qa.answer >= NUM_ANSWERS) {
            return Err(self.invalid("qa", format!("answer class {} outside vocabulary", qa.answer)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        let a = BBox::new(0, 0, 8, 8);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(8, 0, 16, 8)), 0.0);
        assert!((a.iou(&BBox::new(4, 0, 12, 8)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn split_parses() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
