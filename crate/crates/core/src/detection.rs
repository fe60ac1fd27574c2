//! Boxes, detections and ground-truth records shared by the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StaError};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels, serialized as a 4-array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.check().map_err(StaError::InvalidValue)?;
        Ok(b)
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        let all = [self.x1, self.y1, self.x2, self.y2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("box coordinates must be finite".into());
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(format!("box {all:?} is not ordered (x1<x2, y1<y2)"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Per-record checks run after parsing; failures name the offending field.
pub trait Validate {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)>;
}

/// One anticipation prediction `(box, noun, verb, ttc, score)` for frame `uid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub uid: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub noun: usize,
    pub verb: usize,
    /// Time to contact in seconds.
    pub ttc: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb_probs: Option<Vec<f64>>,
}

impl Validate for Detection {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.bbox.check().map_err(|e| ("box", e))?;
        if !(self.ttc > 0.0) || !self.ttc.is_finite() {
            return Err(("ttc", format!("time to contact must be > 0, got {}", self.ttc)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(("score", format!("score must lie in [0, 1], got {}", self.score)));
        }
        for (field, probs) in [("noun_probs", &self.noun_probs), ("verb_probs", &self.verb_probs)] {
            if let Some(p) = probs {
                if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err((field, "probabilities must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub uid: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
}

impl Validate for GroundTruth {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.bbox.check().map_err(|e| ("box", e))?;
        if !(self.ttc > 0.0) || !self.ttc.is_finite() {
            return Err(("ttc", format!("time to contact must be > 0, got {}", self.ttc)));
        }
        Ok(())
    }
}
