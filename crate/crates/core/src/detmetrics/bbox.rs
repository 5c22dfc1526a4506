use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
///
/// Ground-truth boxes carry no score; predictions carry a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn gt(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
            score: None,
        }
    }

    pub fn pred(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: u32, score: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
            score: Some(score),
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Score used for ranking; ground truth ranks as 1.
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.score.is_none_or(|s| (0.0..=1.0).contains(&s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidGeometry(format!("{self:?}")))
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            x_max: self.x_max + dx,
            y_min: self.y_min + dy,
            y_max: self.y_max + dy,
            ..*self
        }
    }
}

/// Boxes belonging to one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_index: i64,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(frame_index: i64, boxes: Vec<BBox>) -> Self {
        Self { frame_index, boxes }
    }

    pub fn empty(frame_index: i64) -> Self {
        Self {
            frame_index,
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Stable descending sort by score; equal scores keep insertion order.
    pub fn sort_by_score(&mut self) {
        self.boxes
            .sort_by(|a, b| b.rank_score().total_cmp(&a.rank_score()));
    }

    pub fn with_frame_index(mut self, frame_index: i64) -> Self {
        self.frame_index = frame_index;
        self
    }
}
