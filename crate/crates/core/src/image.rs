use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::matching::Detection;

/// One image's ground truth and detector output: the calibration and test unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    /// Possibly empty.
    pub ground_truths: Vec<BBox>,
    pub detections: Vec<Detection>,
}

impl ImageRecord {
    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn detection_boxes(&self) -> Vec<BBox> {
        self.detections.iter().map(|d| d.bbox).collect()
    }

    /// Copy keeping only detections that pass the objectness and class filter.
    pub fn filtered(&self, objectness_threshold: f64, class_id: Option<u32>) -> ImageRecord {
        ImageRecord {
            detections: crate::matching::filter_detections(
                &self.detections,
                objectness_threshold,
                class_id,
            ),
            ..self.clone()
        }
    }
}
