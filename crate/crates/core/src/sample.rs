//! Multi-image grounding samples and prediction records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, BboxFormat, GtSlot, Modality};

pub const MANIFEST_SCHEMA: &str = "xground.mig/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("sample {id}: expected 4 or 6 search images, got {n}")]
    SearchCount { id: String, n: usize },
    #[error("sample {id}: {gt} ground-truth slots for {n} search images")]
    SlotCount { id: String, n: usize, gt: usize },
    #[error("sample {id}: search image {index} has modality {found}, expected {expected}")]
    Interleave {
        id: String,
        index: usize,
        found: Modality,
        expected: Modality,
    },
    #[error("sample {id}: frame indices not strictly increasing in the {modality} stream")]
    FrameOrder { id: String, modality: Modality },
    #[error("sample {id}: template modalities must be rgb and an X modality")]
    TemplateModality { id: String },
    #[error("sample {id}: unsupported schema `{schema}`")]
    Schema { id: String, schema: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Opaque reference to one image of a sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub modality: Modality,
    pub frame_index: u32,
}

fn default_schema() -> String {
    MANIFEST_SCHEMA.to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigSample {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub sample_id: String,
    pub subset: String,
    pub split: Split,
    #[serde(default)]
    pub bbox_format: BboxFormat,
    pub query: String,
    pub template_rgb: ImageRef,
    pub template_x: ImageRef,
    pub template_box: BBox,
    pub search: Vec<ImageRef>,
    pub ground_truth: Vec<GtSlot>,
    #[serde(default = "default_true")]
    pub modality_known: bool,
}

impl MigSample {
    /// Number of search images.
    pub fn n(&self) -> usize {
        self.search.len()
    }

    pub fn x_modality(&self) -> Modality {
        self.template_x.modality
    }

    /// Frame distance of every search image from the template keyframe.
    pub fn frame_intervals(&self) -> Vec<u32> {
        let t0 = self.template_rgb.frame_index;
        self.search
            .iter()
            .map(|img| img.frame_index.saturating_sub(t0))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let id = self.sample_id.clone();
        if self.schema != MANIFEST_SCHEMA {
            return Err(SampleError::Schema {
                id,
                schema: self.schema.clone(),
            });
        }
        let n = self.search.len();
        if n != 4 && n != 6 {
            return Err(SampleError::SearchCount { id, n });
        }
        if self.ground_truth.len() != n {
            return Err(SampleError::SlotCount {
                id,
                n,
                gt: self.ground_truth.len(),
            });
        }
        let x = self.template_x.modality;
        if self.template_rgb.modality != Modality::Rgb || !x.is_x() {
            return Err(SampleError::TemplateModality { id });
        }
        for (index, img) in self.search.iter().enumerate() {
            let expected = if index % 2 == 0 { Modality::Rgb } else { x };
            if img.modality != expected {
                return Err(SampleError::Interleave {
                    id,
                    index,
                    found: img.modality,
                    expected,
                });
            }
        }
        for (modality, template) in [(Modality::Rgb, &self.template_rgb), (x, &self.template_x)] {
            let mut last = template.frame_index;
            for img in self.search.iter().filter(|i| i.modality == modality) {
                if img.frame_index <= last {
                    return Err(SampleError::FrameOrder { id, modality });
                }
                last = img.frame_index;
            }
        }
        Ok(())
    }
}

/// Predicted boxes for one sample, positionally aligned with its search images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_guess: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_text: Option<String>,
}


#[cfg(test)]
mod tests {
    use super::testing::sample;
    use super::*;

    fn gt6() -> Vec<GtSlot> {
        vec![GtSlot::Box(BBox::new(0., 0., 10., 10.).unwrap()); 6]
    }

    #[test]
    fn valid_sample_passes() {
        let s = sample("a", gt6());
        s.validate().unwrap();
        assert_eq!(s.frame_intervals(), vec![25, 25, 50, 50, 75, 75]);
    }

    #[test]
    fn wrong_search_count_rejected() {
        let mut s = sample("a", gt6());
        s.search.pop();
        s.ground_truth.pop();
        assert!(matches!(s.validate(), Err(SampleError::SearchCount { .. })));
    }

    #[test]
    fn interleave_enforced() {
        let mut s = sample("a", gt6());
        s.search.swap(0, 1);
        assert!(matches!(s.validate(), Err(SampleError::Interleave { .. })));
    }

    #[test]
    fn frame_order_enforced() {
        let mut s = sample("a", gt6());
        s.search[2].frame_index = 10;
        assert!(matches!(s.validate(), Err(SampleError::FrameOrder { .. })));
    }

    #[test]
    fn json_round_trip() {
        let mut gt = gt6();
        gt[3] = GtSlot::ABSENT;
        let s = sample("a", gt);
        let line = serde_json::to_string(&s).unwrap();
        let back: MigSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
    }
}
