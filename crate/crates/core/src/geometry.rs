//! Boxes, modalities and IoU.
//!
//! Boxes are stored corner-form (`x1, y1, x2, y2`) in absolute pixels. A box of
//! all zeros doubles as the absence sentinel: predictions emit it to claim the
//! target is out of frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate in box {0:?}")]
    NonFinite([f64; 4]),
    #[error("negative coordinate in box {0:?}")]
    Negative([f64; 4]),
    #[error("inverted box {0:?}: expected x1 <= x2 and y1 <= y2")]
    Inverted([f64; 4]),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("unknown bbox format `{0}`")]
    UnknownFormat(String),
}

/// Axis-aligned box, corner convention, absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub const SENTINEL: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 0.0,
        y2: 0.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(raw));
        }
        if raw.iter().any(|v| *v < 0.0) {
            return Err(GeometryError::Negative(raw));
        }
        if x2 < x1 || y2 < y1 {
            return Err(GeometryError::Inverted(raw));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from `x, y, w, h`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_format(coords: [f64; 4], format: BboxFormat) -> Result<Self, GeometryError> {
        match format {
            BboxFormat::Xyxy => Self::new(coords[0], coords[1], coords[2], coords[3]),
            BboxFormat::Xywh => Self::from_xywh(coords[0], coords[1], coords[2], coords[3]),
        }
    }

    pub fn to_format(&self, format: BboxFormat) -> [f64; 4] {
        match format {
            BboxFormat::Xyxy => self.to_array(),
            BboxFormat::Xywh => [self.x1, self.y1, self.width(), self.height()],
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_sentinel(&self) -> bool {
        *self == Self::SENTINEL
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Multiplies every coordinate by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Coordinate layout used by a file or an answer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BboxFormat {
    #[default]
    Xyxy,
    Xywh,
}

impl FromStr for BboxFormat {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xyxy" => Ok(Self::Xyxy),
            "xywh" => Ok(Self::Xywh),
            other => Err(GeometryError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
    Depth,
    Event,
}

impl Modality {
    pub const X_MODALITIES: [Modality; 3] = [Modality::Thermal, Modality::Depth, Modality::Event];

    pub fn is_x(&self) -> bool {
        !matches!(self, Modality::Rgb)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
            Modality::Depth => "depth",
            Modality::Event => "event",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "thermal" | "infrared" | "thermal infrared" | "tir" => Ok(Modality::Thermal),
            "depth" => Ok(Modality::Depth),
            "event" => Ok(Modality::Event),
            other => Err(GeometryError::UnknownModality(other.to_string())),
        }
    }
}

/// One ground-truth slot: a box, or an explicit out-of-frame marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GtSlot {
    Box(BBox),
    Absent(AbsentMarker),
}

/// Serializes as the string `"absent"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentMarker {
    Absent,
}

impl GtSlot {
    pub const ABSENT: GtSlot = GtSlot::Absent(AbsentMarker::Absent);

    pub fn as_box(&self) -> Option<&BBox> {
        match self {
            GtSlot::Box(b) => Some(b),
            GtSlot::Absent(_) => None,
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, GtSlot::Absent(_))
    }
}

impl From<BBox> for GtSlot {
    fn from(b: BBox) -> Self {
        GtSlot::Box(b)
    }
}

impl From<Option<BBox>> for GtSlot {
    fn from(b: Option<BBox>) -> Self {
        b.map_or(GtSlot::ABSENT, GtSlot::Box)
    }
}

/// Overlap credit for one frame. Absent targets score 1 only for the sentinel.
pub fn slot_iou(pred: &BBox, gt: &GtSlot) -> f64 {
    match gt {
        GtSlot::Box(g) => iou(pred, g),
        GtSlot::Absent(_) => {
            if pred.is_sentinel() {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Correctness of one frame at `threshold` (strictly greater than).
pub fn slot_correct(pred: &BBox, gt: &GtSlot, threshold: f64) -> bool {
    match gt {
        GtSlot::Box(g) => iou(pred, g) > threshold,
        GtSlot::Absent(_) => pred.is_sentinel(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 30., 30.)), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let v = iou(&b(0., 0., 10., 10.), &b(5., 5., 15., 15.));
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        assert_eq!(iou(&BBox::SENTINEL, &BBox::SENTINEL), 0.0);
        assert_eq!(iou(&b(3., 3., 3., 9.), &b(3., 3., 3., 9.)), 0.0);
    }

    #[test]
    fn malformed_boxes_are_rejected() {
        assert!(matches!(
            BBox::new(10., 0., 5., 5.),
            Err(GeometryError::Inverted(_))
        ));
        assert!(matches!(
            BBox::new(f64::NAN, 0., 5., 5.),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(matches!(
            BBox::new(-1., 0., 5., 5.),
            Err(GeometryError::Negative(_))
        ));
        assert!(serde_json::from_str::<BBox>("[5, 5, 1, 1]").is_err());
    }

    #[test]
    fn absent_slot_scoring() {
        assert_eq!(slot_iou(&BBox::SENTINEL, &GtSlot::ABSENT), 1.0);
        assert_eq!(slot_iou(&b(1., 1., 4., 4.), &GtSlot::ABSENT), 0.0);
        assert!(slot_correct(&BBox::SENTINEL, &GtSlot::ABSENT, 0.5));
        assert!(!slot_correct(&BBox::SENTINEL, &b(0., 0., 4., 4.).into(), 0.5));
    }

    #[test]
    fn gt_slot_serde() {
        let slots = vec![GtSlot::Box(b(1., 2., 3., 4.)), GtSlot::ABSENT];
        let s = serde_json::to_string(&slots).unwrap();
        assert_eq!(s, r#"[[1.0,2.0,3.0,4.0],"absent"]"#);
        let back: Vec<GtSlot> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, slots);
    }

    #[test]
    fn xywh_conversion() {
        let bx = BBox::from_format([2., 3., 4., 5.], BboxFormat::Xywh).unwrap();
        assert_eq!(bx.to_array(), [2., 3., 6., 8.]);
        assert_eq!(bx.to_format(BboxFormat::Xywh), [2., 3., 4., 5.]);
    }

    #[test]
    fn strict_threshold() {
        // IoU of exactly 0.5 is not correct.
        let a = b(0., 0., 10., 10.);
        let half = b(0., 0., 10., 5.);
        assert!((iou(&a, &half) - 0.5).abs() < 1e-15);
        assert!(!slot_correct(&half, &a.into(), 0.5));
    }
}
