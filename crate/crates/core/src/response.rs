//! The `<think>…</think> <answer>[[x1, y1, x2, y2], …]</answer>` response grammar.
//!
//! Parsing never fails: malformation is reported through `well_formed` and
//! `diagnostics`, and whatever could still be extracted is kept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, BboxFormat};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("cannot serialize a response without boxes")]
    EmptyBoxes,
    #[error("think text contains the delimiter `{0}`")]
    DelimiterInThink(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    MissingTag { tag: String },
    DuplicateTag { tag: String, count: usize },
    OutOfOrder,
    AnswerSyntax { message: String },
    InvalidBox { index: usize, message: String },
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub raw: String,
    /// Trimmed text between the first think delimiter pair, if present.
    pub think_text: Option<String>,
    /// Boxes from the first answer block, when its content parsed cleanly.
    pub answer_boxes: Option<Vec<BBox>>,
    pub well_formed: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedResponse {
    pub fn boxes(&self) -> &[BBox] {
        self.answer_boxes.as_deref().unwrap_or(&[])
    }
}

fn between<'a>(raw: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = raw.find(open)? + open.len();
    let len = raw[start..].find(close)?;
    Some(&raw[start..start + len])
}

fn parse_boxes(body: &str, format: BboxFormat) -> Result<Vec<BBox>, Diagnostic> {
    let quads: Vec<[f64; 4]> =
        serde_json::from_str(body.trim()).map_err(|e| Diagnostic::AnswerSyntax {
            message: e.to_string(),
        })?;
    quads
        .into_iter()
        .enumerate()
        .map(|(index, q)| {
            BBox::from_format(q, format).map_err(|e| Diagnostic::InvalidBox {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_response(raw: &str, expected_n: usize) -> ParsedResponse {
    parse_response_with_format(raw, expected_n, BboxFormat::Xyxy)
}

pub fn parse_response_with_format(
    raw: &str,
    expected_n: usize,
    format: BboxFormat,
) -> ParsedResponse {
    let mut diagnostics = Vec::new();

    let mut first = [0usize; 4];
    let mut delimiters_ok = true;
    for (slot, tag) in TAGS.iter().enumerate() {
        let hits: Vec<usize> = raw.match_indices(tag).map(|(i, _)| i).collect();
        match hits.len() {
            0 => {
                delimiters_ok = false;
                diagnostics.push(Diagnostic::MissingTag {
                    tag: tag.to_string(),
                });
            }
            1 => first[slot] = hits[0],
            count => {
                delimiters_ok = false;
                diagnostics.push(Diagnostic::DuplicateTag {
                    tag: tag.to_string(),
                    count,
                });
            }
        }
    }
    if delimiters_ok && !first.windows(2).all(|w| w[0] < w[1]) {
        delimiters_ok = false;
        diagnostics.push(Diagnostic::OutOfOrder);
    }

    let think_text = between(raw, THINK_OPEN, THINK_CLOSE).map(|t| t.trim().to_string());
    let answer_boxes = match between(raw, ANSWER_OPEN, ANSWER_CLOSE) {
        Some(body) => match parse_boxes(body, format) {
            Ok(boxes) => Some(boxes),
            Err(d) => {
                diagnostics.push(d);
                None
            }
        },
        None => None,
    };

    let dims_ok = match &answer_boxes {
        Some(boxes) if boxes.len() == expected_n => true,
        Some(boxes) => {
            diagnostics.push(Diagnostic::DimensionMismatch {
                expected: expected_n,
                found: boxes.len(),
            });
            false
        }
        None => false,
    };

    ParsedResponse {
        raw: raw.to_string(),
        think_text,
        well_formed: delimiters_ok && dims_ok && expected_n >= 1,
        answer_boxes,
        diagnostics,
    }
}

/// 1.0 for a well-formed response, 0.0 otherwise.
pub fn format_reward(p: &ParsedResponse) -> f64 {
    if p.well_formed {
        1.0
    } else {
        0.0
    }
}

pub fn serialize_response(think: &str, boxes: &[BBox]) -> Result<String, ResponseError> {
    serialize_response_with_format(think, boxes, BboxFormat::Xyxy)
}

pub fn serialize_response_with_format(
    think: &str,
    boxes: &[BBox],
    format: BboxFormat,
) -> Result<String, ResponseError> {
    if boxes.is_empty() {
        return Err(ResponseError::EmptyBoxes);
    }
    if let Some(tag) = TAGS.iter().find(|t| think.contains(*t)) {
        return Err(ResponseError::DelimiterInThink(tag));
    }
    let list = boxes
        .iter()
        .map(|b| {
            let [a, c, d, e] = b.to_format(format);
            format!("[{a}, {c}, {d}, {e}]")
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!(
        "{THINK_OPEN}{think}{THINK_CLOSE} {ANSWER_OPEN}[{list}]{ANSWER_CLOSE}"
    ))
}
