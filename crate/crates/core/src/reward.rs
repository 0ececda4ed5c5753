//! Rule-based rewards for sampled grounding responses: spatio-temporal overlap,
//! modality understanding and format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{slot_iou, BBox, GtSlot, Modality};
use crate::response::{format_reward, ParsedResponse};
use crate::tokenize::{Tokenizer, TokenizerKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("{pred} predictions, {gt} ground-truth slots and {intervals} frame intervals")]
    LengthMismatch {
        pred: usize,
        gt: usize,
        intervals: usize,
    },
    #[error("no frames to score")]
    Empty,
    #[error("frame weighting offset must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("reference reasoning text has no tokens")]
    EmptyReference,
}

/// Which overlap reward drives the spatial component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialReward {
    /// Frame-interval weighted IoU sum.
    #[default]
    St,
    /// Mean IoU over frames (ablation).
    Mi,
}

impl std::str::FromStr for SpatialReward {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "st" => Ok(Self::St),
            "mi" => Ok(Self::Mi),
            other => Err(format!("unknown spatial reward `{other}` (expected st or mi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Offset inside the frame-weight logarithm.
    pub delta: f64,
    pub spatial: SpatialReward,
    pub tokenizer: TokenizerKind,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            delta: 5.0,
            spatial: SpatialReward::St,
            tokenizer: TokenizerKind::Word,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_st: f64,
    pub r_mu: f64,
    pub r_format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(r_st: f64, r_mu: f64, r_format: f64) -> Self {
        Self {
            r_st,
            r_mu,
            r_format,
            total: r_st + r_mu + r_format,
        }
    }
}

/// `log10(dt_n - dt_min + delta)` for every frame.
pub fn frame_weights(intervals: &[u32], delta: f64) -> Result<Vec<f64>, RewardError> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(RewardError::NonPositiveDelta(delta));
    }
    let min = *intervals.iter().min().ok_or(RewardError::Empty)?;
    Ok(intervals
        .iter()
        .map(|&dt| (f64::from(dt - min) + delta).log10())
        .collect())
}

fn check_lengths(intervals: Option<usize>, pred: usize, gt: usize) -> Result<(), RewardError> {
    if pred != gt || intervals.is_some_and(|n| n != gt) {
        return Err(RewardError::LengthMismatch {
            pred,
            gt,
            intervals: intervals.unwrap_or(gt),
        });
    }
    if gt == 0 {
        return Err(RewardError::Empty);
    }
    Ok(())
}

pub fn st_reward(
    intervals: &[u32],
    pred: &[BBox],
    gt: &[GtSlot],
    delta: f64,
) -> Result<f64, RewardError> {
    check_lengths(Some(intervals.len()), pred.len(), gt.len())?;
    let weights = frame_weights(intervals, delta)?;
    Ok(weights
        .iter()
        .zip(pred.iter().zip(gt))
        .map(|(w, (p, g))| w * slot_iou(p, g))
        .sum())
}

/// Mean IoU over frames.
pub fn mi_reward(pred: &[BBox], gt: &[GtSlot]) -> Result<f64, RewardError> {
    check_lengths(None, pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| slot_iou(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Reads a `modality: <name>` declaration from reasoning text.
pub fn declared_modality(think: &str) -> Option<Modality> {
    let lower = think.to_lowercase();
    let idx = lower.find("modality:")?;
    lower[idx + "modality:".len()..]
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?
        .parse()
        .ok()
}

/// Positional token agreement, divided by the longer of the two sequences.
pub fn token_accuracy(
    think: &str,
    reference: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<f64, RewardError> {
    let r = tokenizer.tokenize(reference);
    if r.is_empty() {
        return Err(RewardError::EmptyReference);
    }
    let p = tokenizer.tokenize(think);
    let hits = p.iter().zip(&r).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / p.len().max(r.len()) as f64)
}

/// Modality-understanding reward. For modality-unknown samples a wrong (or
/// missing) classification scores 0; otherwise token accuracy against the
/// reference reasoning.
pub fn mu_reward(
    pred_modality: Option<Modality>,
    true_modality: Modality,
    modality_known: bool,
    think: &str,
    reference: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<f64, RewardError> {
    let acc = token_accuracy(think, reference, tokenizer)?;
    if !modality_known && pred_modality != Some(true_modality) {
        return Ok(0.0);
    }
    Ok(acc)
}

/// Everything about a sample the reward needs besides the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardContext {
    pub intervals: Vec<u32>,
    pub ground_truth: Vec<GtSlot>,
    pub modality: Modality,
    pub modality_known: bool,
    pub reference: String,
}

impl RewardContext {
    pub fn from_sample(sample: &crate::sample::MigSample, reference: impl Into<String>) -> Self {
        Self {
            intervals: sample.frame_intervals(),
            ground_truth: sample.ground_truth.clone(),
            modality: sample.x_modality(),
            modality_known: sample.modality_known,
            reference: reference.into(),
        }
    }
}

pub fn total_reward(
    parsed: &ParsedResponse,
    ctx: &RewardContext,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let r_format = format_reward(parsed);

    let r_st = match &parsed.answer_boxes {
        Some(boxes) if boxes.len() == ctx.ground_truth.len() => match config.spatial {
            SpatialReward::St => st_reward(&ctx.intervals, boxes, &ctx.ground_truth, config.delta)?,
            SpatialReward::Mi => mi_reward(boxes, &ctx.ground_truth)?,
        },
        _ => 0.0,
    };

    let r_mu = match &parsed.think_text {
        Some(think) => mu_reward(
            declared_modality(think),
            ctx.modality,
            ctx.modality_known,
            think,
            &ctx.reference,
            &config.tokenizer,
        )?,
        None => 0.0,
    };

    Ok(RewardBreakdown::new(r_st, r_mu, r_format))
}
