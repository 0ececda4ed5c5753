//! Reward engineering, evaluation and data pipelines for RGB+X multi-image
//! grounding.
//!
//! The crate covers the geometric core (boxes, IoU, Acc@0.5), the response
//! grammar and its format reward, modality-specific token weighting, the
//! spatio-temporal / modality-understanding rewards, GRPO objective numerics,
//! dataset construction from frame-indexed videos, the prompt pipeline that
//! produces reasoning traces, and a small simulator that trains a toy policy
//! end to end.

pub mod dataset;
pub mod eval;
pub mod fixtures;
pub mod geometry;
pub mod grpo;
pub mod mtw;
pub mod response;
pub mod reward;
pub mod sample;
pub mod sim;
pub mod tokenize;
pub mod uav;

pub use eval::{acc_at_threshold, evaluate_manifest, EvalOptions, EvalReport};
pub use geometry::{iou, BBox, BboxFormat, GtSlot, Modality};
pub use grpo::{grpo_objective, GroupRollout, GrpoConfig};
pub use mtw::{weighted_sft_loss, TokenCorpus, TokenWeightTable};
pub use response::{format_reward, parse_response, serialize_response, ParsedResponse};
pub use reward::{total_reward, RewardBreakdown, RewardConfig};
pub use sample::{MigSample, PredictionRecord, Split};
pub use dataset::{build_dataset, emit_manifest, load_manifest, sample_keyframes, BuildConfig, VideoIndex};
pub use sim::{train, SimConfig, SyntheticEnv};
pub use uav::{assemble_step_prompt, filter_stage_one, generate_vmcot, PromptTemplateSet, VmcotRecord};
