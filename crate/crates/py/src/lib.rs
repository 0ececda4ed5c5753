//! Python bindings: boxes, rewards, response parsing, GRPO numerics, token
//! weighting, keyframe sampling and the toy simulator.

use std::collections::BTreeMap;
use std::fmt::Display;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use xground_core::dataset::{sample_keyframes as core_keyframes, BuildConfig, VideoIndex};
use xground_core::geometry::{self, BBox, BboxFormat, GtSlot, Modality};
use xground_core::grpo::{self, GroupRollout, GrpoConfig, ResponseTrace, StdKind};
use xground_core::mtw::{self, MtwConfig, TokenCorpus, TokenWeightTable};
use xground_core::response;
use xground_core::reward::{self, RewardConfig, RewardContext, SpatialReward};
use xground_core::sim::{self, EnvConfig, Policy, PolicyLayout, SimConfig, SyntheticEnv};
use xground_core::tokenize::WordTokenizer;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn boxes(raw: Vec<[f64; 4]>) -> PyResult<Vec<BBox>> {
    raw.into_iter()
        .map(|[a, b, c, d]| BBox::new(a, b, c, d).map_err(value_err))
        .collect()
}

/// `None` marks a frame where the target is absent.
fn slots(raw: Vec<Option<[f64; 4]>>) -> PyResult<Vec<GtSlot>> {
    raw.into_iter()
        .map(|s| match s {
            Some([a, b, c, d]) => BBox::new(a, b, c, d).map(GtSlot::Box).map_err(value_err),
            None => Ok(GtSlot::ABSENT),
        })
        .collect()
}

fn modality(name: &str) -> PyResult<Modality> {
    name.parse().map_err(value_err)
}

#[pyclass(name = "BBox", module = "xground", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        BBox::new(x1, y1, x2, y2).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        BBox::from_xywh(x, y, w, h).map(Self).map_err(value_err)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1()
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1()
    }

    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2()
    }

    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn is_sentinel(&self) -> bool {
        self.0.is_sentinel()
    }

    fn iou(&self, other: PyRef<'_, PyBBox>) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x1(), self.0.y1(), self.0.x2(), self.0.y2())
    }
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    let v = boxes(vec![a, b])?;
    Ok(geometry::iou(&v[0], &v[1]))
}

#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.5))]
fn acc_at_threshold(pred: Vec<[f64; 4]>, gt: Vec<Option<[f64; 4]>>, threshold: f64) -> PyResult<f64> {
    xground_core::eval::frame_accuracy(&boxes(pred)?, &slots(gt)?, threshold)
        .ok_or_else(|| PyValueError::new_err("prediction and ground truth differ in length or are empty"))
}

#[pyclass(name = "ParsedResponse", module = "xground", frozen, get_all)]
struct PyParsed {
    think: Option<String>,
    boxes: Option<Vec<[f64; 4]>>,
    well_formed: bool,
    diagnostics: Vec<String>,
}

#[pymethods]
impl PyParsed {
    fn __repr__(&self) -> String {
        format!("ParsedResponse(well_formed={}, diagnostics={:?})", self.well_formed, self.diagnostics)
    }
}

#[pyfunction]
fn parse_response(text: &str, n: usize) -> PyParsed {
    let p = response::parse_response(text, n);
    PyParsed {
        think: p.think_text.clone(),
        boxes: p.answer_boxes.as_ref().map(|b| b.iter().map(BBox::to_array).collect()),
        well_formed: p.well_formed,
        diagnostics: p.diagnostics.iter().map(|d| format!("{d:?}")).collect(),
    }
}

#[pyfunction]
fn serialize_response(think: &str, pred: Vec<[f64; 4]>) -> PyResult<String> {
    response::serialize_response(think, &boxes(pred)?).map_err(value_err)
}

#[pyfunction]
fn format_reward(text: &str, n: usize) -> f64 {
    response::format_reward(&response::parse_response(text, n))
}

#[pyfunction]
#[pyo3(signature = (intervals, pred, gt, delta = 5.0))]
fn st_reward(intervals: Vec<u32>, pred: Vec<[f64; 4]>, gt: Vec<Option<[f64; 4]>>, delta: f64) -> PyResult<f64> {
    reward::st_reward(&intervals, &boxes(pred)?, &slots(gt)?, delta).map_err(value_err)
}

#[pyfunction]
fn mi_reward(pred: Vec<[f64; 4]>, gt: Vec<Option<[f64; 4]>>) -> PyResult<f64> {
    reward::mi_reward(&boxes(pred)?, &slots(gt)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (think, reference, modality_name, modality_known = true))]
fn mu_reward(think: &str, reference: &str, modality_name: &str, modality_known: bool) -> PyResult<f64> {
    reward::mu_reward(
        reward::declared_modality(think),
        modality(modality_name)?,
        modality_known,
        think,
        reference,
        &WordTokenizer,
    )
    .map_err(value_err)
}

/// Full reward of one response text; returns a dict with r_st, r_mu, r_format, total.
#[pyfunction]
#[pyo3(signature = (text, intervals, gt, modality_name, reference, modality_known = true, spatial = "st", delta = 5.0))]
#[allow(clippy::too_many_arguments)]
fn total_reward<'py>(
    py: Python<'py>,
    text: &str,
    intervals: Vec<u32>,
    gt: Vec<Option<[f64; 4]>>,
    modality_name: &str,
    reference: &str,
    modality_known: bool,
    spatial: &str,
    delta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let gt = slots(gt)?;
    let ctx = RewardContext {
        intervals,
        modality: modality(modality_name)?,
        modality_known,
        reference: reference.into(),
        ground_truth: gt.clone(),
    };
    let cfg = RewardConfig {
        delta,
        spatial: spatial.parse::<SpatialReward>().map_err(value_err)?,
        ..Default::default()
    };
    let b = reward::total_reward(&response::parse_response(text, gt.len()), &ctx, &cfg).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("r_st", b.r_st)?;
    d.set_item("r_mu", b.r_mu)?;
    d.set_item("r_format", b.r_format)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (rewards, guard = 1e-8))]
fn advantages(rewards: Vec<f64>, guard: f64) -> PyResult<Vec<f64>> {
    grpo::advantages(&rewards, guard, StdKind::Population).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (ratio, advantage, eps = 0.2))]
fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    grpo::clipped_term(ratio, advantage, eps)
}

#[pyfunction]
fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    grpo::kl_penalty(logp_new, logp_ref)
}

/// `(reward, logp_new, logp_old, logp_ref)`.
type TraceTuple = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

/// One [`TraceTuple`] per sampled response.
#[pyfunction]
#[pyo3(signature = (responses, clip_eps = 0.2, beta = 0.05))]
fn grpo_objective(responses: Vec<TraceTuple>, clip_eps: f64, beta: f64) -> PyResult<f64> {
    let group = GroupRollout {
        query_id: "py".into(),
        responses: responses
            .into_iter()
            .map(|(reward, logp_new, logp_old, logp_ref)| ResponseTrace {
                reward,
                logp_new,
                logp_old,
                logp_ref,
                dist_new: None,
                dist_ref: None,
            })
            .collect(),
    };
    let cfg = GrpoConfig {
        clip_eps,
        beta,
        ..Default::default()
    };
    grpo::grpo_objective(&group, &cfg).map_err(value_err)
}

/// Token weights from per-modality counts: `{modality: {token: count}}`.
#[pyfunction]
fn mtw_weights(counts: BTreeMap<String, BTreeMap<String, u64>>) -> PyResult<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut corpus = TokenCorpus::new();
    for (m, tokens) in &counts {
        let m = modality(m)?;
        for (tok, n) in tokens {
            corpus.add_count(m, tok, *n);
        }
    }
    let table = TokenWeightTable::build(&corpus, MtwConfig::default()).map_err(value_err)?;
    let mut out = BTreeMap::new();
    for row in table.rows() {
        out.entry(row.modality.to_string())
            .or_insert_with(BTreeMap::new)
            .insert(row.token, row.weight);
    }
    Ok(out)
}

#[pyfunction]
fn weighted_sft_loss(weights: Vec<f64>, logprobs: Vec<f64>) -> PyResult<f64> {
    mtw::weighted_sft_loss(&weights, &logprobs).map_err(value_err)
}

/// Keyframe groups for a video of `total_frames` frames with default spacing rules.
#[pyfunction]
fn sample_keyframes(total_frames: usize, seed: u64) -> Vec<Vec<usize>> {
    let video = VideoIndex {
        video_id: "py".into(),
        subset: "py".into(),
        split: None,
        x_modality: Modality::Thermal,
        bbox_format: BboxFormat::Xyxy,
        rgb: vec![String::new(); total_frames],
        x: vec![String::new(); total_frames],
        gt: vec![GtSlot::ABSENT; total_frames],
    };
    core_keyframes(&video, &BuildConfig::default(), seed).groups
}

/// Trains the toy policy; returns one dict per step.
#[pyfunction]
#[pyo3(signature = (steps, seed, spatial = "st", beta = 0.05, learning_rate = None))]
fn simulate<'py>(
    py: Python<'py>,
    steps: usize,
    seed: u64,
    spatial: &str,
    beta: f64,
    learning_rate: Option<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = SimConfig::default();
    cfg.reward.spatial = spatial.parse().map_err(value_err)?;
    cfg.grpo.beta = beta;
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
    let env = SyntheticEnv::new(EnvConfig::default(), seed).map_err(value_err)?;
    let policy = Policy::uniform(PolicyLayout::for_env(&env), cfg.temperature);
    let out = py
        .detach(|| sim::train(&env, &policy, &cfg, steps, seed))
        .map_err(value_err)?;
    out.trace
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("r_st_mean", r.r_st_mean)?;
            d.set_item("r_mu_mean", r.r_mu_mean)?;
            d.set_item("r_format_mean", r.r_format_mean)?;
            d.set_item("total_mean", r.total_mean)?;
            d.set_item("kl_mean", r.kl_mean)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn xground(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyParsed>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(acc_at_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_response, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    m.add_function(wrap_pyfunction!(st_reward, m)?)?;
    m.add_function(wrap_pyfunction!(mi_reward, m)?)?;
    m.add_function(wrap_pyfunction!(mu_reward, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_term, m)?)?;
    m.add_function(wrap_pyfunction!(kl_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_objective, m)?)?;
    m.add_function(wrap_pyfunction!(mtw_weights, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_sft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sample_keyframes, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
