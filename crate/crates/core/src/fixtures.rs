//! Deterministic synthetic fixtures and golden cases.
//!
//! Layout written by [`generate_fixtures`]:
//!
//! ```text
//! videos/short_60.json        60 frames, fixed short interval
//! videos/long_300.json        300 frames
//! videos/very_long_5000.json  5000 frames, hits the group cap
//! videos/absent_gt.json       120 frames with target-absent stretches
//! corpus/mini.json            three-modality token counts
//! responses.jsonl             valid and malformed response strings
//! rollouts.jsonl              GRPO groups sampled from the simulator
//! golden.json                 hand-derived expected values
//! fixtures.lock               version and sha256 of every file above
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::VideoIndex;
use crate::geometry::{BBox, BboxFormat, GtSlot, Modality};
use crate::grpo::write_rollouts;
use crate::mtw::TokenCorpus;
use crate::sample::Split;
use crate::sim::{rollout_group, EnvConfig, Policy, PolicyLayout, SimConfig, SimError, SyntheticEnv};

/// Bump whenever generated bytes are meant to change.
pub const FIXTURE_VERSION: u32 = 1;
pub const LOCKFILE: &str = "fixtures.lock";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// A published worked number.
    Reported,
    /// Follows directly from a definition.
    Trivial,
    /// Computed by an independent oracle, named in `oracle`.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub inputs: serde_json::Value,
    pub expected: serde_json::Value,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseFixture {
    pub name: String,
    pub n: usize,
    pub text: String,
    pub well_formed: bool,
}

fn case(name: &str, inputs: serde_json::Value, expected: serde_json::Value, provenance: Provenance) -> GoldenCase {
    GoldenCase {
        name: name.into(),
        inputs,
        expected,
        provenance,
        oracle: None,
    }
}

fn derived(name: &str, inputs: serde_json::Value, expected: serde_json::Value, oracle: &str) -> GoldenCase {
    GoldenCase {
        oracle: Some(oracle.into()),
        ..case(name, inputs, expected, Provenance::Derived)
    }
}

/// Expected values are written out from closed forms, not from the library.
pub fn golden_cases() -> Vec<GoldenCase> {
    use Provenance::*;
    let st = 0.5 * (5f64.log10() + 30f64.log10() + 55f64.log10());
    let a = 1.5f64.sqrt();
    let ln2 = 2f64.ln();
    vec![
        derived(
            "iou_offset_squares",
            json!({"a": [0, 0, 10, 10], "b": [5, 5, 15, 15]}),
            json!(25.0 / 175.0),
            "intersection 5x5 over union 100 + 100 - 25",
        ),
        case("iou_disjoint", json!({"a": [0, 0, 1, 1], "b": [2, 2, 3, 3]}), json!(0.0), Trivial),
        case(
            "acc_threshold_is_strict",
            json!({"pred": [[0, 0, 10, 5]], "gt": [[0, 0, 10, 10]], "threshold": 0.5}),
            json!(0.0),
            Trivial,
        ),
        case(
            "acc_absent_sentinel",
            json!({"pred": [[0, 0, 0, 0], [0, 0, 0, 0]], "gt": ["absent", [0, 0, 10, 10]], "threshold": 0.5}),
            json!(0.5),
            Trivial,
        ),
        case(
            "st_reward_three_keyframes",
            json!({"intervals": [25, 50, 75], "iou": 0.5, "delta": 5.0}),
            json!(st),
            Reported,
        ),
        derived(
            "st_reward_single_frame",
            json!({"intervals": [25], "iou": 1.0, "delta": 5.0}),
            json!(5f64.log10()),
            "log10(0 + 5) for the only frame",
        ),
        case(
            "mi_reward_mean",
            json!({"ious": [1.0, 0.5, 0.0]}),
            json!(0.5),
            Trivial,
        ),
        case(
            "advantages_zero_one_two",
            json!({"rewards": [0.0, 1.0, 2.0]}),
            json!([-a, 0.0, a]),
            Reported,
        ),
        case(
            "advantages_constant_group",
            json!({"rewards": [3.0, 3.0, 3.0, 3.0]}),
            json!([0.0, 0.0, 0.0, 0.0]),
            Trivial,
        ),
        case(
            "clipped_term_positive_advantage",
            json!({"ratio": 1.5, "advantage": 1.0, "eps": 0.2}),
            json!(1.2),
            Reported,
        ),
        case(
            "clipped_term_negative_advantage",
            json!({"ratio": 0.5, "advantage": -1.0, "eps": 0.2}),
            json!(-0.8),
            Reported,
        ),
        derived(
            "kl_penalty_ratio_two",
            json!({"logp_new": 0.5f64.ln(), "logp_ref": 0.0}),
            json!(1.0 - ln2),
            "2 - ln 2 - 1",
        ),
        derived(
            "kl_penalty_ratio_half",
            json!({"logp_new": 0.5f64.ln(), "logp_ref": 0.25f64.ln()}),
            json!(ln2 - 0.5),
            "0.5 + ln 2 - 1",
        ),
        case(
            "weighted_loss",
            json!({"weights": [1.0, 0.05], "logprobs": [-0.1, -2.0]}),
            json!(0.2),
            Reported,
        ),
        derived(
            "mtw_exclusive_token",
            json!({"corpus": "corpus/mini.json", "modality": "thermal", "token": "thermal"}),
            json!(1.0),
            "the modality-exclusive token has the largest contribution, which normalizes to 1",
        ),
        derived(
            "mtw_uniform_stop_token",
            json!({"corpus": "corpus/mini.json", "modality": "depth", "token": "the"}),
            json!(0.05),
            "share 0.1 <= 1/|V| so P <= smoothed Q and the contribution hits the floor",
        ),
        case(
            "keyframes_short_video",
            json!({"video": "videos/short_60.json"}),
            json!([[0, 13, 26, 39]]),
            Reported,
        ),
        case(
            "format_dimension_mismatch",
            json!({"text": "<think>x</think> <answer>[[1, 2, 3]]</answer>", "n": 1}),
            json!(0.0),
            Trivial,
        ),
    ]
}

/// Counts with a known structure: each modality has one exclusive token at
/// half its mass, `heat` leans thermal, and `the` has the same share everywhere.
pub fn mini_corpus() -> TokenCorpus {
    let mut c = TokenCorpus::new();
    let rows: [(Modality, [(&str, u64); 4]); 3] = [
        (Modality::Thermal, [("the", 10), ("thermal", 50), ("heat", 25), ("bright", 15)]),
        (Modality::Depth, [("the", 10), ("depth", 50), ("heat", 5), ("dark", 35)]),
        (Modality::Event, [("the", 10), ("event", 50), ("heat", 5), ("red", 35)]),
    ];
    for (m, counts) in rows {
        for (tok, n) in counts {
            c.add_count(m, tok, n);
        }
    }
    c
}

/// A target drifting right with its box size fixed. `absent` frames get no box.
pub fn synthetic_video(
    id: &str,
    frames: usize,
    split: Split,
    modality: Modality,
    rng: &mut ChaCha8Rng,
    absent: impl Fn(usize) -> bool,
) -> VideoIndex {
    let (w, h) = (rng.gen_range(20..60) as f64, rng.gen_range(20..60) as f64);
    let (x0, y0) = (rng.gen_range(0..100) as f64, rng.gen_range(0..100) as f64);
    let gt = (0..frames)
        .map(|i| {
            if absent(i) {
                return GtSlot::ABSENT;
            }
            let x = x0 + (i % 400) as f64 * 0.5;
            let y = y0 + ((i / 7) % 50) as f64;
            GtSlot::Box(BBox::new(x, y, x + w, y + h).expect("positive box"))
        })
        .collect();
    VideoIndex {
        video_id: id.into(),
        subset: "synthetic".into(),
        split: Some(split),
        x_modality: modality,
        bbox_format: BboxFormat::Xyxy,
        rgb: (0..frames).map(|i| format!("{id}/rgb/{i:05}.jpg")).collect(),
        x: (0..frames).map(|i| format!("{id}/x/{i:05}.jpg")).collect(),
        gt,
    }
}

pub fn response_fixtures() -> Vec<ResponseFixture> {
    let r = |name: &str, n: usize, text: &str, well_formed: bool| ResponseFixture {
        name: name.into(),
        n,
        text: text.into(),
        well_formed,
    };
    vec![
        r("valid", 2, "<think>modality: thermal warm figure</think> <answer>[[1, 2, 3, 4], [5, 6, 7, 8]]</answer>", true),
        r("valid_surrounding_text", 1, "Sure. <think>ok</think>\n<answer>[[0, 0, 4, 4]]</answer> done", true),
        r("valid_absent_sentinel", 1, "<think>gone</think><answer>[[0, 0, 0, 0]]</answer>", true),
        r("missing_think", 1, "<answer>[[1, 2, 3, 4]]</answer>", false),
        r("swapped_order", 1, "<answer>[[1, 2, 3, 4]]</answer><think>x</think>", false),
        r("duplicate_answer", 1, "<think>x</think><answer>[[1, 2, 3, 4]]</answer><answer>[[1, 2, 3, 4]]</answer>", false),
        r("three_coordinates", 1, "<think>x</think><answer>[[1, 2, 3]]</answer>", false),
        r("count_mismatch", 2, "<think>x</think><answer>[[1, 2, 3, 4]]</answer>", false),
        r("inverted_box", 1, "<think>x</think><answer>[[5, 5, 1, 1]]</answer>", false),
        r("not_a_list", 1, "<think>x</think><answer>left side</answer>", false),
        r("nan_coordinate", 1, "<think>x</think><answer>[[NaN, 0, 1, 1]]</answer>", false),
        r("empty", 1, "", false),
    ]
}

fn write(dir: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<(), FixtureError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| FixtureError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(&path, bytes).map_err(|source| FixtureError::Io { path, source })?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, FixtureError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn render_lockfile(files: &BTreeMap<String, String>) -> String {
    let mut out = format!("version {FIXTURE_VERSION}\n");
    for (path, hash) in files {
        out.push_str(&format!("{hash}  {path}\n"));
    }
    out
}

/// Writes the fixture tree into `dir` and returns the path -> sha256 map.
pub fn generate_fixtures(seed: u64, dir: &Path) -> Result<BTreeMap<String, String>, FixtureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = BTreeMap::new();

    let videos = [
        synthetic_video("short_60", 60, Split::Train, Modality::Thermal, &mut rng, |_| false),
        synthetic_video("long_300", 300, Split::Train, Modality::Depth, &mut rng, |_| false),
        synthetic_video("very_long_5000", 5000, Split::Test, Modality::Event, &mut rng, |_| false),
        synthetic_video("absent_gt", 120, Split::Test, Modality::Thermal, &mut rng, |i| {
            i < 3 || (60..75).contains(&i)
        }),
    ];
    for v in &videos {
        write(dir, &format!("videos/{}.json", v.video_id), &pretty(v)?, &mut files)?;
    }

    write(dir, "corpus/mini.json", &pretty(&mini_corpus())?, &mut files)?;

    let mut lines = String::new();
    for r in response_fixtures() {
        lines.push_str(&serde_json::to_string(&r)?);
        lines.push('\n');
    }
    write(dir, "responses.jsonl", lines.as_bytes(), &mut files)?;

    let env = SyntheticEnv::new(EnvConfig::default(), seed)?;
    let policy = Policy::uniform(PolicyLayout::for_env(&env), 1.0);
    let cfg = SimConfig::default();
    let groups = (0..3)
        .map(|k| rollout_group(&env, &policy, &policy, &cfg, seed.wrapping_add(k)).map(|r| r.group))
        .collect::<Result<Vec<_>, _>>()?;
    let mut buf = Vec::new();
    write_rollouts(&mut buf, &groups)?;
    write(dir, "rollouts.jsonl", &buf, &mut files)?;

    write(dir, "golden.json", &pretty(&golden_cases())?, &mut files)?;

    let lock = render_lockfile(&files);
    std::fs::write(dir.join(LOCKFILE), lock).map_err(|source| FixtureError::Io {
        path: dir.join(LOCKFILE),
        source,
    })?;
    Ok(files)
}
