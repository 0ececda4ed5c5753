//! Understand / Associate / Validate prompting pipeline for reasoning traces.
//!
//! Each sample goes through four sequential generator calls. The first three
//! build up an analysis of the target across modalities, the fourth merges
//! them into one trace. A fifth call asks the generator to self-assess the
//! trace against the ground-truth boxes; the verdict drives review routing.
//! Every exchange is kept on the record, so a record can be replayed from its
//! own audit log.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GtSlot, Modality};
use crate::sample::MigSample;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder {{{name}}} in {template} template")]
    Unresolved { template: String, name: String },
    #[error("no modality prompt for {0}")]
    MissingModality(Modality),
    #[error("step {0} is not one of 1..=4")]
    BadStep(u8),
    #[error("step {0} needs the previous step's answer")]
    MissingPrevious(u8),
}

#[derive(Debug, Error)]
pub enum UavError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("record {0} has no summary to assess")]
    NoSummary(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Pipeline stage. The first four are the generation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Understand,
    Associate,
    Validate,
    Summarize,
    Assess,
}

impl Stage {
    pub const STEPS: [Stage; 4] = [Stage::Understand, Stage::Associate, Stage::Validate, Stage::Summarize];

    pub fn from_step(step: u8) -> Result<Self, TemplateError> {
        match step {
            1 => Ok(Stage::Understand),
            2 => Ok(Stage::Associate),
            3 => Ok(Stage::Validate),
            4 => Ok(Stage::Summarize),
            other => Err(TemplateError::BadStep(other)),
        }
    }

    pub fn step(&self) -> u8 {
        match self {
            Stage::Understand => 1,
            Stage::Associate => 2,
            Stage::Validate => 3,
            Stage::Summarize => 4,
            Stage::Assess => 5,
        }
    }

    /// Advisory word limit from the step prompt.
    pub fn word_limit(&self) -> Option<usize> {
        match self {
            Stage::Associate => Some(200),
            Stage::Validate => Some(400),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Understand => "understand",
            Stage::Associate => "associate",
            Stage::Validate => "validate",
            Stage::Summarize => "summarize",
            Stage::Assess => "assess",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepExamples {
    pub understand: String,
    pub associate: String,
    pub validate: String,
}

/// Prompt texts with `{name}` placeholders.
///
/// The task, modality and step prompts are the published texts. The
/// summarize and assess prompts are our own wording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplateSet {
    /// Placeholders: `{num}`, `{modality}`, `{box}`.
    pub task: String,
    pub modality_prompts: BTreeMap<Modality, String>,
    /// Placeholder: `{example}`.
    pub understand: String,
    /// Placeholders: `{modality}`, `{modality_prompt}`, `{example}`.
    pub associate: String,
    /// Placeholder: `{example}`.
    pub validate: String,
    pub examples: StepExamples,
    /// Placeholder: `{answer}`.
    pub previous_answer: String,
    /// Not the published text, which is unavailable.
    pub summarize: String,
    /// Placeholders: `{summary}`, `{boxes}`.
    pub assess: String,
    pub separator: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        let modality_prompts = BTreeMap::from([
            (
                Modality::Thermal,
                "The thermal infrared modality is based on temperature sensing. Regions with higher \
                 temperatures have higher grayscale values, appearing white or light gray; conversely, \
                 lower temperatures appear as dark gray or black. For example, a pedestrian target in the \
                 RGB modality exhibits a higher temperature and appears as a gray-white human-shaped \
                 region in the infrared modality, while cooler backgrounds such as roads appear black."
                    .to_string(),
            ),
            (
                Modality::Depth,
                "The depth modality is based on the distance of objects from the camera. The closer an \
                 object is to the viewpoint, the lower its grayscale value, appearing dark gray or black; \
                 the farther it is, the whiter it appears. For instance, if the target is a ball \
                 positioned near the camera, it appears as a dark circular region in the depth modality."
                    .to_string(),
            ),
            (
                Modality::Event,
                "The event modality is based on changes in pixel intensity. A response is triggered only \
                 when brightness increases or decreases beyond a threshold, with red indicating increased \
                 intensity and blue indicating decreased intensity. For example, the headlights of a car \
                 in the RGB modality appear as small circular clusters of red pixels in the event \
                 modality, indicating the emergence of a brighter object in that region."
                    .to_string(),
            ),
        ]);
        Self {
            task: "A total of {num} images are provided, consisting of alternating RGB and {modality} \
                   images. Each RGB image is paired with the subsequent {modality} image, which is \
                   spatially and temporally aligned. The final task is to predict the target\u{2019}s \
                   location in each of the subsequent images, based on the target marked by the green \
                   bounding box. Green box coordinates: {box}."
                .into(),
            modality_prompts,
            understand: "Using only the RGB modality, describe the target inside the green box, along \
                         with any other objects or scene context related to the target (if applicable). \
                         For example, {example}."
                .into(),
            associate: "Establish spatial correspondence between the two modalities. Based on the RGB \
                        modality and the description of the last step, interpret the target information \
                        at the corresponding positions in each {modality} image. Here is the principle \
                        of {modality}: {modality_prompt}. For example, {example}. The reasoning process \
                        for this step should not exceed 200 words."
                .into(),
            validate: "First, analyze the complementary relationship between the two modalities in target \
                       grounding. Specifically, for each image, determine whether one modality experiences \
                       information degradation and whether the other modality provides complementary cues. \
                       Avoid general statements about modality contribution\u{2014}perform image-specific \
                       analysis. Finally, verify the target location based on the cross-modal \
                       complementarity and describe the target position. For example, {example}. The \
                       reasoning process for this step should not exceed 400 words."
                .into(),
            examples: StepExamples {
                understand: "the target is a white car in the left lane, partly hidden behind a truck, \
                             with a row of parked cars to its right"
                    .into(),
                associate: "the white car maps to a compact bright region at the same position in each \
                            X image, separated from the darker road around it"
                    .into(),
                validate: "in image 3 the RGB view is underexposed and the car is hard to see, while the X \
                           image still shows its outline, so the X cue fixes the target near the lower left"
                    .into(),
            },
            previous_answer: "Answer from the previous step: {answer}".into(),
            summarize: "The three analyses above describe the same target. Merge them into a single \
                        reasoning trace: drop repeated content, keep the image-by-image observations, and \
                        finish with the target position in each search image."
                .into(),
            assess: "Below is a reasoning trace about a target in a sequence of images, followed by the \
                     ground-truth boxes of the search images. Decide whether the reasoning is plausible \
                     and consistent with those boxes. Answer PASS or FAIL on the first line, then give a \
                     one-sentence rationale.\n\nReasoning:\n{summary}\n\nGround-truth boxes: {boxes}"
                .into(),
            separator: "\n\n".into(),
        }
    }
}

impl PromptTemplateSet {
    /// Checks that every template only uses placeholders it will be given.
    pub fn validate(&self) -> Result<(), TemplateError> {
        for m in Modality::X_MODALITIES {
            if !self.modality_prompts.contains_key(&m) {
                return Err(TemplateError::MissingModality(m));
            }
        }
        let checks: [(&str, &str, &[&str]); 7] = [
            ("task", &self.task, &["num", "modality", "box"]),
            ("understand", &self.understand, &["example"]),
            ("associate", &self.associate, &["modality", "modality_prompt", "example"]),
            ("validate", &self.validate, &["example"]),
            ("previous_answer", &self.previous_answer, &["answer"]),
            ("summarize", &self.summarize, &[]),
            ("assess", &self.assess, &["summary", "boxes"]),
        ];
        for (name, template, allowed) in checks {
            if let Some(p) = placeholders(template).into_iter().find(|p| !allowed.contains(&p.as_str())) {
                return Err(TemplateError::Unresolved {
                    template: name.into(),
                    name: p,
                });
            }
        }
        Ok(())
    }

    pub fn modality_prompt(&self, m: Modality) -> Result<&str, TemplateError> {
        self.modality_prompts
            .get(&m)
            .map(String::as_str)
            .ok_or(TemplateError::MissingModality(m))
    }
}

fn placeholder_at(s: &str) -> Option<&str> {
    let rest = s.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')).then_some(name)
}

/// Names of all `{name}` placeholders in a template.
pub fn placeholders(template: &str) -> BTreeSet<String> {
    template
        .match_indices('{')
        .filter_map(|(i, _)| placeholder_at(&template[i..]))
        .map(str::to_string)
        .collect()
}

/// Substitutes `{name}` placeholders in one pass. Substituted values are not rescanned.
pub fn fill_template(name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        match placeholder_at(tail) {
            Some(key) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::Unresolved {
                        template: name.into(),
                        name: key.into(),
                    })?;
                out.push_str(value);
                rest = &tail[key.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// The text handed to the summarize step.
pub fn merge_step_outputs(understand: &str, associate: &str, validate: &str) -> String {
    format!("Understand:\n{understand}\n\nAssociate:\n{associate}\n\nValidate:\n{validate}")
}

/// Builds the prompt for generation step 1..=4.
///
/// Steps 2 and 3 take the previous step's answer, step 4 takes the merged
/// outputs of steps 1-3 (see [`merge_step_outputs`]).
pub fn assemble_step_prompt(
    step: u8,
    sample: &MigSample,
    prev_answer: Option<&str>,
    templates: &PromptTemplateSet,
) -> Result<String, TemplateError> {
    let stage = Stage::from_step(step)?;
    let modality = sample.x_modality();
    let modality_name = modality.as_str();
    let num = (2 + sample.n()).to_string();
    let tbox = sample.template_box.to_string();
    let task = fill_template(
        "task",
        &templates.task,
        &[("num", &num), ("modality", modality_name), ("box", &tbox)],
    )?;
    let previous = |prev: Option<&str>| -> Result<String, TemplateError> {
        let answer = prev.ok_or(TemplateError::MissingPrevious(step))?;
        fill_template("previous_answer", &templates.previous_answer, &[("answer", answer)])
    };
    let ex = &templates.examples;
    let parts = match stage {
        Stage::Understand => vec![
            task,
            fill_template("understand", &templates.understand, &[("example", &ex.understand)])?,
        ],
        Stage::Associate | Stage::Validate => {
            let mprompt = templates.modality_prompt(modality)?;
            let current = if stage == Stage::Associate {
                fill_template(
                    "associate",
                    &templates.associate,
                    &[
                        ("modality", modality_name),
                        ("modality_prompt", mprompt),
                        ("example", &ex.associate),
                    ],
                )?
            } else {
                fill_template("validate", &templates.validate, &[("example", &ex.validate)])?
            };
            vec![task, mprompt.to_string(), previous(prev_answer)?, current]
        }
        Stage::Summarize => {
            let merged = prev_answer.ok_or(TemplateError::MissingPrevious(step))?;
            vec![merged.to_string(), fill_template("summarize", &templates.summarize, &[])?]
        }
        Stage::Assess => unreachable!("from_step never yields Assess"),
    };
    Ok(parts.join(&templates.separator))
}

pub fn assessment_prompt(summary: &str, gt: &[GtSlot], templates: &PromptTemplateSet) -> Result<String, TemplateError> {
    let boxes = serde_json::to_string(gt).expect("slots serialize");
    fill_template("assess", &templates.assess, &[("summary", summary), ("boxes", &boxes)])
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "lowercase")]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest<'a> {
    pub stage: Stage,
    pub prompt: &'a str,
    /// Manifest paths of the images the prompt refers to.
    pub images: &'a [String],
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub model: String,
    pub timeout_secs: u64,
    /// List image paths in the prompt text instead of sending image parts.
    pub text_only: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            api_key_env: "GENERATOR_API_KEY".into(),
            model: "generator".into(),
            timeout_secs: 120,
            text_only: true,
        }
    }
}

/// Chat-completions style JSON endpoint.
pub struct HttpChatClient {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    model: String,
    text_only: bool,
}

impl HttpChatClient {
    /// An empty `base_url` falls back to `GENERATOR_BASE_URL`.
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ClientError> {
        let base = if cfg.base_url.is_empty() {
            std::env::var("GENERATOR_BASE_URL")
                .map_err(|_| ClientError::Transport("no base url and GENERATOR_BASE_URL is unset".into()))?
        } else {
            cfg.base_url.clone()
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            model: cfg.model.clone(),
            text_only: cfg.text_only,
        })
    }

    fn body(&self, req: &ChatRequest<'_>) -> serde_json::Value {
        let content = if self.text_only || req.images.is_empty() {
            let mut text = req.prompt.to_string();
            if !req.images.is_empty() {
                text.push_str("\n\nImages, in order: ");
                text.push_str(&req.images.join(", "));
            }
            serde_json::Value::String(text)
        } else {
            let mut parts: Vec<serde_json::Value> = req
                .images
                .iter()
                .map(|p| serde_json::json!({"type": "image_url", "image_url": {"url": p}}))
                .collect();
            parts.push(serde_json::json!({"type": "text", "text": req.prompt}));
            serde_json::Value::Array(parts)
        };
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, ClientError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(self.body(req))
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed("no choices[0].message.content".into()))
    }
}

/// Plays back a fixed sequence of outcomes; errors once the script runs out.
pub struct ScriptedClient {
    script: Mutex<VecDeque<Result<String, ClientError>>>,
}

impl ScriptedClient {
    pub fn new(script: impl IntoIterator<Item = Result<String, ClientError>>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("script lock").len()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, _req: &ChatRequest<'_>) -> Result<String, ClientError> {
        self.script
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(ClientError::Transport("script exhausted".into())))
    }
}

/// Offline stand-in: answers each stage with a fixed line, and `verdict` on assessment.
pub struct EchoClient {
    pub verdict: String,
}

impl Default for EchoClient {
    fn default() -> Self {
        Self { verdict: "PASS dry run".into() }
    }
}

impl ChatClient for EchoClient {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, ClientError> {
        Ok(match req.stage {
            Stage::Assess => self.verdict.clone(),
            stage => format!("{stage} output for {} images", req.images.len()),
        })
    }
}

/// Feeds a record's audit log back, checking that prompts match.
pub struct ReplayClient {
    log: Mutex<VecDeque<Exchange>>,
}

impl ReplayClient {
    pub fn new(audit: &[Exchange]) -> Self {
        Self {
            log: Mutex::new(audit.iter().cloned().collect()),
        }
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, ClientError> {
        let ex = self
            .log
            .lock()
            .expect("replay lock")
            .pop_front()
            .ok_or_else(|| ClientError::Transport("replay log exhausted".into()))?;
        if ex.stage != req.stage || ex.prompt != req.prompt {
            return Err(ClientError::Transport(format!(
                "replay diverged at {} exchange",
                req.stage
            )));
        }
        ex.outcome.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Transport retries per call.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Reply(String),
    Error(ClientError),
}

impl From<Outcome> for Result<String, ClientError> {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Reply(s) => Ok(s),
            Outcome::Error(e) => Err(e),
        }
    }
}

/// One raw request/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub prompt: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAssessment {
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationStatus {
    #[default]
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VmcotRecord {
    pub sample_id: String,
    pub status: GenerationStatus,
    pub understand: Option<String>,
    pub associate: Option<String>,
    pub validate: Option<String>,
    /// The final trace; set only once all three steps succeeded.
    pub summary: Option<String>,
    pub self_assessment: Option<SelfAssessment>,
    pub review_status: ReviewStatus,
    pub retries: u32,
    pub notes: Vec<String>,
    pub audit: Vec<Exchange>,
}

impl VmcotRecord {
    /// The four fields in pipeline order.
    pub fn fields(&self) -> [Option<&str>; 4] {
        [
            self.understand.as_deref(),
            self.associate.as_deref(),
            self.validate.as_deref(),
            self.summary.as_deref(),
        ]
    }

    pub fn is_complete(&self) -> bool {
        self.fields().iter().all(|f| f.is_some_and(|s| !s.trim().is_empty()))
    }
}

/// Runs one call with retries, appending every exchange to the record.
fn call_with_retry(
    client: &dyn ChatClient,
    req: &ChatRequest<'_>,
    policy: &RetryPolicy,
    record: &mut VmcotRecord,
) -> Result<String, ClientError> {
    let mut transport_failures = 0;
    let mut malformed_seen = false;
    loop {
        let result = client.complete(req).and_then(|reply| {
            if reply.trim().is_empty() {
                Err(ClientError::Malformed("empty reply".into()))
            } else {
                Ok(reply)
            }
        });
        record.audit.push(Exchange {
            stage: req.stage,
            prompt: req.prompt.to_string(),
            outcome: match &result {
                Ok(r) => Outcome::Reply(r.clone()),
                Err(e) => Outcome::Error(e.clone()),
            },
        });
        let err = match result {
            Ok(reply) => return Ok(reply),
            Err(e) => e,
        };
        log::warn!("{} {}: {err}", record.sample_id, req.stage);
        match &err {
            ClientError::Transport(_) => {
                if transport_failures >= policy.max_retries {
                    return Err(err);
                }
                std::thread::sleep(policy.delay(transport_failures));
                transport_failures += 1;
            }
            ClientError::Malformed(_) => {
                if malformed_seen {
                    return Err(err);
                }
                malformed_seen = true;
            }
        }
        record.retries += 1;
    }
}

fn images_of(sample: &MigSample) -> Vec<String> {
    [&sample.template_rgb, &sample.template_x]
        .into_iter()
        .chain(&sample.search)
        .map(|i| i.path.clone())
        .collect()
}

/// Runs the four generation steps for one sample. Failures are recorded, never raised.
pub fn generate_vmcot(
    sample: &MigSample,
    client: &dyn ChatClient,
    templates: &PromptTemplateSet,
    policy: &RetryPolicy,
) -> Result<VmcotRecord, TemplateError> {
    let images = images_of(sample);
    let mut record = VmcotRecord {
        sample_id: sample.sample_id.clone(),
        ..Default::default()
    };
    let mut outputs: Vec<String> = Vec::with_capacity(4);
    for stage in Stage::STEPS {
        let prev = match stage {
            Stage::Understand => None,
            Stage::Summarize => Some(merge_step_outputs(&outputs[0], &outputs[1], &outputs[2])),
            _ => outputs.last().cloned(),
        };
        let prompt = assemble_step_prompt(stage.step(), sample, prev.as_deref(), templates)?;
        let req = ChatRequest {
            stage,
            prompt: &prompt,
            images: &images,
        };
        match call_with_retry(client, &req, policy, &mut record) {
            Ok(reply) => {
                if let Some(limit) = stage.word_limit() {
                    let words = reply.split_whitespace().count();
                    if words > limit {
                        record
                            .notes
                            .push(format!("{stage} output has {words} words, limit {limit}"));
                    }
                }
                outputs.push(reply);
            }
            Err(e) => {
                record.status = GenerationStatus::Failed;
                record.notes.push(format!("{stage} failed: {e}"));
                break;
            }
        }
    }
    let mut it = outputs.into_iter();
    record.understand = it.next();
    record.associate = it.next();
    record.validate = it.next();
    record.summary = it.next();
    Ok(record)
}

/// Reads PASS/FAIL from the first word of the reply.
pub fn parse_verdict(reply: &str) -> Option<SelfAssessment> {
    let trimmed = reply.trim_start();
    let word_end = trimmed
        .find(|c: char| !c.is_ascii_alphabetic())
        .unwrap_or(trimmed.len());
    let verdict = match trimmed[..word_end].to_ascii_lowercase().as_str() {
        "pass" => Verdict::Pass,
        "fail" => Verdict::Fail,
        _ => return None,
    };
    let rationale = trimmed[word_end..]
        .trim_start_matches(|c: char| c.is_whitespace() || c == ':' || c == '.' || c == '-')
        .trim()
        .to_string();
    Some(SelfAssessment { verdict, rationale })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterOptions {
    /// Keep self-assessed passes pending until a human accepts them.
    pub require_human_review: bool,
}

/// Self-assessment against ground truth: pass accepts, fail rejects, anything else stays pending.
pub fn filter_stage_one(
    mut record: VmcotRecord,
    gt: &[GtSlot],
    client: &dyn ChatClient,
    templates: &PromptTemplateSet,
    policy: &RetryPolicy,
    options: FilterOptions,
) -> Result<VmcotRecord, UavError> {
    let summary = match (&record.summary, record.status) {
        (Some(s), GenerationStatus::Complete) => s.clone(),
        _ => return Err(UavError::NoSummary(record.sample_id.clone())),
    };
    let prompt = assessment_prompt(&summary, gt, templates)?;
    let req = ChatRequest {
        stage: Stage::Assess,
        prompt: &prompt,
        images: &[],
    };
    match call_with_retry(client, &req, policy, &mut record) {
        Ok(reply) => match parse_verdict(&reply) {
            Some(a) => {
                record.review_status = match a.verdict {
                    Verdict::Fail => ReviewStatus::Rejected,
                    Verdict::Pass if record.is_complete() && !options.require_human_review => {
                        ReviewStatus::Accepted
                    }
                    Verdict::Pass => ReviewStatus::Pending,
                };
                record.self_assessment = Some(a);
            }
            None => {
                record.review_status = ReviewStatus::Pending;
                record.notes.push("unparseable verdict, left for human review".into());
            }
        },
        Err(e) => {
            record.review_status = ReviewStatus::Pending;
            record.notes.push(format!("assessment failed: {e}"));
        }
    }
    Ok(record)
}

/// Generation plus filtering for many samples with at most `jobs` in flight.
/// Records come back in input order.
pub fn generate_batch(
    samples: &[MigSample],
    client: &dyn ChatClient,
    templates: &PromptTemplateSet,
    policy: &RetryPolicy,
    options: FilterOptions,
    jobs: usize,
) -> Result<Vec<VmcotRecord>, UavError> {
    templates.validate()?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<VmcotRecord, UavError>>>> =
        Mutex::new((0..samples.len()).map(|_| None).collect());
    let run_one = |sample: &MigSample| -> Result<VmcotRecord, UavError> {
        let record = generate_vmcot(sample, client, templates, policy)?;
        if record.status == GenerationStatus::Failed {
            return Ok(record);
        }
        filter_stage_one(record, &sample.ground_truth, client, templates, policy, options)
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, samples.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let r = run_one(sample);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReviewCounts {
    pub accepted: usize,
    pub rejected: usize,
    pub pending: usize,
    pub failed: usize,
}

impl ReviewCounts {
    pub fn from_records(records: &[VmcotRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            if r.status == GenerationStatus::Failed {
                c.failed += 1;
                continue;
            }
            match r.review_status {
                ReviewStatus::Accepted => c.accepted += 1,
                ReviewStatus::Rejected => c.rejected += 1,
                ReviewStatus::Pending => c.pending += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.accepted + self.rejected + self.pending + self.failed
    }

    pub fn accepted_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.accepted as f64 / t as f64,
        }
    }
}

/// One line of the human review queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub sample: Option<MigSample>,
    pub record: VmcotRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub sample_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub accepted: usize,
    pub rejected: usize,
    /// Decisions naming unknown, non-pending or incomplete records.
    pub ignored: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> UavError + '_ {
    move |source| UavError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<usize, UavError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut n = 0;
    for item in items {
        let line = serde_json::to_string(&item).map_err(|source| UavError::Json {
            path: path.to_path_buf(),
            line: n + 1,
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
        n += 1;
    }
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, UavError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| UavError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_records(records: &[VmcotRecord], path: &Path) -> Result<usize, UavError> {
    write_jsonl(records, path)
}

/// Writes pending, non-failed records with their sample context. Returns the line count.
pub fn export_review_queue(
    records: &[VmcotRecord],
    samples: &[MigSample],
    path: &Path,
) -> Result<usize, UavError> {
    let by_id: BTreeMap<&str, &MigSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let items = records
        .iter()
        .filter(|r| r.review_status == ReviewStatus::Pending && r.status == GenerationStatus::Complete)
        .map(|r| ReviewItem {
            sample: by_id.get(r.sample_id.as_str()).map(|s| (*s).clone()),
            record: r.clone(),
        });
    write_jsonl(items, path)
}

pub fn import_review_decisions(records: &mut [VmcotRecord], decisions: &[ReviewDecision]) -> ImportSummary {
    let mut summary = ImportSummary::default();
    let index: BTreeMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.clone(), i))
        .collect();
    for d in decisions {
        let Some(record) = index.get(&d.sample_id).map(|&i| &mut records[i]) else {
            summary.ignored.push(d.sample_id.clone());
            continue;
        };
        if record.review_status != ReviewStatus::Pending || record.status == GenerationStatus::Failed {
            summary.ignored.push(d.sample_id.clone());
            continue;
        }
        match d.decision {
            Decision::Accept if record.is_complete() => {
                record.self_assessment = Some(SelfAssessment {
                    verdict: Verdict::Pass,
                    rationale: "human review".into(),
                });
                record.review_status = ReviewStatus::Accepted;
                summary.accepted += 1;
            }
            Decision::Accept => {
                summary.ignored.push(d.sample_id.clone());
                continue;
            }
            Decision::Reject => {
                record.review_status = ReviewStatus::Rejected;
                summary.rejected += 1;
            }
        }
        if let Some(note) = &d.note {
            record.notes.push(format!("review: {note}"));
        }
    }
    summary
}
