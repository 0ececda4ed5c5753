//! Desk-scale end-to-end check of the reward and GRPO machinery.
//!
//! A target box drifts across a 64x64 grid. A categorical policy picks a
//! cell and a size bin for every search image, a response format and an X
//! modality. Sampled choices are rendered to response text, parsed back and
//! scored with the real reward, and the policy is trained by gradient ascent
//! on the GRPO objective using its exact analytic gradient.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::video_seed;
use crate::eval::frame_accuracy;
use crate::geometry::{iou, BBox, GtSlot, Modality};
use crate::grpo::{
    advantages, categorical_kl, objective_terms, ClipMode, GroupRollout, GrpoConfig, GrpoError, KlEstimator,
    ResponseTrace,
};
use crate::response::{parse_response, THINK_CLOSE, THINK_OPEN};
use crate::reward::{frame_weights, total_reward, RewardBreakdown, RewardConfig, RewardContext, RewardError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid: f64,
    /// Cells per side of the center grid.
    pub cells: usize,
    /// Side lengths of the candidate boxes.
    pub size_bins: Vec<f64>,
    /// Frame offsets of the search keyframes from the template.
    pub keyframes: Vec<u32>,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-frame positional jitter, uniform in `[-noise, noise]`.
    pub noise: f64,
    pub rgb_degradation: f64,
    pub x_degradation: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid: 64.0,
            cells: 8,
            size_bins: vec![8.0, 14.0, 20.0],
            keyframes: vec![25, 50, 75],
            min_speed: 0.15,
            max_speed: 0.3,
            min_size: 10.0,
            max_size: 18.0,
            noise: 0.5,
            rgb_degradation: 0.3,
            x_degradation: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degradation {
    pub rgb: bool,
    pub x: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub config: EnvConfig,
    pub seed: u64,
    pub modality: Modality,
    pub template: BBox,
    /// One slot per search image, RGB and X interleaved.
    pub ground_truth: Vec<BBox>,
    pub intervals: Vec<u32>,
    /// Per search keyframe.
    pub degradation: Vec<Degradation>,
}

const REFERENCE_PHRASE: &str = "the target keeps its shape while it drifts across the frames";

impl SyntheticEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, SimError> {
        if config.cells == 0 || config.size_bins.is_empty() || config.keyframes.is_empty() {
            return Err(SimError::Config("cells, size_bins and keyframes must be non-empty".into()));
        }
        if config.max_size >= config.grid || config.min_size > config.max_size || config.min_speed > config.max_speed {
            return Err(SimError::Config("inconsistent size or speed range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modality = Modality::X_MODALITIES[rng.gen_range(0..3)];
        let w = rng.gen_range(config.min_size..=config.max_size);
        let h = rng.gen_range(config.min_size..=config.max_size);
        let speed = rng.gen_range(config.min_speed..=config.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
        let margin = 0.3 * config.grid;
        let (x0, y0) = (
            rng.gen_range(margin..config.grid - margin),
            rng.gen_range(margin..config.grid - margin),
        );

        let mut box_at = |frame: u32, jitter: bool| {
            let (mut cx, mut cy) = (x0 + vx * frame as f64, y0 + vy * frame as f64);
            if jitter {
                cx += rng.gen_range(-config.noise..=config.noise);
                cy += rng.gen_range(-config.noise..=config.noise);
            }
            let cx = cx.clamp(w / 2.0, config.grid - w / 2.0);
            let cy = cy.clamp(h / 2.0, config.grid - h / 2.0);
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("box inside grid")
        };
        let template = box_at(0, false);
        let mut ground_truth = Vec::new();
        let mut intervals = Vec::new();
        for &k in &config.keyframes {
            let b = box_at(k, true);
            ground_truth.extend([b, b]);
            intervals.extend([k, k]);
        }
        let degradation = config
            .keyframes
            .iter()
            .map(|_| Degradation {
                rgb: rng.gen_bool(config.rgb_degradation),
                x: rng.gen_bool(config.x_degradation),
            })
            .collect();
        Ok(Self {
            config,
            seed,
            modality,
            template,
            ground_truth,
            intervals,
            degradation,
        })
    }

    pub fn n(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn reference_think(&self) -> String {
        think_text(self.modality)
    }

    pub fn context(&self, modality_known: bool) -> RewardContext {
        RewardContext {
            intervals: self.intervals.clone(),
            ground_truth: self.ground_truth.iter().map(|b| GtSlot::Box(*b)).collect(),
            modality: self.modality,
            modality_known,
            reference: self.reference_think(),
        }
    }

    /// Box for a grid cell and size bin, clipped to the grid.
    pub fn cell_box(&self, cell: usize, size: usize) -> BBox {
        let k = self.config.cells;
        let step = self.config.grid / k as f64;
        let (cx, cy) = ((cell % k) as f64 + 0.5, (cell / k) as f64 + 0.5);
        let half = self.config.size_bins[size] / 2.0;
        let g = self.config.grid;
        BBox::new(
            (cx * step - half).max(0.0),
            (cy * step - half).max(0.0),
            (cx * step + half).min(g),
            (cy * step + half).min(g),
        )
        .expect("cell box inside grid")
    }

    /// Highest IoU any cell/size choice reaches on each frame.
    pub fn best_iou(&self) -> Vec<f64> {
        self.ground_truth
            .iter()
            .map(|gt| {
                (0..self.config.cells * self.config.cells)
                    .flat_map(|c| (0..self.config.size_bins.len()).map(move |s| (c, s)))
                    .map(|(c, s)| iou(&self.cell_box(c, s), gt))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Spatial reward of the best achievable prediction.
    pub fn best_st_reward(&self, delta: f64) -> Result<f64, SimError> {
        let w = frame_weights(&self.intervals, delta)?;
        Ok(w.iter().zip(self.best_iou()).map(|(w, i)| w * i).sum())
    }
}

fn think_text(m: Modality) -> String {
    format!("modality: {m} {REFERENCE_PHRASE}")
}

/// One categorical head per response token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub offset: usize,
    pub len: usize,
}

/// Token order: format, modality, then center and size for each search image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyLayout {
    pub heads: Vec<Head>,
    pub n_frames: usize,
}

pub const FORMAT_HEAD: usize = 0;
pub const MODALITY_HEAD: usize = 1;

impl PolicyLayout {
    pub fn new(n_frames: usize, cells: usize, sizes: usize) -> Self {
        let mut lens = vec![2, Modality::X_MODALITIES.len()];
        for _ in 0..n_frames {
            lens.extend([cells * cells, sizes]);
        }
        let mut offset = 0;
        let heads = lens
            .into_iter()
            .map(|len| {
                let h = Head { offset, len };
                offset += len;
                h
            })
            .collect();
        Self { heads, n_frames }
    }

    pub fn for_env(env: &SyntheticEnv) -> Self {
        Self::new(env.n(), env.config.cells, env.config.size_bins.len())
    }

    pub fn dim(&self) -> usize {
        self.heads.last().map_or(0, |h| h.offset + h.len)
    }

    pub fn tokens(&self) -> usize {
        self.heads.len()
    }

    pub fn center_head(&self, frame: usize) -> usize {
        2 + 2 * frame
    }

    pub fn size_head(&self, frame: usize) -> usize {
        3 + 2 * frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub layout: PolicyLayout,
    pub theta: Vec<f64>,
    pub temperature: f64,
}

impl Policy {
    pub fn uniform(layout: PolicyLayout, temperature: f64) -> Self {
        let theta = vec![0.0; layout.dim()];
        Self {
            layout,
            theta,
            temperature,
        }
    }

    pub fn log_probs(&self, head: usize) -> Vec<f64> {
        let h = self.layout.heads[head];
        let z: Vec<f64> = self.theta[h.offset..h.offset + h.len]
            .iter()
            .map(|t| t / self.temperature)
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.into_iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, head: usize) -> Vec<f64> {
        self.log_probs(head).into_iter().map(f64::exp).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.layout.tokens())
            .map(|head| {
                let p = self.probs(head);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            })
            .collect()
    }

    fn token_logps(&self, choices: &[usize]) -> Vec<f64> {
        choices
            .iter()
            .enumerate()
            .map(|(head, &c)| self.log_probs(head)[c])
            .collect()
    }

    /// Most likely choice per head.
    pub fn mode(&self) -> Vec<usize> {
        (0..self.layout.tokens())
            .map(|head| {
                let lp = self.log_probs(head);
                (0..lp.len()).fold(0, |best, i| if lp[i] > lp[best] { i } else { best })
            })
            .collect()
    }
}

/// Exact KL between two policies, summed over heads.
pub fn policy_kl(p: &Policy, q: &Policy) -> f64 {
    (0..p.layout.tokens())
        .map(|h| categorical_kl(&p.probs(h), &q.probs(h)))
        .sum()
}

fn boxes_of(env: &SyntheticEnv, layout: &PolicyLayout, choices: &[usize]) -> Vec<BBox> {
    (0..layout.n_frames)
        .map(|f| env.cell_box(choices[layout.center_head(f)], choices[layout.size_head(f)]))
        .collect()
}

/// Renders sampled choices as response text. Format choice 1 drops the think tags.
pub fn render_response(env: &SyntheticEnv, layout: &PolicyLayout, choices: &[usize], policy_format: bool) -> String {
    let think = think_text(Modality::X_MODALITIES[choices[MODALITY_HEAD]]);
    let boxes: Vec<[f64; 4]> = boxes_of(env, layout, choices).iter().map(BBox::to_array).collect();
    let answer = serde_json::to_string(&boxes).expect("finite boxes");
    if policy_format && choices[FORMAT_HEAD] == 1 {
        format!("{think} <answer>{answer}</answer>")
    } else {
        format!("{THINK_OPEN}{think}{THINK_CLOSE} <answer>{answer}</answer>")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    #[default]
    Must,
    /// Every response gets the same reward (no-signal control).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    /// Gradient steps per rollout; the rollout policy stays fixed meanwhile.
    pub updates_per_step: usize,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub reward_source: RewardSource,
    pub unknown_fraction: f64,
    /// Whether the policy chooses the response format.
    pub policy_format: bool,
    pub env: EnvConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            temperature: 1.0,
            learning_rate: 1.0,
            updates_per_step: 2,
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            reward_source: RewardSource::Must,
            unknown_fraction: 0.2,
            policy_format: true,
            env: EnvConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.grpo.validate()?;
        if self.group_size < 2 {
            return Err(SimError::Config(format!("group size must be >= 2, got {}", self.group_size)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 || !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(SimError::Config("temperature must be > 0 and learning rate >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.unknown_fraction) {
            return Err(SimError::Config("unknown_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A scored group plus the sampled choices the gradient needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRollout {
    pub group: GroupRollout,
    pub choices: Vec<Vec<usize>>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub texts: Vec<String>,
    pub modality_known: bool,
}

/// Samples `g` responses from `policy` and scores them. `logp_old` and
/// `logp_new` both come from `policy`, `logp_ref` from `reference`.
pub fn rollout_group(
    env: &SyntheticEnv,
    policy: &Policy,
    reference: &Policy,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimRollout, SimError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(cfg.group_size).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modality_known = !rng.gen_bool(cfg.unknown_fraction);
    let ctx = env.context(modality_known);
    let mut out = SimRollout {
        group: GroupRollout {
            query_id: format!("sim-{}-{seed}", env.seed),
            responses: Vec::with_capacity(cfg.group_size),
        },
        choices: Vec::new(),
        breakdowns: Vec::new(),
        texts: Vec::new(),
        modality_known,
    };
    for _ in 0..cfg.group_size {
        let choices = policy.sample(&mut rng);
        let text = render_response(env, &policy.layout, &choices, cfg.policy_format);
        let parsed = parse_response(&text, env.n());
        let b = total_reward(&parsed, &ctx, &cfg.reward)?;
        let reward = match cfg.reward_source {
            RewardSource::Must => b.total,
            RewardSource::Constant => 1.0,
        };
        let logp = policy.token_logps(&choices);
        out.group.responses.push(ResponseTrace {
            reward,
            logp_new: logp.clone(),
            logp_old: logp,
            logp_ref: reference.token_logps(&choices),
            dist_new: None,
            dist_ref: None,
        });
        out.choices.push(choices);
        out.breakdowns.push(b);
        out.texts.push(text);
    }
    if cfg.grpo.kl == KlEstimator::Exact {
        attach_distributions(&mut out.group, reference, |r| &mut r.dist_ref);
    }
    refresh(&mut out, policy, cfg);
    Ok(out)
}

fn attach_distributions(
    group: &mut GroupRollout,
    policy: &Policy,
    field: impl Fn(&mut ResponseTrace) -> &mut Option<Vec<Vec<f64>>>,
) {
    let dists: Vec<Vec<f64>> = (0..policy.layout.tokens()).map(|h| policy.probs(h)).collect();
    for r in &mut group.responses {
        *field(r) = Some(dists.clone());
    }
}

/// Recomputes the current-policy log-probabilities of the sampled tokens.
pub fn refresh(rollout: &mut SimRollout, policy: &Policy, cfg: &SimConfig) {
    for (r, choices) in rollout.group.responses.iter_mut().zip(&rollout.choices) {
        r.logp_new = policy.token_logps(choices);
    }
    if cfg.grpo.kl == KlEstimator::Exact {
        attach_distributions(&mut rollout.group, policy, |r| &mut r.dist_new);
    }
}

/// Gradient of the GRPO objective with respect to `policy.theta`, assuming
/// `rollout` was refreshed with `policy`.
pub fn objective_gradient(rollout: &SimRollout, policy: &Policy, reference: &Policy, cfg: &GrpoConfig) -> Result<Vec<f64>, SimError> {
    let group = &rollout.group;
    let adv = advantages(&group.rewards(), cfg.std_guard, cfg.std_kind)?;
    let g = group.responses.len() as f64;
    let layout = &policy.layout;
    let tau = policy.temperature;
    let probs: Vec<Vec<f64>> = (0..layout.tokens()).map(|h| policy.probs(h)).collect();
    let mut grad = vec![0.0; layout.dim()];

    // Exact KL does not depend on the sampled token, so every response adds
    // the same per-head term.
    if cfg.kl == KlEstimator::Exact && cfg.beta > 0.0 {
        for (h, head) in layout.heads.iter().enumerate() {
            let p = &probs[h];
            let lp = policy.log_probs(h);
            let lq = reference.log_probs(h);
            let kl = categorical_kl(p, &reference.probs(h));
            let scale = cfg.beta / (layout.tokens() as f64 * tau);
            for k in 0..head.len {
                grad[head.offset + k] -= scale * p[k] * (lp[k] - lq[k] - kl);
            }
        }
    }

    for ((r, choices), a) in group.responses.iter().zip(&rollout.choices).zip(&adv) {
        let scale = 1.0 / (g * r.len() as f64 * tau);
        for (t, &choice) in choices.iter().enumerate() {
            let rho = (r.logp_new[t] - r.logp_old[t]).exp();
            let lo = 1.0 - cfg.clip_eps;
            let hi = 1.0 + cfg.clip_eps;
            let surrogate = match cfg.clip_mode {
                ClipMode::Pessimistic => {
                    let active = if *a > 0.0 { rho <= hi } else { rho >= lo };
                    if active { rho * a } else { 0.0 }
                }
                ClipMode::ClipOnly => {
                    if (lo..=hi).contains(&rho) { rho * a } else { 0.0 }
                }
            };
            let kl = match cfg.kl {
                KlEstimator::K3 => -cfg.beta * (1.0 - (r.logp_ref[t] - r.logp_new[t]).exp()),
                KlEstimator::Exact => 0.0,
            };
            let coef = (surrogate + kl) * scale;
            if coef == 0.0 {
                continue;
            }
            let head = layout.heads[t];
            for (k, p) in probs[t].iter().enumerate() {
                let e = if k == choice { 1.0 } else { 0.0 };
                grad[head.offset + k] += coef * (e - p);
            }
        }
    }
    Ok(grad)
}

/// Per-step means; one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub r_st_mean: f64,
    pub r_mu_mean: f64,
    pub r_format_mean: f64,
    pub total_mean: f64,
    pub kl_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub trace: Vec<TraceRow>,
    pub policy: Policy,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    video_seed(seed, &format!("step-{step}"))
}

pub fn train(env: &SyntheticEnv, initial: &Policy, cfg: &SimConfig, steps: usize, seed: u64) -> Result<TrainOutput, SimError> {
    cfg.validate()?;
    if steps == 0 {
        return Err(SimError::Config("steps must be >= 1".into()));
    }
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rollout = rollout_group(env, &policy, &reference, cfg, step_seed(seed, step))?;
        let first = objective_terms(&rollout.group, &cfg.grpo)?;
        for _ in 0..cfg.updates_per_step {
            refresh(&mut rollout, &policy, cfg);
            let grad = objective_gradient(&rollout, &policy, &reference, &cfg.grpo)?;
            for (t, g) in policy.theta.iter_mut().zip(&grad) {
                *t += cfg.learning_rate * g;
            }
            if !policy.is_finite() {
                return Err(SimError::Diverged {
                    step,
                    what: "non-finite policy logits".into(),
                });
            }
        }
        let n = rollout.breakdowns.len() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| rollout.breakdowns.iter().map(f).sum::<f64>() / n;
        trace.push(TraceRow {
            step,
            r_st_mean: mean(|b| b.r_st),
            r_mu_mean: mean(|b| b.r_mu),
            r_format_mean: mean(|b| b.r_format),
            total_mean: mean(|b| b.total),
            kl_mean: first.kl,
        });
    }
    Ok(TrainOutput { trace, policy })
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Expected IoU with ground truth on each frame under the policy.
pub fn expected_iou(env: &SyntheticEnv, policy: &Policy) -> Vec<f64> {
    let l = &policy.layout;
    (0..l.n_frames)
        .map(|f| {
            let pc = policy.probs(l.center_head(f));
            let ps = policy.probs(l.size_head(f));
            let gt = &env.ground_truth[f];
            pc.iter()
                .enumerate()
                .flat_map(|(c, pcv)| ps.iter().enumerate().map(move |(s, psv)| (c, s, pcv * psv)))
                .map(|(c, s, w)| w * iou(&env.cell_box(c, s), gt))
                .sum()
        })
        .collect()
}

/// Mean expected IoU over the frames farthest from the template.
pub fn late_frame_iou(env: &SyntheticEnv, policy: &Policy) -> f64 {
    let max_dt = env.intervals.iter().copied().max().unwrap_or(0);
    let e = expected_iou(env, policy);
    let late: Vec<f64> = env
        .intervals
        .iter()
        .zip(e)
        .filter(|(dt, _)| **dt == max_dt)
        .map(|(_, v)| v)
        .collect();
    late.iter().sum::<f64>() / late.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// IoU of each prediction with its ground truth.
    pub per_frame_iou: Vec<f64>,
    /// IoU of each prediction with the template box.
    pub per_frame_template_iou: Vec<f64>,
    pub target_affinity: f64,
    pub template_affinity: f64,
    /// Predictions sit closer to the template than to the moving target.
    pub guessing: bool,
    pub acc_at_05: f64,
}

/// Compares predictions against the template box and the true target.
pub fn guessing_probe(env: &SyntheticEnv, preds: &[BBox]) -> ProbeReport {
    let per_frame_iou: Vec<f64> = preds.iter().zip(&env.ground_truth).map(|(p, g)| iou(p, g)).collect();
    let per_frame_template_iou: Vec<f64> = preds.iter().map(|p| iou(p, &env.template)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let target_affinity = mean(&per_frame_iou);
    let template_affinity = mean(&per_frame_template_iou);
    let gt: Vec<GtSlot> = env.ground_truth.iter().map(|b| GtSlot::Box(*b)).collect();
    let acc_at_05 = frame_accuracy(preds, &gt, 0.5).unwrap_or(0.0);
    ProbeReport {
        per_frame_iou,
        per_frame_template_iou,
        target_affinity,
        template_affinity,
        guessing: template_affinity > target_affinity,
        acc_at_05,
    }
}

/// Probe on the policy's most likely boxes.
pub fn probe_policy(env: &SyntheticEnv, policy: &Policy) -> ProbeReport {
    guessing_probe(env, &boxes_of(env, &policy.layout, &policy.mode()))
}

/// Repeats the template box on every frame.
pub fn template_locked(env: &SyntheticEnv) -> Vec<BBox> {
    vec![env.template; env.n()]
}

pub fn gt_locked(env: &SyntheticEnv) -> Vec<BBox> {
    env.ground_truth.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(seed: u64) -> SyntheticEnv {
        SyntheticEnv::new(EnvConfig::default(), seed).unwrap()
    }

    fn setup(seed: u64) -> (SyntheticEnv, Policy) {
        let e = env(seed);
        let p = Policy::uniform(PolicyLayout::for_env(&e), 1.0);
        (e, p)
    }

    #[test]
    fn env_is_deterministic_and_in_grid() {
        for seed in 0..50 {
            let e = env(seed);
            assert_eq!(e, env(seed));
            assert_eq!(e.intervals, vec![25, 25, 50, 50, 75, 75]);
            for b in e.ground_truth.iter().chain([&e.template]) {
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 64.0 && b.y2() <= 64.0);
            }
        }
    }

    #[test]
    fn distributions_normalize() {
        let (e, mut p) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in &mut p.theta {
            *t = rng.gen_range(-5.0..5.0);
        }
        for h in 0..p.layout.tokens() {
            assert!((p.probs(h).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.layout.tokens(), 2 + 2 * e.n());
    }

    #[test]
    fn uniform_rollout_is_finite_and_deterministic() {
        let (e, p) = setup(2);
        let cfg = SimConfig::default();
        let a = rollout_group(&e, &p, &p, &cfg, 9).unwrap();
        assert_eq!(a.group.responses.len(), 8);
        assert!(a.group.rewards().iter().all(|r| r.is_finite()));
        assert_eq!(a, rollout_group(&e, &p, &p, &cfg, 9).unwrap());
    }

    #[test]
    fn malformed_format_loses_think() {
        let (e, p) = setup(2);
        let mut choices = vec![0; p.layout.tokens()];
        choices[FORMAT_HEAD] = 1;
        let text = render_response(&e, &p.layout, &choices, true);
        let parsed = parse_response(&text, e.n());
        assert!(!parsed.well_formed);
        let b = total_reward(&parsed, &e.context(true), &RewardConfig::default()).unwrap();
        assert_eq!((b.r_format, b.r_mu), (0.0, 0.0));
    }

    #[test]
    fn concentrated_policy_reaches_best_reward() {
        let (e, mut p) = setup(4);
        let l = p.layout.clone();
        let mut set = |head: usize, k: usize| p.theta[l.heads[head].offset + k] = 60.0;
        set(FORMAT_HEAD, 0);
        set(MODALITY_HEAD, Modality::X_MODALITIES.iter().position(|m| *m == e.modality).unwrap());
        for f in 0..e.n() {
            let (c, s) = (0..64)
                .flat_map(|c| (0..3).map(move |s| (c, s)))
                .max_by(|a, b| {
                    iou(&e.cell_box(a.0, a.1), &e.ground_truth[f]).total_cmp(&iou(&e.cell_box(b.0, b.1), &e.ground_truth[f]))
                })
                .unwrap();
            set(l.center_head(f), c);
            set(l.size_head(f), s);
        }
        let r = rollout_group(&e, &p, &p, &SimConfig::default(), 1).unwrap();
        let best = e.best_st_reward(5.0).unwrap() + 2.0;
        for reward in r.group.rewards() {
            assert!((reward - best).abs() < 1e-9, "{reward} vs {best}");
        }
    }

    fn fd_check(kl: KlEstimator, clip_mode: ClipMode) {
        let (e, base) = setup(5);
        let cfg = SimConfig {
            grpo: GrpoConfig { kl, clip_mode, beta: 0.3, ..Default::default() },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut old = base.clone();
        for t in &mut old.theta {
            *t = rng.gen_range(-1.0..1.0);
        }
        let mut reference = base.clone();
        for t in &mut reference.theta {
            *t = rng.gen_range(-1.0..1.0);
        }
        let mut rollout = rollout_group(&e, &old, &reference, &cfg, 3).unwrap();
        let mut cur = old.clone();
        for t in &mut cur.theta {
            *t += rng.gen_range(-0.05..0.05);
        }
        let objective = |p: &Policy, r: &mut SimRollout| {
            refresh(r, p, &cfg);
            objective_terms(&r.group, &cfg.grpo).unwrap().objective
        };
        refresh(&mut rollout, &cur, &cfg);
        let grad = objective_gradient(&rollout, &cur, &reference, &cfg.grpo).unwrap();
        for _ in 0..10 {
            let dir: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let shifted = |s: f64| {
                let mut p = cur.clone();
                for (t, d) in p.theta.iter_mut().zip(&dir) {
                    *t += s * d;
                }
                p
            };
            let fd = (objective(&shifted(h), &mut rollout) - objective(&shifted(-h), &mut rollout)) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(KlEstimator::K3, ClipMode::Pessimistic);
        fd_check(KlEstimator::Exact, ClipMode::Pessimistic);
        fd_check(KlEstimator::K3, ClipMode::ClipOnly);
    }

    #[test]
    fn constant_reward_leaves_policy_unchanged() {
        let (e, p) = setup(6);
        let cfg = SimConfig { reward_source: RewardSource::Constant, ..Default::default() };
        let out = train(&e, &p, &cfg, 20, 1).unwrap();
        assert_eq!(out.policy.theta, p.theta);
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let (e, p) = setup(6);
        let cfg = SimConfig { learning_rate: 0.0, ..Default::default() };
        let out = train(&e, &p, &cfg, 20, 1).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.trace.iter().all(|r| r.kl_mean == 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let (e, p) = setup(7);
        let cfg = SimConfig::default();
        assert_eq!(train(&e, &p, &cfg, 30, 7).unwrap(), train(&e, &p, &cfg, 30, 7).unwrap());
    }

    #[test]
    fn larger_beta_stays_closer_to_reference() {
        let (e, p) = setup(8);
        let run = |beta: f64| {
            let cfg = SimConfig { grpo: GrpoConfig { beta, ..Default::default() }, ..Default::default() };
            policy_kl(&train(&e, &p, &cfg, 150, 3).unwrap().policy, &p)
        };
        assert!(run(10.0) < run(0.05));
    }

    #[test]
    fn oracle_probes() {
        let e = env(9);
        let t = guessing_probe(&e, &template_locked(&e));
        assert!(t.guessing);
        let g = guessing_probe(&e, &gt_locked(&e));
        assert!(!g.guessing);
        assert_eq!(g.acc_at_05, 1.0);
    }

    #[test]
    fn trace_csv_header() {
        let rows = [TraceRow { step: 0, r_st_mean: 0.5, r_mu_mean: 1.0, r_format_mean: 1.0, total_mean: 2.5, kl_mean: 0.0 }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,r_st_mean,r_mu_mean,r_format_mean,total_mean,kl_mean");
        assert_eq!(text.lines().count(), 2);
    }
}
