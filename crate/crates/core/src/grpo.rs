//! Group-relative advantages, clipped surrogate and KL regularization over
//! supplied per-token log-probability traces.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite log-probability ({0})")]
    NonFinite(f64),
    #[error("response {index}: trace lengths differ (new {new}, old {old}, ref {reference})")]
    TraceLength {
        index: usize,
        new: usize,
        old: usize,
        reference: usize,
    },
    #[error("response {0} has no tokens")]
    EmptyResponse(usize),
    #[error("response {index}: positive log-probability {value}")]
    PositiveLogprob { index: usize, value: f64 },
    #[error("response {0}: exact KL requested but token distributions are missing or misaligned")]
    MissingDistributions(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `min(ratio * A, clip(ratio) * A)`.
    #[default]
    Pessimistic,
    /// `clip(ratio) * A` alone.
    ClipOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    /// Per-token `rho - ln(rho) - 1` with `rho = pi_ref / pi_theta`.
    #[default]
    K3,
    /// Full categorical KL, using distributions carried in the trace.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub std_guard: f64,
    pub std_kind: StdKind,
    pub clip_mode: ClipMode,
    pub kl: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.05,
            std_guard: 1e-8,
            std_kind: StdKind::Population,
            clip_mode: ClipMode::Pessimistic,
            kl: KlEstimator::K3,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::Config(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(GrpoError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.std_guard.is_nan() || self.std_guard < 0.0 {
            return Err(GrpoError::Config("std_guard must be >= 0".into()));
        }
        Ok(())
    }
}

/// One sampled response with per-token log-probabilities under the current,
/// behaviour and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrace {
    pub reward: f64,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    /// Per-token categorical distributions of the current policy (exact KL only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_new: Option<Vec<Vec<f64>>>,
    /// Per-token categorical distributions of the reference policy (exact KL only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_ref: Option<Vec<Vec<f64>>>,
}

impl ResponseTrace {
    pub fn len(&self) -> usize {
        self.logp_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_new.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub query_id: String,
    pub responses: Vec<ResponseTrace>,
}

impl GroupRollout {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.responses.len() < 2 {
            return Err(GrpoError::GroupTooSmall(self.responses.len()));
        }
        for (index, r) in self.responses.iter().enumerate() {
            let (new, old, reference) = (r.logp_new.len(), r.logp_old.len(), r.logp_ref.len());
            if new != old || new != reference {
                return Err(GrpoError::TraceLength {
                    index,
                    new,
                    old,
                    reference,
                });
            }
            if new == 0 {
                return Err(GrpoError::EmptyResponse(index));
            }
            for &v in r.logp_new.iter().chain(&r.logp_old).chain(&r.logp_ref) {
                if !v.is_finite() {
                    return Err(GrpoError::NonFinite(v));
                }
                if v > 1e-12 {
                    return Err(GrpoError::PositiveLogprob { index, value: v });
                }
            }
            if !r.reward.is_finite() {
                return Err(GrpoError::NonFinite(r.reward));
            }
        }
        Ok(())
    }
}

/// Group-standardized advantages `(r_i - mean) / (std + guard)`.
pub fn advantages(rewards: &[f64], std_guard: f64, kind: StdKind) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let dof = match kind {
        StdKind::Population => g,
        StdKind::Sample => g - 1,
    };
    let std = (ss / dof as f64).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + std_guard)).collect())
}

/// `exp(logp_new - logp_old)`.
pub fn ratio(logp_new: f64, logp_old: f64) -> Result<f64, GrpoError> {
    for v in [logp_new, logp_old] {
        if !v.is_finite() {
            return Err(GrpoError::NonFinite(v));
        }
    }
    Ok((logp_new - logp_old).exp())
}

/// Pessimistic clipped surrogate `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// `clip(ratio, 1-eps, 1+eps) * A` without the pessimistic minimum.
pub fn clip_only_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps) * advantage
}

/// Per-token KL estimate `rho - ln(rho) - 1`, `rho = exp(logp_ref - logp_new)`.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    (d.exp_m1() - d).max(0.0)
}

/// `sum_k p_k ln(p_k / q_k)`; zero-probability entries of `p` contribute 0.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub objective: f64,
    /// Group mean of per-response mean surrogate terms.
    pub surrogate: f64,
    /// Group mean of per-response mean KL terms (before scaling by beta).
    pub kl: f64,
    pub advantages: Vec<f64>,
}

fn response_kl(
    index: usize,
    r: &ResponseTrace,
    estimator: KlEstimator,
) -> Result<Vec<f64>, GrpoError> {
    match estimator {
        KlEstimator::K3 => Ok(r
            .logp_new
            .iter()
            .zip(&r.logp_ref)
            .map(|(n, f)| kl_penalty(*n, *f))
            .collect()),
        KlEstimator::Exact => {
            let (Some(dn), Some(dr)) = (&r.dist_new, &r.dist_ref) else {
                return Err(GrpoError::MissingDistributions(index));
            };
            if dn.len() != r.len() || dr.len() != r.len() {
                return Err(GrpoError::MissingDistributions(index));
            }
            Ok(dn.iter().zip(dr).map(|(p, q)| categorical_kl(p, q)).collect())
        }
    }
}

pub fn objective_terms(rollout: &GroupRollout, config: &GrpoConfig) -> Result<ObjectiveTerms, GrpoError> {
    config.validate()?;
    rollout.validate()?;
    let adv = advantages(&rollout.rewards(), config.std_guard, config.std_kind)?;
    let g = rollout.responses.len() as f64;

    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (i, (r, a)) in rollout.responses.iter().zip(&adv).enumerate() {
        let len = r.len() as f64;
        let kls = response_kl(i, r, config.kl)?;
        let mut s_sum = 0.0;
        for (n, o) in r.logp_new.iter().zip(&r.logp_old) {
            let rho = ratio(*n, *o)?;
            s_sum += match config.clip_mode {
                ClipMode::Pessimistic => clipped_term(rho, *a, config.clip_eps),
                ClipMode::ClipOnly => clip_only_term(rho, *a, config.clip_eps),
            };
        }
        surrogate += s_sum / len;
        kl += kls.iter().sum::<f64>() / len;
    }
    surrogate /= g;
    kl /= g;
    Ok(ObjectiveTerms {
        objective: surrogate - config.beta * kl,
        surrogate,
        kl,
        advantages: adv,
    })
}

/// `(1/G) sum_i (1/|o_i|) sum_t [surrogate_{i,t} - beta * kl_{i,t}]`.
pub fn grpo_objective(rollout: &GroupRollout, config: &GrpoConfig) -> Result<f64, GrpoError> {
    objective_terms(rollout, config).map(|t| t.objective)
}

/// Reads one group per line; blank lines are skipped.
pub fn read_rollouts<R: BufRead>(reader: R) -> Result<Vec<GroupRollout>, GrpoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group = serde_json::from_str(&line).map_err(|source| GrpoError::Json {
            line: i + 1,
            source,
        })?;
        out.push(group);
    }
    Ok(out)
}

pub fn write_rollouts<W: std::io::Write>(mut w: W, groups: &[GroupRollout]) -> Result<(), GrpoError> {
    for g in groups {
        let line = serde_json::to_string(g).map_err(|source| GrpoError::Json { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(reward: f64, new: &[f64], old: &[f64], reference: &[f64]) -> ResponseTrace {
        ResponseTrace {
            reward,
            logp_new: new.to_vec(),
            logp_old: old.to_vec(),
            logp_ref: reference.to_vec(),
            dist_new: None,
            dist_ref: None,
        }
    }

    #[test]
    fn advantages_closed_form() {
        let a = advantages(&[0.0, 1.0, 2.0], 1e-8, StdKind::Population).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!((a[0] + 1.0 / s).abs() < 1e-7);
        assert!(a[1].abs() < 1e-15);
        assert!((a[2] - 1.224745).abs() < 1e-6);

        let a = advantages(&[0.0, 2.0], 0.0, StdKind::Population).unwrap();
        assert_eq!(a, vec![-1.0, 1.0]);
    }

    #[test]
    fn advantages_zero_variance_and_small_groups() {
        assert_eq!(advantages(&[3.0; 4], 1e-8, StdKind::Population).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            advantages(&[1.0], 1e-8, StdKind::Population),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn sample_std_option() {
        let a = advantages(&[0.0, 2.0], 0.0, StdKind::Sample).unwrap();
        let s = 2f64.sqrt();
        assert!((a[1] - 1.0 / s).abs() < 1e-15);
    }

    #[test]
    fn ratio_identities() {
        assert_eq!(ratio(-1.0, -1.0).unwrap(), 1.0);
        assert!((ratio(1.5f64.ln() - 2.0, -2.0).unwrap() - 1.5).abs() < 1e-12);
        assert!((ratio(-(2f64.ln()), 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(ratio(f64::NEG_INFINITY, 0.0).is_err());
    }

    #[test]
    fn clipped_term_hand_cases() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_term(1.0, 0.37, 0.2), 0.37);
        assert_eq!(clip_only_term(0.5, 1.0, 0.2), 0.8);
    }

    #[test]
    fn kl_penalty_values() {
        assert_eq!(kl_penalty(-0.7, -0.7), 0.0);
        // rho = 2
        assert!((kl_penalty(0.0 - 2f64.ln(), 0.0) - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((kl_penalty(-(2f64.ln()), 0.0) - 0.306853).abs() < 1e-6);
        // rho = 0.5
        assert!((kl_penalty(0.0, -(2f64.ln())) - 0.193147).abs() < 1e-6);
    }

    #[test]
    fn objective_two_point_symmetry() {
        let g = GroupRollout {
            query_id: "q".into(),
            responses: vec![
                trace(0.0, &[-0.3, -1.0], &[-0.3, -1.0], &[-0.3, -1.0]),
                trace(2.0, &[-0.5], &[-0.5], &[-0.5]),
            ],
        };
        assert!(grpo_objective(&g, &GrpoConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn objective_component_composition() {
        let g = GroupRollout {
            query_id: "q".into(),
            responses: vec![
                trace(2.0, &[1.5f64.ln() - 1.0], &[-1.0], &[-1.0]),
                trace(0.0, &[-0.2], &[-0.2], &[-0.2]),
            ],
        };
        let cfg = GrpoConfig {
            beta: 0.0,
            std_guard: 0.0,
            ..Default::default()
        };
        let v = grpo_objective(&g, &cfg).unwrap();
        assert!((v - 0.1).abs() < 1e-12, "{v}");
    }

    #[test]
    fn exact_kl_requires_distributions() {
        let mut g = GroupRollout {
            query_id: "q".into(),
            responses: vec![trace(1.0, &[-0.1], &[-0.1], &[-0.2]), trace(0.0, &[-0.1], &[-0.1], &[-0.2])],
        };
        let cfg = GrpoConfig {
            kl: KlEstimator::Exact,
            ..Default::default()
        };
        assert!(matches!(
            grpo_objective(&g, &cfg),
            Err(GrpoError::MissingDistributions(0))
        ));
        for r in &mut g.responses {
            r.dist_new = Some(vec![vec![0.5, 0.5]]);
            r.dist_ref = Some(vec![vec![0.25, 0.75]]);
        }
        let t = objective_terms(&g, &cfg).unwrap();
        let expected = 0.5 * (2f64).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((t.kl - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_rollouts() {
        let one = GroupRollout {
            query_id: "q".into(),
            responses: vec![trace(1.0, &[-0.1], &[-0.1], &[-0.1])],
        };
        assert!(matches!(one.validate(), Err(GrpoError::GroupTooSmall(1))));
        let ragged = GroupRollout {
            query_id: "q".into(),
            responses: vec![
                trace(1.0, &[-0.1, -0.2], &[-0.1], &[-0.1]),
                trace(0.0, &[-0.1], &[-0.1], &[-0.1]),
            ],
        };
        assert!(matches!(ragged.validate(), Err(GrpoError::TraceLength { .. })));
        let positive = GroupRollout {
            query_id: "q".into(),
            responses: vec![trace(1.0, &[0.5], &[-0.1], &[-0.1]), trace(0.0, &[-0.1], &[-0.1], &[-0.1])],
        };
        assert!(matches!(positive.validate(), Err(GrpoError::PositiveLogprob { .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let g = GroupRollout {
            query_id: "q".into(),
            responses: vec![trace(1.0, &[-0.1], &[-0.1], &[-0.1]), trace(0.0, &[-0.1], &[-0.1], &[-0.1])],
        };
        let mut buf = Vec::new();
        write_rollouts(&mut buf, &[g.clone(), g.clone()]).unwrap();
        let back = read_rollouts(buf.as_slice()).unwrap();
        assert_eq!(back, vec![g.clone(), g]);
    }
}
