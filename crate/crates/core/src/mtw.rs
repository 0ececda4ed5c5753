//! Modality-specific token weighting.
//!
//! For each modality `m` the corpus gives a token distribution `P_m`, and the
//! pooled counts of every other modality give `Q_m`. A token's contribution is
//! `P_m(t) * ln(P_m(t) / Q_m(t))`; contributions are log-transformed,
//! min-max normalized within the modality and mapped onto `[mu, 1]`. The
//! resulting weights scale a token-level negative log-likelihood.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Modality;
use crate::tokenize::Tokenizer;

#[derive(Debug, Error)]
pub enum MtwError {
    #[error("token weighting needs at least two modalities with tokens, found {0}")]
    TooFewModalities(usize),
    #[error("modality {0} has no tokens")]
    EmptyModality(Modality),
    #[error("token `{token}`: pooled probability is zero after smoothing")]
    ZeroReference { token: String },
    #[error("{weights} weights for {logprobs} log-probabilities")]
    LengthMismatch { weights: usize, logprobs: usize },
    #[error("empty token trace")]
    EmptyTrace,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtwConfig {
    /// Lower end of the weight range.
    pub mu: f64,
    /// Additive smoothing for the pooled distribution when it has zero counts.
    pub smoothing: f64,
    /// Floor applied to contributions before the log transform.
    pub contrib_floor: f64,
    /// Guard added to the min-max denominator.
    pub norm_guard: f64,
}

impl Default for MtwConfig {
    fn default() -> Self {
        Self {
            mu: 0.05,
            smoothing: 0.5,
            contrib_floor: 1e-8,
            norm_guard: 1e-8,
        }
    }
}

impl MtwConfig {
    fn validate(&self) -> Result<(), MtwError> {
        if !(0.0..1.0).contains(&self.mu) {
            return Err(MtwError::Config(format!("mu must lie in [0, 1), got {}", self.mu)));
        }
        if self.smoothing <= 0.0 || self.contrib_floor <= 0.0 || self.norm_guard <= 0.0 {
            return Err(MtwError::Config(
                "smoothing, contrib_floor and norm_guard must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Token counts per modality.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    counts: BTreeMap<Modality, BTreeMap<String, u64>>,
}

impl TokenCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tokens<I, S>(&mut self, modality: Modality, tokens: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let counts = self.counts.entry(modality).or_default();
        for t in tokens {
            *counts.entry(t.into()).or_insert(0) += 1;
        }
    }

    pub fn add_count(&mut self, modality: Modality, token: &str, count: u64) {
        if count > 0 {
            *self
                .counts
                .entry(modality)
                .or_default()
                .entry(token.to_string())
                .or_insert(0) += count;
        }
    }

    pub fn add_text(&mut self, modality: Modality, text: &str, tokenizer: &dyn Tokenizer) {
        self.add_tokens(modality, tokenizer.tokenize(text));
    }

    /// `f(t, m)`.
    pub fn count(&self, token: &str, modality: Modality) -> u64 {
        self.counts
            .get(&modality)
            .and_then(|c| c.get(token))
            .copied()
            .unwrap_or(0)
    }

    /// `N_m`.
    pub fn total(&self, modality: Modality) -> u64 {
        self.counts.get(&modality).map_or(0, |c| c.values().sum())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.counts
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(m, _)| *m)
            .collect()
    }

    /// Union vocabulary across modalities, sorted.
    pub fn vocabulary(&self) -> BTreeSet<&str> {
        self.counts
            .values()
            .flat_map(|c| c.keys().map(String::as_str))
            .collect()
    }

    pub fn tokens_of(&self, modality: Modality) -> impl Iterator<Item = (&str, u64)> {
        self.counts
            .get(&modality)
            .into_iter()
            .flat_map(|c| c.iter().map(|(t, n)| (t.as_str(), *n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDist {
    /// `P_m(t)`.
    pub p: f64,
    /// Pooled probability over the other modalities.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    /// Per modality, every token of the union vocabulary.
    pub per_modality: BTreeMap<Modality, BTreeMap<String, TokenDist>>,
    /// Whether smoothing was applied to the pooled distribution of a modality.
    pub smoothed: BTreeMap<Modality, bool>,
}

/// Builds `P_m` and the pooled `Q_m` over the union vocabulary.
///
/// `Q_m` is the plain pooled frequency when every vocabulary token occurs in
/// some other modality; otherwise every entry is smoothed additively as
/// `(c + eps) / (N + eps * |V|)`, so both distributions always sum to one.
pub fn build_distributions(corpus: &TokenCorpus, smoothing: f64) -> Result<Distributions, MtwError> {
    let modalities = corpus.modalities();
    if modalities.len() < 2 {
        return Err(MtwError::TooFewModalities(modalities.len()));
    }
    let vocab = corpus.vocabulary();
    let v = vocab.len() as f64;

    let mut per_modality = BTreeMap::new();
    let mut smoothed = BTreeMap::new();
    for &m in &modalities {
        let n_m = corpus.total(m) as f64;
        let others: Vec<Modality> = modalities.iter().copied().filter(|o| *o != m).collect();
        let pooled = |t: &str| -> u64 { others.iter().map(|o| corpus.count(t, *o)).sum() };
        let n_other: u64 = others.iter().map(|o| corpus.total(*o)).sum();
        let needs_smoothing = vocab.iter().any(|t| pooled(t) == 0);

        let mut table = BTreeMap::new();
        for &t in &vocab {
            let c = pooled(t) as f64;
            let q = if needs_smoothing {
                (c + smoothing) / (n_other as f64 + smoothing * v)
            } else {
                c / n_other as f64
            };
            let p = corpus.count(t, m) as f64 / n_m;
            table.insert(t.to_string(), TokenDist { p, q });
        }
        per_modality.insert(m, table);
        smoothed.insert(m, needs_smoothing);
    }
    Ok(Distributions {
        per_modality,
        smoothed,
    })
}

/// `p * ln(p / q)`, with the `p = 0` limit taken as 0.
pub fn contribution(p: f64, q: f64) -> Result<f64, MtwError> {
    if p <= 0.0 {
        return Ok(0.0);
    }
    if q <= 0.0 {
        return Err(MtwError::ZeroReference {
            token: String::new(),
        });
    }
    Ok(p * (p / q).ln())
}

/// Maps contributions of one modality onto `[mu, 1]`.
pub fn normalize_modality(
    contribs: &BTreeMap<String, f64>,
    config: &MtwConfig,
) -> Result<BTreeMap<String, f64>, MtwError> {
    let logs: BTreeMap<&str, f64> = contribs
        .iter()
        .map(|(t, c)| (t.as_str(), c.max(config.contrib_floor).ln()))
        .collect();
    let l_min = logs.values().copied().fold(f64::INFINITY, f64::min);
    let l_max = logs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = l_max - l_min + config.norm_guard;
    Ok(logs
        .into_iter()
        .map(|(t, l)| {
            let w = config.mu + (1.0 - config.mu) * (l - l_min) / denom;
            (t.to_string(), w.clamp(config.mu, 1.0))
        })
        .collect())
}

/// Normalizes every modality separately.
pub fn normalize_weights(
    contribs: &BTreeMap<Modality, BTreeMap<String, f64>>,
    config: &MtwConfig,
) -> Result<BTreeMap<Modality, BTreeMap<String, f64>>, MtwError> {
    config.validate()?;
    contribs
        .iter()
        .map(|(m, c)| {
            if c.is_empty() {
                return Err(MtwError::EmptyModality(*m));
            }
            Ok((*m, normalize_modality(c, config)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub p: f64,
    pub q: f64,
    pub contrib: f64,
    pub weight: f64,
}

/// One exported line of a weight table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub token: String,
    pub modality: Modality,
    pub p: f64,
    pub q: f64,
    pub contrib: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableFile {
    config: MtwConfig,
    rows: Vec<WeightRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeightTable {
    config: MtwConfig,
    entries: BTreeMap<Modality, BTreeMap<String, TokenWeight>>,
}

impl TokenWeightTable {
    /// Only tokens that occur in a modality receive an entry for it.
    pub fn build(corpus: &TokenCorpus, config: MtwConfig) -> Result<Self, MtwError> {
        config.validate()?;
        let dists = build_distributions(corpus, config.smoothing)?;
        let mut contribs: BTreeMap<Modality, BTreeMap<String, f64>> = BTreeMap::new();
        for (m, table) in &dists.per_modality {
            let mut per = BTreeMap::new();
            for (t, d) in table.iter().filter(|(_, d)| d.p > 0.0) {
                let c = contribution(d.p, d.q).map_err(|_| MtwError::ZeroReference {
                    token: t.clone(),
                })?;
                per.insert(t.clone(), c);
            }
            contribs.insert(*m, per);
        }
        let weights = normalize_weights(&contribs, &config)?;
        let entries = contribs
            .iter()
            .map(|(m, per)| {
                let rows = per
                    .iter()
                    .map(|(t, c)| {
                        let d = dists.per_modality[m][t];
                        let w = weights[m][t];
                        (
                            t.clone(),
                            TokenWeight {
                                p: d.p,
                                q: d.q,
                                contrib: *c,
                                weight: w,
                            },
                        )
                    })
                    .collect();
                (*m, rows)
            })
            .collect();
        Ok(Self { config, entries })
    }

    pub fn config(&self) -> &MtwConfig {
        &self.config
    }

    pub fn get(&self, modality: Modality, token: &str) -> Option<&TokenWeight> {
        self.entries.get(&modality)?.get(token)
    }

    /// Weight of `token` for `modality`; unseen tokens get `mu`.
    pub fn weight(&self, modality: Modality, token: &str) -> f64 {
        self.get(modality, token).map_or(self.config.mu, |e| e.weight)
    }

    pub fn weights_for<S: AsRef<str>>(&self, modality: Modality, tokens: &[S]) -> Vec<f64> {
        tokens
            .iter()
            .map(|t| self.weight(modality, t.as_ref()))
            .collect()
    }

    pub fn modality_entries(&self, modality: Modality) -> impl Iterator<Item = (&str, &TokenWeight)> {
        self.entries
            .get(&modality)
            .into_iter()
            .flat_map(|e| e.iter().map(|(t, w)| (t.as_str(), w)))
    }

    /// Rows sorted by modality, then token.
    pub fn rows(&self) -> Vec<WeightRow> {
        self.entries
            .iter()
            .flat_map(|(m, per)| {
                per.iter().map(move |(t, w)| WeightRow {
                    token: t.clone(),
                    modality: *m,
                    p: w.p,
                    q: w.q,
                    contrib: w.contrib,
                    weight: w.weight,
                })
            })
            .collect()
    }

    /// Highest-weighted tokens of a modality, ties broken by token.
    pub fn top(&self, modality: Modality, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = self
            .modality_entries(modality)
            .map(|(t, w)| (t.to_string(), w.weight))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    pub fn to_json(&self) -> Result<String, MtwError> {
        Ok(serde_json::to_string_pretty(&TableFile {
            config: self.config,
            rows: self.rows(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, MtwError> {
        let file: TableFile = serde_json::from_str(text)?;
        file.config.validate()?;
        let mut entries: BTreeMap<Modality, BTreeMap<String, TokenWeight>> = BTreeMap::new();
        for r in file.rows {
            entries.entry(r.modality).or_default().insert(
                r.token,
                TokenWeight {
                    p: r.p,
                    q: r.q,
                    contrib: r.contrib,
                    weight: r.weight,
                },
            );
        }
        Ok(Self {
            config: file.config,
            entries,
        })
    }

    /// Tab-separated `token, modality, contrib, weight`, sorted like [`Self::rows`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token\tmodality\tcontrib\tweight\n");
        for r in self.rows() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.token, r.modality, r.contrib, r.weight);
        }
        out
    }
}

/// `-sum_t w_t * logp_t`.
pub fn weighted_sft_loss(weights: &[f64], token_logprobs: &[f64]) -> Result<f64, MtwError> {
    if weights.len() != token_logprobs.len() {
        return Err(MtwError::LengthMismatch {
            weights: weights.len(),
            logprobs: token_logprobs.len(),
        });
    }
    if weights.is_empty() {
        return Err(MtwError::EmptyTrace);
    }
    Ok(-weights
        .iter()
        .zip(token_logprobs)
        .map(|(w, lp)| w * lp)
        .sum::<f64>())
}
