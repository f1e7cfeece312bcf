//! Training objectives as functions from models and samples to scalar loss
//! nodes.
//!
//! All losses share one convention: the trainable policy is bound on the
//! graph as trainable leaves and every auxiliary model (reference, π⁺, π⁻)
//! as constants, so nothing but the policy can receive gradient.
//!
//! The token-level pieces follow the two-step recipe:
//!
//! 1. [`estimate_token_weights`] scores each target token with the clamped
//!    log-ratio of a contrastive pair, `w_t = exp(μ · clamp(log π⁺/π⁻, L, U))`.
//! 2. [`tkto_loss`] rewards each token by its log-ratio against the reference,
//!    `r_t = log π_θ(y_t) − log π_ref(y_t)`, centres it on a detached KL
//!    baseline `z_t`, maps it through the Kahneman-Tversky value
//!    `λ_D σ(β(r_t − z_t))` (desirable) or `λ_U σ(β(z_t − r_t))`
//!    (undesirable), and minimizes `−Σ_t w_t v_t` averaged over samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::data::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::model::{kl_rows, Bound, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub mu_desirable: f64,
    pub mu_undesirable: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            mu_desirable: 1.0,
            mu_undesirable: -1.0,
            clamp_lo: -2.0,
            clamp_hi: 2.0,
        }
    }
}

impl WeightConfig {
    /// Zero μ is accepted (it switches weighting off); a wrong sign is not.
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_lo <= self.clamp_hi) {
            return Err(Error::InvalidClamp {
                lo: self.clamp_lo,
                hi: self.clamp_hi,
            });
        }
        if !(self.mu_desirable >= 0.0) || !(self.mu_undesirable <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mu_desirable must be positive and mu_undesirable negative, got {} and {}",
                self.mu_desirable, self.mu_undesirable
            )));
        }
        Ok(())
    }

    pub fn mu(&self, label: Label) -> f64 {
        match label {
            Label::Desirable => self.mu_desirable,
            Label::Undesirable => self.mu_undesirable,
        }
    }

    /// Tight bounds every weight lies within.
    pub fn weight_bounds(&self) -> (f64, f64) {
        let mu = self.mu_desirable.abs().max(self.mu_undesirable.abs());
        let c = self.clamp_lo.abs().max(self.clamp_hi.abs());
        ((-mu * c).exp(), (mu * c).exp())
    }

    /// `exp(μ · clamp(log_ratio, L, U))`.
    pub fn weight(&self, log_ratio: f64, label: Label) -> f64 {
        (self.mu(label) * log_ratio.max(self.clamp_lo).min(self.clamp_hi)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Exact KL at every target position of every sample.
    #[default]
    PerPositionExact,
    /// One value per microbatch: the mean of all per-position KLs.
    MicrobatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TktoConfig {
    pub beta: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    pub baseline_mode: BaselineMode,
    /// Divide each sample's token sum by its length.
    #[serde(default)]
    pub normalize_by_length: bool,
}

impl Default for TktoConfig {
    fn default() -> Self {
        Self {
            beta: 0.10,
            lambda_d: 1.0,
            lambda_u: 1.0,
            baseline_mode: BaselineMode::PerPositionExact,
            normalize_by_length: false,
        }
    }
}

impl TktoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.lambda_d > 0.0) || !(self.lambda_u > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta, lambda_d and lambda_u must be positive, got {}, {}, {}",
                self.beta, self.lambda_d, self.lambda_u
            )));
        }
        Ok(())
    }

    pub fn lambda(&self, label: Label) -> f64 {
        match label {
            Label::Desirable => self.lambda_d,
            Label::Undesirable => self.lambda_u,
        }
    }

    /// Scalar value function.
    pub fn value(&self, reward: f64, baseline: f64, label: Label) -> f64 {
        match label {
            Label::Desirable => self.lambda_d * sigmoid(self.beta * (reward - baseline)),
            Label::Undesirable => self.lambda_u * sigmoid(self.beta * (baseline - reward)),
        }
    }
}

/// Per-sample token weights, aligned with target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeightTable {
    pub weights: Vec<Vec<f64>>,
    /// Digest of the π⁺ checkpoint the weights came from.
    pub pi_plus: String,
    /// Digest of the π⁻ checkpoint.
    pub pi_minus: String,
    pub config: Option<WeightConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightRecord {
    sample_index: usize,
    weights: Vec<f64>,
    pi_plus: String,
    pi_minus: String,
}

impl TokenWeightTable {
    /// All-ones table for the given target lengths.
    pub fn uniform(dataset: &Dataset) -> Self {
        Self {
            weights: dataset
                .samples
                .iter()
                .map(|s| vec![1.0; s.target.len()])
                .collect(),
            pi_plus: String::new(),
            pi_minus: String::new(),
            config: None,
        }
    }

    pub fn with_provenance(mut self, pi_plus: &str, pi_minus: &str) -> Self {
        self.pi_plus = pi_plus.to_string();
        self.pi_minus = pi_minus.to_string();
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn row(&self, sample_index: usize) -> Option<&[f64]> {
        self.weights.get(sample_index).map(Vec::as_slice)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut out = BufWriter::new(file);
        for (i, w) in self.weights.iter().enumerate() {
            let record = WeightRecord {
                sample_index: i,
                weights: w.clone(),
                pi_plus: self.pi_plus.clone(),
                pi_minus: self.pi_minus.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut table = TokenWeightTable {
            weights: Vec::new(),
            pi_plus: String::new(),
            pi_minus: String::new(),
            config: None,
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let jsonl = |message: String| Error::Jsonl {
                line: i + 1,
                message,
            };
            let r: WeightRecord = serde_json::from_str(&line).map_err(|e| jsonl(e.to_string()))?;
            if r.sample_index != table.weights.len() {
                return Err(jsonl(format!(
                    "sample_index {} out of order, expected {}",
                    r.sample_index,
                    table.weights.len()
                )));
            }
            if table.weights.is_empty() {
                table.pi_plus = r.pi_plus;
                table.pi_minus = r.pi_minus;
            } else if r.pi_plus != table.pi_plus || r.pi_minus != table.pi_minus {
                return Err(jsonl("provenance differs from earlier rows".into()));
            }
            table.weights.push(r.weights);
        }
        Ok(table)
    }
}

/// Reward, baseline and value of one target token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenValueRecord {
    pub reward: f64,
    pub baseline: f64,
    pub value: f64,
}

/// Graph nodes and side values for one sample scored by policy and reference.
#[derive(Debug, Clone)]
pub struct PairScores {
    /// Policy `log π_θ(y_t | ·)`, differentiable.
    pub policy_logprobs: Var,
    /// Reference `log π_ref(y_t | ·)`, constant.
    pub reference_logprobs: Var,
    /// Exact per-position `KL(π_θ ‖ π_ref)`; plain values, no gradient.
    pub kl: Vec<f64>,
}

/// Scores `sample` under both models on one graph.
pub fn score_pair(
    g: &mut Graph,
    policy: (&Model, &Bound),
    reference: (&Model, &Bound),
    sample: &Sample,
) -> Result<PairScores> {
    policy.0.check_compatible(reference.0)?;
    let sp = policy
        .0
        .score_target(g, policy.1, &sample.prompt, &sample.target)?;
    let sr = reference
        .0
        .score_target(g, reference.1, &sample.prompt, &sample.target)?;
    let kl = kl_rows(
        g.value(sp.rows),
        g.value(sr.rows),
        sp.first_row,
        sample.target.len(),
    );
    Ok(PairScores {
        policy_logprobs: sp.logprobs,
        reference_logprobs: sr.logprobs,
        kl,
    })
}

/// Mean negative log-likelihood over every target token of a desirable batch.
pub fn sft_loss(g: &mut Graph, policy: (&Model, &Bound), batch: &[&Sample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("SFT batch"));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for (index, s) in batch.iter().enumerate() {
        if !s.label.is_desirable() {
            return Err(Error::UndesirableInSft { index });
        }
        parts.push(
            policy
                .0
                .score_target(g, policy.1, &s.prompt, &s.target)?
                .logprobs,
        );
    }
    let all = g.concat(&parts);
    let mean = g.mean(all);
    Ok(g.neg(mean))
}

/// `−log σ(β[(w_θ − w_ref) − (l_θ − l_ref)])` for one pair of sequence
/// log-probabilities given as scalar nodes.
pub fn dpo_term(g: &mut Graph, chosen: (Var, Var), rejected: (Var, Var), beta: f64) -> Result<Var> {
    let chosen_ratio = g.sub(chosen.0, chosen.1)?;
    let rejected_ratio = g.sub(rejected.0, rejected.1)?;
    let margin = g.sub(chosen_ratio, rejected_ratio)?;
    let scaled = g.scale(margin, beta);
    let s = g.sigmoid(scaled);
    let l = g.log(s);
    Ok(g.neg(l))
}

/// Pairwise DPO loss averaged over `(desirable, undesirable)` pairs.
pub fn dpo_loss(
    g: &mut Graph,
    policy: (&Model, &Bound),
    reference: (&Model, &Bound),
    pairs: &[(&Sample, &Sample)],
    beta: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairing);
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (w, l) in pairs {
        let mut seq = |s: &Sample| -> Result<(Var, Var)> {
            let p = score_pair(g, policy, reference, s)?;
            Ok((g.sum(p.policy_logprobs), g.sum(p.reference_logprobs)))
        };
        let chosen = seq(w)?;
        let rejected = seq(l)?;
        terms.push(dpo_term(g, chosen, rejected, beta)?);
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}

/// `r_t = log π_θ(y_t | ·) − log π_ref(y_t | ·)`, differentiable in the policy.
pub fn token_rewards(g: &mut Graph, scores: &PairScores) -> Result<Var> {
    g.sub(scores.policy_logprobs, scores.reference_logprobs)
}

/// Reward vector for a single sample.
pub fn sample_token_rewards(
    g: &mut Graph,
    policy: (&Model, &Bound),
    reference: (&Model, &Bound),
    sample: &Sample,
) -> Result<Var> {
    let scores = score_pair(g, policy, reference, sample)?;
    token_rewards(g, &scores)
}

/// Applies the baseline mode to per-sample KL vectors.
pub fn baselines_from_kl(kl: Vec<Vec<f64>>, mode: BaselineMode) -> Vec<Vec<f64>> {
    match mode {
        BaselineMode::PerPositionExact => kl,
        BaselineMode::MicrobatchMean => {
            let count: usize = kl.iter().map(Vec::len).sum();
            let total: f64 = kl.iter().flatten().sum();
            let mean = if count == 0 {
                0.0
            } else {
                total / count as f64
            };
            kl.iter().map(|v| vec![mean; v.len()]).collect()
        }
    }
}

/// Detached KL baselines `z_t` for every sample of a microbatch.
pub fn token_baseline(
    policy: &Model,
    reference: &Model,
    microbatch: &[&Sample],
    mode: BaselineMode,
) -> Result<Vec<Vec<f64>>> {
    if microbatch.is_empty() {
        return Err(Error::Empty("microbatch"));
    }
    let kl = microbatch
        .iter()
        .map(|s| policy.per_position_kl(reference, &s.prompt, &s.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(baselines_from_kl(kl, mode))
}

/// Value nodes `v_t` for one sample's rewards, plus plain-value records.
/// The baseline enters as a constant.
pub fn token_values(
    g: &mut Graph,
    rewards: Var,
    baselines: &[f64],
    label: Label,
    config: &TktoConfig,
) -> Result<(Var, Vec<TokenValueRecord>)> {
    let n = g.value(rewards).len();
    if n != baselines.len() {
        return Err(Error::LengthMismatch {
            what: "rewards vs baselines",
            left: n,
            right: baselines.len(),
        });
    }
    let z = g.constant(Tensor::vector(baselines.to_vec()));
    let centred = match label {
        Label::Desirable => g.sub(rewards, z)?,
        Label::Undesirable => g.sub(z, rewards)?,
    };
    let scaled = g.scale(centred, config.beta);
    let s = g.sigmoid(scaled);
    let values = g.scale(s, config.lambda(label));
    let records = g
        .value(rewards)
        .data()
        .iter()
        .zip(baselines)
        .zip(g.value(values).data())
        .map(|((&reward, &baseline), &value)| TokenValueRecord {
            reward,
            baseline,
            value,
        })
        .collect();
    Ok((values, records))
}

/// Values for a whole microbatch, one label per sample.
pub fn batch_token_values(
    g: &mut Graph,
    rewards: &[Var],
    baselines: &[Vec<f64>],
    labels: &[Label],
    config: &TktoConfig,
) -> Result<Vec<(Var, Vec<TokenValueRecord>)>> {
    if rewards.len() != baselines.len() || rewards.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "rewards, baselines and labels",
            left: rewards.len(),
            right: baselines.len().min(labels.len()),
        });
    }
    rewards
        .iter()
        .zip(baselines)
        .zip(labels)
        .map(|((&r, z), &l)| token_values(g, r, z, l, config))
        .collect()
}

/// Sequence-level KTO: `mean_i (λ_y − v_i)` where `v_i` applies the value
/// function to the summed token reward against the summed baseline.
pub fn kto_loss(
    g: &mut Graph,
    policy: (&Model, &Bound),
    reference: (&Model, &Bound),
    microbatch: &[&Sample],
    config: &TktoConfig,
) -> Result<Var> {
    if microbatch.is_empty() {
        return Err(Error::Empty("microbatch"));
    }
    let mut rewards = Vec::with_capacity(microbatch.len());
    let mut kls = Vec::with_capacity(microbatch.len());
    for s in microbatch {
        let scores = score_pair(g, policy, reference, s)?;
        rewards.push(token_rewards(g, &scores)?);
        kls.push(scores.kl);
    }
    let baselines = baselines_from_kl(kls, config.baseline_mode);
    let mut terms = Vec::with_capacity(microbatch.len());
    for ((s, r), z) in microbatch.iter().zip(rewards).zip(&baselines) {
        let seq_reward = g.sum(r);
        let pooled = z.iter().sum::<f64>();
        terms.push(kto_term(g, seq_reward, pooled, s.label, config)?);
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}

/// `λ_y − v(r, z)` for a scalar sequence reward node.
pub fn kto_term(
    g: &mut Graph,
    seq_reward: Var,
    baseline: f64,
    label: Label,
    config: &TktoConfig,
) -> Result<Var> {
    let (v, _) = token_values(g, seq_reward, &[baseline], label, config)?;
    let v = g.sum(v);
    let lambda = g.constant(Tensor::scalar(config.lambda(label)));
    g.sub(lambda, v)
}

/// Contrastive token weights for every sample of `dataset`.
///
/// Runs without gradient; the returned weights are constants for the second
/// step. Provenance digests are left empty; see
/// [`TokenWeightTable::with_provenance`].
pub fn estimate_token_weights(
    pi_plus: &Model,
    pi_minus: &Model,
    dataset: &Dataset,
    config: &WeightConfig,
) -> Result<TokenWeightTable> {
    config.validate()?;
    pi_plus.check_compatible(pi_minus)?;
    let weights = dataset
        .samples
        .iter()
        .map(|s| {
            let plus = pi_plus.target_logprobs(&s.prompt, &s.target)?;
            let minus = pi_minus.target_logprobs(&s.prompt, &s.target)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| config.weight(p - m, s.label))
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(TokenWeightTable {
        weights,
        pi_plus: String::new(),
        pi_minus: String::new(),
        config: Some(*config),
    })
}

/// `−Σ_t w_t v_t` for one sample, optionally divided by its length.
pub fn tkto_term(g: &mut Graph, values: Var, weights: &[f64], normalize: bool) -> Result<Var> {
    let n = weights.len();
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let wv = g.mul(w, values)?;
    let total = g.sum(wv);
    let total = if normalize && n > 0 {
        g.scale(total, 1.0 / n as f64)
    } else {
        total
    };
    Ok(g.neg(total))
}

/// Token-level KTO loss over a microbatch of `(dataset index, sample)`.
pub fn tkto_loss(
    g: &mut Graph,
    policy: (&Model, &Bound),
    reference: (&Model, &Bound),
    microbatch: &[(usize, &Sample)],
    weights: &TokenWeightTable,
    config: &TktoConfig,
) -> Result<Var> {
    if microbatch.is_empty() {
        return Err(Error::Empty("microbatch"));
    }
    let mut rewards = Vec::with_capacity(microbatch.len());
    let mut kls = Vec::with_capacity(microbatch.len());
    let mut rows = Vec::with_capacity(microbatch.len());
    for &(index, s) in microbatch {
        let w = weights.row(index).ok_or(Error::WeightMisaligned {
            sample_index: index,
            expected: s.target.len(),
            found: 0,
        })?;
        if w.len() != s.target.len() {
            return Err(Error::WeightMisaligned {
                sample_index: index,
                expected: s.target.len(),
                found: w.len(),
            });
        }
        rows.push(w);
        let scores = score_pair(g, policy, reference, s)?;
        rewards.push(token_rewards(g, &scores)?);
        kls.push(scores.kl);
    }
    let baselines = baselines_from_kl(kls, config.baseline_mode);
    let mut terms = Vec::with_capacity(microbatch.len());
    for (((_, s), r), (z, w)) in microbatch
        .iter()
        .zip(rewards)
        .zip(baselines.iter().zip(rows))
    {
        let (values, _) = token_values(g, r, z, s.label, config)?;
        terms.push(tkto_term(g, values, w, config.normalize_by_length)?);
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}
