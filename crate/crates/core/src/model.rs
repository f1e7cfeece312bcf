//! A one-block causal transformer over a small integer vocabulary.
//!
//! The same [`Model`] type houses the trainable policy and every frozen
//! companion (reference, contrastive pair). Forward passes run on a caller
//! supplied [`Graph`] so several models can share one tape: the policy binds
//! its parameters as trainable leaves, frozen snapshots bind as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved end-of-sequence token.
pub const EOS: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 32,
            context_len: 24,
            num_heads: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.context_len == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size >= 2, embed_dim >= 1 and context_len >= 1 required".into(),
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.embed_dim
    }

    fn same_shape_as(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.embed_dim == other.embed_dim
            && self.context_len == other.context_len
            && self.num_heads == other.num_heads
    }
}

/// Parameter names in manifest (checkpoint) order.
pub const PARAM_NAMES: [&str; 18] = [
    "tok_emb",
    "pos_emb",
    "ln1_gain",
    "ln1_bias",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_out",
    "ln2_gain",
    "ln2_bias",
    "ff_in",
    "ff_in_bias",
    "ff_out",
    "ff_out_bias",
    "lnf_gain",
    "lnf_bias",
    "head",
    "head_bias",
];

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const LN1_G: usize = 2;
const LN1_B: usize = 3;
const ATTN_Q: usize = 4;
const ATTN_K: usize = 5;
const ATTN_V: usize = 6;
const ATTN_OUT: usize = 7;
const LN2_G: usize = 8;
const LN2_B: usize = 9;
const FF_IN: usize = 10;
const FF_IN_B: usize = 11;
const FF_OUT: usize = 12;
const FF_OUT_B: usize = 13;
const LNF_G: usize = 14;
const LNF_B: usize = 15;
const HEAD: usize = 16;
const HEAD_B: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    frozen: bool,
}

/// A model's parameters as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    /// Seeded initialization. The output projection starts at zero, so the
    /// initial policy is exactly uniform over the vocabulary.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, c, h) = (
            config.vocab_size,
            config.embed_dim,
            config.context_len,
            config.hidden_dim(),
        );
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| dist.sample(&mut rng)).collect(),
            )
            .expect("sized from shape")
        };
        let emb_std = 0.5;
        let w_std = 1.0 / (d as f64).sqrt();
        let params = vec![
            normal(&[v, d], emb_std),
            normal(&[c, d], emb_std),
            Tensor::full(&[d], 1.0),
            Tensor::zeros(&[d]),
            normal(&[d, d], w_std),
            normal(&[d, d], w_std),
            normal(&[d, d], w_std),
            normal(&[d, d], w_std),
            Tensor::full(&[d], 1.0),
            Tensor::zeros(&[d]),
            normal(&[d, h], w_std),
            Tensor::zeros(&[h]),
            normal(&[h, d], 1.0 / (h as f64).sqrt()),
            Tensor::zeros(&[d]),
            Tensor::full(&[d], 1.0),
            Tensor::zeros(&[d]),
            Tensor::zeros(&[d, v]),
            Tensor::zeros(&[v]),
        ];
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a model from named tensors in manifest order.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let template = Model::new(config.clone())?;
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (p, t)) in params.iter().zip(&template.params).enumerate() {
            if p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    PARAM_NAMES[i],
                    p.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        Ok(&mut self.params)
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Frozen deep copy; later training of `self` never touches it.
    pub fn snapshot(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            frozen: true,
        }
    }

    /// Trainable deep copy, used to start a run from a frozen warm start.
    pub fn thawed(&self) -> Model {
        Model {
            frozen: false,
            ..self.clone()
        }
    }

    /// Places the parameters on `g`; frozen models bind as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_as(g, !self.frozen)
    }

    /// Places the parameters on `g` as constants regardless of frozen state.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        self.bind_as(g, false)
    }

    fn bind_as(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        Bound { vars }
    }

    pub fn check_compatible(&self, other: &Model) -> Result<()> {
        if self.config.same_shape_as(&other.config) {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!(
                "{:?} vs {:?}",
                self.config, other.config
            )))
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                context_len: self.config.context_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Per-position log-distributions: row `t` is `log π(· | tokens[..=t])`.
    /// Output shape is `len × vocab_size`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let p = &bound.vars;
        let t = tokens.len();
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = d / heads;

        let positions: Vec<usize> = (0..t).collect();
        let tok = g.rows(p[TOK_EMB], tokens)?;
        let pos = g.rows(p[POS_EMB], &positions)?;
        let x = g.add(tok, pos)?;

        // attention
        let h = g.layer_norm(x, p[LN1_G], p[LN1_B])?;
        let q = g.matmul(h, p[ATTN_Q])?;
        let k = g.matmul(h, p[ATTN_K])?;
        let v = g.matmul(h, p[ATTN_V])?;
        let mut head_outputs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
            let masked = g.causal_mask(scores)?;
            let log_w = g.log_softmax(masked, 1)?;
            let w = g.exp(log_w);
            head_outputs.push(g.matmul(w, vh)?);
        }
        let attn = g.concat_cols(&head_outputs)?;
        let attn = g.matmul(attn, p[ATTN_OUT])?;
        let x = g.add(x, attn)?;

        // feed-forward with SiLU
        let h = g.layer_norm(x, p[LN2_G], p[LN2_B])?;
        let h = g.matmul(h, p[FF_IN])?;
        let h = g.add_row_bias(h, p[FF_IN_B])?;
        let gate = g.sigmoid(h);
        let h = g.mul(h, gate)?;
        let h = g.matmul(h, p[FF_OUT])?;
        let h = g.add_row_bias(h, p[FF_OUT_B])?;
        let x = g.add(x, h)?;

        let h = g.layer_norm(x, p[LNF_G], p[LNF_B])?;
        let logits = g.matmul(h, p[HEAD])?;
        let logits = g.add_row_bias(logits, p[HEAD_B])?;
        g.log_softmax(logits, 1)
    }

    /// Graph-free convenience wrapper around [`Model::forward`].
    pub fn forward_logprobs(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let out = self.forward(&mut g, &bound, tokens)?;
        Ok(g.value(out).clone())
    }

    /// `log π(y_t | x, y_<t)` for every target position, as a graph node,
    /// together with the full log-distribution rows used to score them.
    pub fn score_target(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prompt: &[usize],
        target: &[usize],
    ) -> Result<TargetScores> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let total = prompt.len() + target.len();
        if total > self.config.context_len {
            return Err(Error::SequenceTooLong {
                len: total,
                context_len: self.config.context_len,
            });
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        if let Some(&token) = target.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        let rows = self.forward(g, bound, &tokens)?;
        let first = prompt.len() - 1;
        let coords: Vec<(usize, usize)> = target
            .iter()
            .enumerate()
            .map(|(t, &y)| (first + t, y))
            .collect();
        let logprobs = g.pick(rows, &coords)?;
        Ok(TargetScores {
            rows,
            first_row: first,
            logprobs,
        })
    }

    /// Vector of `log π(y_t | x, y_<t)`; sums to `log π(y | x)`.
    pub fn target_logprobs(&self, prompt: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let scores = self.score_target(&mut g, &bound, prompt, target)?;
        Ok(g.value(scores.logprobs).data().to_vec())
    }

    /// Exact full-vocabulary `KL(self ‖ reference)` at each target context.
    /// Plain values: no gradient flows through the result.
    pub fn per_position_kl(
        &self,
        reference: &Model,
        prompt: &[usize],
        target: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_compatible(reference)?;
        let mut g = Graph::new();
        let (bm, bo) = (self.bind_constant(&mut g), reference.bind_constant(&mut g));
        let sm = self.score_target(&mut g, &bm, prompt, target)?;
        let so = reference.score_target(&mut g, &bo, prompt, target)?;
        Ok(kl_rows(
            g.value(sm.rows),
            g.value(so.rows),
            sm.first_row,
            target.len(),
        ))
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after emitting
    /// [`EOS`] or `max_len` tokens, or when the context is full.
    pub fn greedy_decode(&self, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len && tokens.len() < self.config.context_len {
            let rows = self.forward_logprobs(&tokens)?;
            let next = argmax(rows.row(rows.rows() - 1));
            out.push(next);
            tokens.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// Result of scoring a target continuation on a graph.
#[derive(Debug, Clone, Copy)]
pub struct TargetScores {
    /// Full `len × vocab` log-distribution node.
    pub rows: Var,
    /// Row index predicting the first target token.
    pub first_row: usize,
    /// 1-D node of per-token target log-probabilities.
    pub logprobs: Var,
}

/// KL divergence between matching rows of two log-distribution matrices.
pub fn kl_rows(p: &Tensor, q: &Tensor, first_row: usize, count: usize) -> Vec<f64> {
    (first_row..first_row + count)
        .map(|r| {
            p.row(r)
                .iter()
                .zip(q.row(r))
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_head(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.5).unwrap();
        for p in model.params_mut().unwrap() {
            for v in p.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let rows = m.forward_logprobs(&[1, 7, 9, 3]).unwrap();
        assert_eq!(rows.shape(), &[4, 32]);
        for &v in rows.data() {
            assert_relative_eq!(v, -(32f64).ln(), epsilon = 1e-12);
        }
        let lp = m.target_logprobs(&[1, 7], &[4, 5, 6]).unwrap();
        assert_eq!(lp.len(), 3);
        for v in lp {
            assert_relative_eq!(v, -(32f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        random_head(&mut m, 3);
        let rows = m.forward_logprobs(&[2, 8, 9, 10, 11, 3, 4]).unwrap();
        for r in 0..rows.rows() {
            let s: f64 = rows.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causality() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        random_head(&mut m, 5);
        let a = m.forward_logprobs(&[1, 10, 11, 12, 13, 3]).unwrap();
        let b = m.forward_logprobs(&[1, 10, 11, 20, 13, 3]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn input_errors() {
        let m = Model::new(ModelConfig::default()).unwrap();
        assert!(matches!(
            m.forward_logprobs(&[40]),
            Err(Error::TokenOutOfRange { token: 40, .. })
        ));
        assert!(matches!(
            m.forward_logprobs(&[1; 25]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(m.target_logprobs(&[1; 20], &[1; 5]).is_err());
        assert!(Model::new(ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        })
        .is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::new(ModelConfig::default()).unwrap();
        let b = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn kl_against_self_is_zero() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        random_head(&mut m, 9);
        let kl = m
            .per_position_kl(&m.snapshot(), &[1, 6, 3], &[4, 6, 0])
            .unwrap();
        assert_eq!(kl, vec![0.0; 3]);
    }

    #[test]
    fn kl_two_symbol_closed_form() {
        let p = Tensor::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let q = Tensor::matrix(1, 2, vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let kl = kl_rows(&p, &q, 0, 1)[0];
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_relative_eq!(kl, expected, epsilon = 1e-15);
        assert_relative_eq!(kl, 0.143_841_036_225_890_3, epsilon = 1e-12);
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn decode_uniform_model_emits_eos() {
        // all ties → token 0 → stops immediately
        let m = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(m.greedy_decode(&[1, 2], 5).unwrap(), vec![EOS]);
    }

    #[test]
    fn decode_forced_delta() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        m.params_mut().unwrap()[HEAD_B].data_mut()[7] = 50.0;
        let out = m.greedy_decode(&[1, 2], 5).unwrap();
        assert_eq!(out, vec![7; 5]);
        assert_eq!(out, m.greedy_decode(&[1, 2], 5).unwrap());
    }

    #[test]
    fn frozen_snapshot_rejects_updates() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let mut s = m.snapshot();
        assert!(s.is_frozen());
        assert!(matches!(s.params_mut(), Err(Error::FrozenModel)));
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        assert!(!g.requires_grad(b.vars()[0]));
    }
}
