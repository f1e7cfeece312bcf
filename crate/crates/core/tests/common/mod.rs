//! Shared fixtures: random small models and samples, finite-difference
//! checks, and direct-arithmetic oracles for the objectives.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tkto_core::autodiff::Graph;
use tkto_core::data::{Label, Sample};
use tkto_core::model::{Model, ModelConfig};
use tkto_core::objectives::{
    baselines_from_kl, dpo_loss, kto_loss, kto_term, score_pair, sft_loss, tkto_loss, tkto_term,
    token_rewards, token_values, BaselineMode, TktoConfig, TokenWeightTable,
};
use tkto_core::tensor::Tensor;
use tkto_core::Var;

pub const INSTANCES: usize = 20;
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        embed_dim: 8,
        context_len: 12,
        num_heads: 2,
        seed: 0,
    }
}

/// Seeded model with every parameter jittered, so no gradient is trivially
/// zero (the output head starts at zero otherwise).
pub fn random_model(config: &ModelConfig, seed: u64, frozen: bool) -> Model {
    let base = Model::new(ModelConfig {
        seed,
        ..config.clone()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let params = base
        .params()
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x += noise.sample(&mut rng));
            t
        })
        .collect();
    Model::from_parts(base.config().clone(), params, frozen).unwrap()
}

pub fn random_sample(rng: &mut ChaCha8Rng, config: &ModelConfig, label: Label) -> Sample {
    let p = rng.gen_range(1..=4);
    let t = rng.gen_range(1..=4);
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(0..config.vocab_size);
    Sample::new(
        (0..p).map(|_| tok(rng)).collect(),
        (0..t).map(|_| tok(rng)).collect(),
        label,
    )
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs() / 1e-6
    } else {
        (a - b).abs() / scale
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Worst relative error between the tape gradient of `sum(R ⊙ f(inputs))`
/// and central differences, for a random constant `R`.
pub fn fd_check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let r = random_tensor(rng, &out_shape, -1.0, 1.0);
    let eval = |inputs: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
    };
    let (_, analytic) = eval(&inputs, true);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

pub type Check = fn(u64) -> f64;

macro_rules! unary_check {
    ($name:literal, $lo:expr, $hi:expr, $op:ident) => {
        ($name, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c], $lo, $hi);
            fd_check(&mut rng, vec![x], &|g, v| g.$op(v[0]))
        })
    };
}

macro_rules! binary_check {
    ($name:literal, $op:ident, $broadcast:expr) => {
        ($name, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let a = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            let b = if $broadcast {
                random_tensor(&mut rng, &[], -2.0, 2.0)
            } else {
                random_tensor(&mut rng, &[r, c], -2.0, 2.0)
            };
            fd_check(&mut rng, vec![a, b], &|g, v| g.$op(v[0], v[1]).unwrap())
        })
    };
}

/// Every differentiable tape operation.
pub fn op_checks() -> Vec<(&'static str, Check)> {
    vec![
        unary_check!("neg", -2.0, 2.0, neg),
        unary_check!("exp", -2.0, 2.0, exp),
        unary_check!("log", 0.2, 3.0, log),
        unary_check!("sigmoid", -4.0, 4.0, sigmoid),
        unary_check!("sum", -2.0, 2.0, sum),
        unary_check!("mean", -2.0, 2.0, mean),
        binary_check!("add", add, false),
        binary_check!("sub", sub, false),
        binary_check!("mul", mul, false),
        binary_check!("add_scalar", add, true),
        binary_check!("sub_scalar", sub, true),
        binary_check!("mul_scalar", mul, true),
        ("scale", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let f = rng.gen_range(-3.0..3.0);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            fd_check(&mut rng, vec![x], &move |g, v| g.scale(v[0], f))
        }),
        ("matmul", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, k) = dims(&mut rng);
            let n = rng.gen_range(1..=4);
            let a = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
            let b = random_tensor(&mut rng, &[k, n], -2.0, 2.0);
            fd_check(&mut rng, vec![a, b], &|g, v| g.matmul(v[0], v[1]).unwrap())
        }),
        ("transpose", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            fd_check(&mut rng, vec![x], &|g, v| g.transpose(v[0]).unwrap())
        }),
        ("log_softmax_rows", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c + 1], -3.0, 3.0);
            fd_check(&mut rng, vec![x], &|g, v| g.log_softmax(v[0], 1).unwrap())
        }),
        ("log_softmax_cols", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r + 1, c], -3.0, 3.0);
            fd_check(&mut rng, vec![x], &|g, v| g.log_softmax(v[0], 0).unwrap())
        }),
        ("clamp", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            // keep clear of the kinks, where the derivative is one-sided
            let x = random_tensor(&mut rng, &[r, c], -3.0, 3.0).map(|x| {
                if (x + 1.0).abs() < 1e-3 || (x - 1.5).abs() < 1e-3 {
                    x + 0.01
                } else {
                    x
                }
            });
            fd_check(&mut rng, vec![x], &|g, v| g.clamp(v[0], -1.0, 1.5).unwrap())
        }),
        ("rows", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
            let ids: Vec<usize> = (0..rng.gen_range(1..=6))
                .map(|_| rng.gen_range(0..5))
                .collect();
            fd_check(&mut rng, vec![table], &move |g, v| {
                g.rows(v[0], &ids).unwrap()
            })
        }),
        ("gather", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            let idx: Vec<usize> = (0..rng.gen_range(1..=6))
                .map(|_| rng.gen_range(0..r * c))
                .collect();
            fd_check(&mut rng, vec![x], &move |g, v| {
                g.gather(v[0], &idx).unwrap()
            })
        }),
        ("pick", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            let coords: Vec<(usize, usize)> = (0..rng.gen_range(1..=5))
                .map(|_| (rng.gen_range(0..r), rng.gen_range(0..c)))
                .collect();
            fd_check(&mut rng, vec![x], &move |g, v| {
                g.pick(v[0], &coords).unwrap()
            })
        }),
        ("slice_cols", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.gen_range(1..=4);
            let c = rng.gen_range(2..=5);
            let start = rng.gen_range(0..c);
            let width = rng.gen_range(1..=c - start);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            fd_check(&mut rng, vec![x], &move |g, v| {
                g.slice_cols(v[0], start, width).unwrap()
            })
        }),
        ("concat_cols", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.gen_range(1..=4);
            let parts: Vec<Tensor> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    random_tensor(&mut rng, &[r, c], -2.0, 2.0)
                })
                .collect();
            fd_check(&mut rng, parts, &|g, v| g.concat_cols(v).unwrap())
        }),
        ("concat", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let (r, c) = dims(&mut rng);
                    random_tensor(&mut rng, &[r, c], -2.0, 2.0)
                })
                .collect();
            fd_check(&mut rng, parts, &|g, v| g.concat(v))
        }),
        ("add_row_bias", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = dims(&mut rng);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            let b = random_tensor(&mut rng, &[c], -2.0, 2.0);
            fd_check(&mut rng, vec![x, b], &|g, v| {
                g.add_row_bias(v[0], v[1]).unwrap()
            })
        }),
        ("layer_norm", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.gen_range(1..=4);
            let c = rng.gen_range(2..=5);
            let x = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
            let gamma = random_tensor(&mut rng, &[c], 0.5, 1.5);
            let beta = random_tensor(&mut rng, &[c], -0.5, 0.5);
            fd_check(&mut rng, vec![x, gamma, beta], &|g, v| {
                g.layer_norm(v[0], v[1], v[2]).unwrap()
            })
        }),
        ("causal_mask_softmax", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=4);
            let x = random_tensor(&mut rng, &[n, n], -2.0, 2.0);
            fd_check(&mut rng, vec![x], &|g, v| {
                let m = g.causal_mask(v[0]).unwrap();
                let l = g.log_softmax(m, 1).unwrap();
                g.exp(l)
            })
        }),
    ]
}

// ----------------------------------------------------------- loss checks

struct LossFixture {
    policy: Model,
    reference: Model,
    samples: Vec<Sample>,
    weights: TokenWeightTable,
    config: TktoConfig,
    baselines: Vec<Vec<f64>>,
}

impl LossFixture {
    fn new(seed: u64) -> Self {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let policy = random_model(&config, seed * 2 + 1, false);
        let reference = random_model(&config, seed * 2 + 2, true);
        let n = rng.gen_range(2..=4);
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let label = if (i + seed as usize) % 2 == 0 {
                    Label::Desirable
                } else {
                    Label::Undesirable
                };
                random_sample(&mut rng, &config, label)
            })
            .collect();
        let weights = TokenWeightTable {
            weights: samples
                .iter()
                .map(|s| {
                    (0..s.target.len())
                        .map(|_| rng.gen_range(0.1..7.4))
                        .collect()
                })
                .collect(),
            pi_plus: String::new(),
            pi_minus: String::new(),
            config: None,
        };
        let tk = TktoConfig {
            beta: rng.gen_range(0.05..1.5),
            lambda_d: rng.gen_range(0.5..1.5),
            lambda_u: rng.gen_range(0.5..1.5),
            baseline_mode: if seed % 2 == 0 {
                BaselineMode::PerPositionExact
            } else {
                BaselineMode::MicrobatchMean
            },
            normalize_by_length: seed % 3 == 0,
        };
        let kl = samples
            .iter()
            .map(|s| {
                policy
                    .per_position_kl(&reference, &s.prompt, &s.target)
                    .unwrap()
            })
            .collect();
        let baselines = baselines_from_kl(kl, tk.baseline_mode);
        Self {
            policy,
            reference,
            samples,
            weights,
            config: tk,
            baselines,
        }
    }
}

#[derive(Clone, Copy)]
enum LossKind {
    Sft,
    Dpo,
    Kto,
    Tkto,
}

/// The loss with the KL baseline pinned to its value at the fixture's
/// policy: the function whose gradient the tape is meant to compute.
fn pinned_loss(fx: &LossFixture, policy: &Model, kind: LossKind, g: &mut Graph) -> (Var, Vec<Var>) {
    let pb = policy.bind(g);
    let rb = fx.reference.bind_constant(g);
    let pol = (policy, &pb);
    let refm = (&fx.reference, &rb);
    let loss = match kind {
        LossKind::Sft => {
            let batch: Vec<Sample> = fx
                .samples
                .iter()
                .map(|s| Sample::new(s.prompt.clone(), s.target.clone(), Label::Desirable))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            sft_loss(g, pol, &refs).unwrap()
        }
        LossKind::Dpo => {
            let pairs: Vec<(&Sample, &Sample)> =
                fx.samples.windows(2).map(|w| (&w[0], &w[1])).collect();
            dpo_loss(g, pol, refm, &pairs, fx.config.beta).unwrap()
        }
        LossKind::Kto | LossKind::Tkto => {
            let mut terms = Vec::new();
            for (i, s) in fx.samples.iter().enumerate() {
                let scores = score_pair(g, pol, refm, s).unwrap();
                let r = token_rewards(g, &scores).unwrap();
                let z = &fx.baselines[i];
                let term = match kind {
                    LossKind::Kto => {
                        let seq = g.sum(r);
                        kto_term(g, seq, z.iter().sum(), s.label, &fx.config).unwrap()
                    }
                    _ => {
                        let (v, _) = token_values(g, r, z, s.label, &fx.config).unwrap();
                        tkto_term(
                            g,
                            v,
                            fx.weights.row(i).unwrap(),
                            fx.config.normalize_by_length,
                        )
                        .unwrap()
                    }
                };
                terms.push(term);
            }
            let all = g.concat(&terms);
            g.mean(all)
        }
    };
    (loss, pb.vars().to_vec())
}

/// The library loss as training calls it, baseline computed on the fly.
fn library_loss(fx: &LossFixture, kind: LossKind, g: &mut Graph) -> (Var, Vec<Var>) {
    let pb = fx.policy.bind(g);
    let rb = fx.reference.bind_constant(g);
    let pol = (&fx.policy, &pb);
    let refm = (&fx.reference, &rb);
    let batch: Vec<&Sample> = fx.samples.iter().collect();
    let loss = match kind {
        LossKind::Kto => kto_loss(g, pol, refm, &batch, &fx.config).unwrap(),
        LossKind::Tkto => {
            let indexed: Vec<(usize, &Sample)> = batch.iter().copied().enumerate().collect();
            tkto_loss(g, pol, refm, &indexed, &fx.weights, &fx.config).unwrap()
        }
        _ => return pinned_loss(fx, &fx.policy, kind, g),
    };
    (loss, pb.vars().to_vec())
}

fn loss_check(seed: u64, kind: LossKind) -> f64 {
    let fx = LossFixture::new(seed);
    let mut g = Graph::new();
    let (loss, vars) = pinned_loss(&fx, &fx.policy, kind, &mut g);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    // the library entry point must agree with the pinned form at θ₀
    let mut g2 = Graph::new();
    let (lib, lib_vars) = library_loss(&fx, kind, &mut g2);
    let mut worst = rel_err(g.value(loss).item(), g2.value(lib).item());
    g2.backward(lib).unwrap();
    for (a, &v) in analytic.iter().zip(&lib_vars) {
        for (x, y) in a.data().iter().zip(g2.grad_or_zeros(v).data()) {
            worst = worst.max(rel_err(*x, *y));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    let value_at = |params: Vec<Tensor>| {
        let m = Model::from_parts(fx.policy.config().clone(), params, false).unwrap();
        let mut g = Graph::new();
        let (l, _) = pinned_loss(&fx, &m, kind, &mut g);
        g.value(l).item()
    };
    for _ in 0..16 {
        let p = rng.gen_range(0..analytic.len());
        let j = rng.gen_range(0..analytic[p].len());
        let mut plus = fx.policy.params().to_vec();
        plus[p].data_mut()[j] += FD_STEP;
        let mut minus = fx.policy.params().to_vec();
        minus[p].data_mut()[j] -= FD_STEP;
        let numeric = (value_at(plus) - value_at(minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[p].data()[j], numeric));
    }
    worst
}

pub fn loss_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("sft_loss", |s| loss_check(s, LossKind::Sft)),
        ("dpo_loss", |s| loss_check(s, LossKind::Dpo)),
        ("kto_loss", |s| loss_check(s, LossKind::Kto)),
        ("tkto_loss", |s| loss_check(s, LossKind::Tkto)),
    ]
}

// --------------------------------------------------------------- oracles

pub fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn oracle_weight(log_ratio: f64, mu: f64, lo: f64, hi: f64) -> f64 {
    (mu * log_ratio.max(lo).min(hi)).exp()
}

pub fn oracle_value(r: f64, z: f64, label: Label, cfg: &TktoConfig) -> f64 {
    match label {
        Label::Desirable => cfg.lambda_d * oracle_sigmoid(cfg.beta * (r - z)),
        Label::Undesirable => cfg.lambda_u * oracle_sigmoid(cfg.beta * (z - r)),
    }
}

pub fn oracle_dpo(margins: &[f64], beta: f64) -> f64 {
    margins
        .iter()
        .map(|m| -oracle_sigmoid(beta * m).ln())
        .sum::<f64>()
        / margins.len() as f64
}

/// Plain per-token quantities of a batch, computed outside the tape.
pub struct Oracle {
    policy_lp: Vec<Vec<f64>>,
    reference_lp: Vec<Vec<f64>>,
    baselines: Vec<Vec<f64>>,
}

impl Oracle {
    pub fn new(policy: &Model, reference: &Model, samples: &[Sample], mode: BaselineMode) -> Self {
        let lp = |m: &Model| -> Vec<Vec<f64>> {
            samples
                .iter()
                .map(|s| m.target_logprobs(&s.prompt, &s.target).unwrap())
                .collect()
        };
        let kl: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                policy
                    .per_position_kl(reference, &s.prompt, &s.target)
                    .unwrap()
            })
            .collect();
        let baselines = match mode {
            BaselineMode::PerPositionExact => kl,
            BaselineMode::MicrobatchMean => {
                let n: usize = kl.iter().map(Vec::len).sum();
                let mean = kl.iter().flatten().sum::<f64>() / n as f64;
                kl.iter().map(|v| vec![mean; v.len()]).collect()
            }
        };
        Self {
            policy_lp: lp(policy),
            reference_lp: lp(reference),
            baselines,
        }
    }

    fn rewards(&self, i: usize) -> Vec<f64> {
        self.policy_lp[i]
            .iter()
            .zip(&self.reference_lp[i])
            .map(|(p, r)| p - r)
            .collect()
    }

    pub fn seq_reward(&self, i: usize) -> f64 {
        self.rewards(i).iter().sum()
    }

    pub fn kto(&self, samples: &[Sample], cfg: &TktoConfig) -> f64 {
        let total: f64 = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let lambda = if s.label.is_desirable() {
                    cfg.lambda_d
                } else {
                    cfg.lambda_u
                };
                let z: f64 = self.baselines[i].iter().sum();
                lambda - oracle_value(self.seq_reward(i), z, s.label, cfg)
            })
            .sum();
        total / samples.len() as f64
    }

    pub fn tkto(&self, samples: &[Sample], weights: &[Vec<f64>], cfg: &TktoConfig) -> f64 {
        let total: f64 = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let r = self.rewards(i);
                let mut acc = 0.0;
                for t in 0..r.len() {
                    acc += weights[i][t] * oracle_value(r[t], self.baselines[i][t], s.label, cfg);
                }
                if cfg.normalize_by_length {
                    acc /= r.len() as f64;
                }
                -acc
            })
            .sum();
        total / samples.len() as f64
    }

    pub fn sft(&self, indices: &[usize]) -> f64 {
        let all: Vec<f64> = indices
            .iter()
            .flat_map(|&i| self.policy_lp[i].iter().copied())
            .collect();
        -all.iter().sum::<f64>() / all.len() as f64
    }
}
