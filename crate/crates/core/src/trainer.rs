//! Deterministic optimization loops and the two-step TKTO pipeline.
//!
//! A run is fully determined by its starting model, dataset, objective and
//! [`TrainConfig`]: shuffling uses a permutation seeded from `(seed, epoch)`
//! and every reduction happens in a fixed order. Training never reads
//! [`crate::data::Sample::meta`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::data::{flip_labels, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{
    dpo_loss, estimate_token_weights, kto_loss, sft_loss, tkto_loss, TktoConfig, TokenWeightTable,
    WeightConfig,
};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub microbatch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Probe log-likelihoods are measured every this many steps (and always
    /// at the first and last step).
    pub probe_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 3e-3,
            microbatch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            probe_interval: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.microbatch_size == 0 {
            return Err(Error::InvalidConfig(
                "microbatch_size must be at least 1".into(),
            ));
        }
        if self.probe_interval == 0 {
            return Err(Error::InvalidConfig(
                "probe_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Sft,
    Dpo {
        beta: f64,
    },
    Kto(TktoConfig),
    Tkto {
        config: TktoConfig,
        weights: TokenWeightTable,
    },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dpo { .. } => "dpo",
            Objective::Kto(_) => "kto",
            Objective::Tkto { .. } => "tkto",
        }
    }
}

/// One optimization step. Step 0 is the untouched starting point and carries
/// no loss; probe columns are empty on steps skipped by `probe_interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub ll_desirable: Option<f64>,
    pub ll_undesirable: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
}

impl RunLog {
    pub fn push(&mut self, row: RunLogRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.step < row.step));
        self.rows.push(row);
    }

    pub fn steps(&self) -> usize {
        self.rows.last().map_or(0, |r| r.step)
    }

    /// First and last probed `(ll_desirable, ll_undesirable)`.
    pub fn probe_endpoints(&self) -> Option<((f64, f64), (f64, f64))> {
        let mut probed = self
            .rows
            .iter()
            .filter_map(|r| Some((r.ll_desirable?, r.ll_undesirable?)));
        let first = probed.next()?;
        let last = probed.next_back().unwrap_or(first);
        Some((first, last))
    }

    /// Losses of the steps that trained.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "ll_desirable", "ll_undesirable", "wall_ms"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                opt(r.loss),
                opt(r.ll_desirable),
                opt(r.ll_undesirable),
                r.wall_ms.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::file(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut log = RunLog::default();
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidConfig(format!("bad number {s:?} in run log")))
            }
        };
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            log.rows.push(RunLogRow {
                step: field(0)
                    .parse()
                    .map_err(|_| Error::InvalidConfig("bad step in run log".into()))?,
                loss: opt(field(1))?,
                ll_desirable: opt(field(2))?,
                ll_undesirable: opt(field(3))?,
                wall_ms: field(4).parse().unwrap_or(0),
            });
        }
        Ok(log)
    }
}

/// Held-out samples for the training-dynamics columns of the run log.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    desirable: Vec<Sample>,
    undesirable: Vec<Sample>,
}

impl Probe {
    pub fn new(dataset: &Dataset) -> Self {
        let (desirable, undesirable) = dataset
            .samples
            .iter()
            .cloned()
            .partition(|s| s.label.is_desirable());
        Self {
            desirable,
            undesirable,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.desirable.is_empty() && self.undesirable.is_empty()
    }

    /// Mean per-token log-likelihood of desirable and undesirable targets.
    pub fn measure(&self, model: &Model) -> Result<(f64, f64)> {
        Ok((
            mean_token_ll(model, &self.desirable)?,
            mean_token_ll(model, &self.undesirable)?,
        ))
    }
}

fn mean_token_ll(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let lp = model.target_logprobs(&s.prompt, &s.target)?;
        total += lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

/// Training units: indices into the dataset, or pairs for DPO.
enum Units {
    Samples(Vec<usize>),
    Pairs(Vec<(usize, usize)>),
}

impl Units {
    fn len(&self) -> usize {
        match self {
            Units::Samples(v) => v.len(),
            Units::Pairs(v) => v.len(),
        }
    }
}

fn units_for(objective: &Objective, dataset: &Dataset) -> Result<Units> {
    let mismatch = |reason: String| Error::ObjectiveDataset {
        objective: objective.name(),
        reason,
    };
    match objective {
        Objective::Sft => {
            let idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.samples[i].label.is_desirable())
                .collect();
            if idx.is_empty() {
                return Err(mismatch("no desirable samples".into()));
            }
            Ok(Units::Samples(idx))
        }
        Objective::Dpo { .. } => match &dataset.pairing {
            Some(p) if !p.is_empty() => Ok(Units::Pairs(p.clone())),
            Some(_) => Err(mismatch("pairing index is empty".into())),
            None => Err(mismatch("dataset has not been paired".into())),
        },
        Objective::Kto(_) => {
            if dataset.is_empty() {
                return Err(mismatch("dataset is empty".into()));
            }
            Ok(Units::Samples((0..dataset.len()).collect()))
        }
        Objective::Tkto { weights, .. } => {
            if dataset.is_empty() {
                return Err(mismatch("dataset is empty".into()));
            }
            if weights.len() != dataset.len() {
                return Err(mismatch(format!(
                    "weight table has {} rows for {} samples",
                    weights.len(),
                    dataset.len()
                )));
            }
            Ok(Units::Samples((0..dataset.len()).collect()))
        }
    }
}

/// Seeded permutation for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mixed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    order
}

/// Trains a copy of `start` against a frozen `reference`.
///
/// The reference is only read. With a probe set, every probed row of the
/// log records mean desirable and undesirable token log-likelihood.
pub fn train(
    start: &Model,
    reference: &Model,
    dataset: &Dataset,
    objective: &Objective,
    config: &TrainConfig,
    probe: Option<&Probe>,
) -> Result<(Model, RunLog)> {
    config.validate()?;
    start.check_compatible(reference)?;
    match objective {
        Objective::Kto(c) | Objective::Tkto { config: c, .. } => c.validate()?,
        Objective::Dpo { beta } if !(*beta > 0.0) => {
            return Err(Error::InvalidConfig("DPO beta must be positive".into()))
        }
        _ => {}
    }
    let units = units_for(objective, dataset)?;
    let reference = reference.snapshot();
    let mut model = start.thawed();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model);
    let started = Instant::now();
    let mut log = RunLog::default();

    let probe = probe.filter(|p| !p.is_empty());
    let measure = |m: &Model| -> Result<(Option<f64>, Option<f64>)> {
        match probe {
            Some(p) => p.measure(m).map(|(d, u)| (Some(d), Some(u))),
            None => Ok((None, None)),
        }
    };
    let (d0, u0) = measure(&model)?;
    log.push(RunLogRow {
        step: 0,
        loss: None,
        ll_desirable: d0,
        ll_undesirable: u0,
        wall_ms: 0,
    });

    let per_epoch = units.len().div_ceil(config.microbatch_size);
    let total_steps = per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(units.len(), config.seed, epoch);
        for chunk in order.chunks(config.microbatch_size) {
            step += 1;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let ref_bound = reference.bind_constant(&mut g);
            let policy = (&model, &bound);
            let refm = (&reference, &ref_bound);
            let loss = match (&units, objective) {
                (Units::Samples(idx), Objective::Sft) => {
                    let batch: Vec<&Sample> =
                        chunk.iter().map(|&k| &dataset.samples[idx[k]]).collect();
                    sft_loss(&mut g, policy, &batch)?
                }
                (Units::Samples(idx), Objective::Kto(c)) => {
                    let batch: Vec<&Sample> =
                        chunk.iter().map(|&k| &dataset.samples[idx[k]]).collect();
                    kto_loss(&mut g, policy, refm, &batch, c)?
                }
                (Units::Samples(idx), Objective::Tkto { config: c, weights }) => {
                    let batch: Vec<(usize, &Sample)> = chunk
                        .iter()
                        .map(|&k| (idx[k], &dataset.samples[idx[k]]))
                        .collect();
                    tkto_loss(&mut g, policy, refm, &batch, weights, c)?
                }
                (Units::Pairs(pairs), Objective::Dpo { beta }) => {
                    let batch: Vec<(&Sample, &Sample)> = chunk
                        .iter()
                        .map(|&k| {
                            let (w, l) = pairs[k];
                            (&dataset.samples[w], &dataset.samples[l])
                        })
                        .collect();
                    dpo_loss(&mut g, policy, refm, &batch, *beta)?
                }
                _ => unreachable!("units are built from the objective"),
            };
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            g.backward(loss)?;
            let grads: Vec<_> = bound.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
            drop(g);
            optimizer.step(&mut model, &grads)?;

            let probe_now = step % config.probe_interval == 0 || step == total_steps;
            let (d, u) = if probe_now {
                measure(&model)?
            } else {
                (None, None)
            };
            log.push(RunLogRow {
                step,
                loss: Some(loss_value),
                ll_desirable: d,
                ll_undesirable: u,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }

    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join(format!("{}-{}.ckpt", objective.name(), config.seed));
        checkpoint::save(&model, &path)?;
    }
    Ok((model, log))
}

/// Maximum-likelihood training on every target of `corpus`, whatever its
/// label: the warm start preference runs begin from.
pub fn warm_start(
    init: &Model,
    corpus: &Dataset,
    config: &TrainConfig,
    probe: Option<&Probe>,
) -> Result<(Model, RunLog)> {
    let texts = Dataset::new(
        corpus
            .samples
            .iter()
            .map(|s| Sample::new(s.prompt.clone(), s.target.clone(), Label::Desirable))
            .collect(),
    );
    train(init, init, &texts, &Objective::Sft, config, probe)
}

/// Step 1: π⁺ is KTO on the dataset, π⁻ is the same run on flipped labels.
/// Both start from `base`, use `base` as reference, and come back frozen.
pub fn train_contrastive_pair(
    base: &Model,
    dataset: &Dataset,
    kto: &TktoConfig,
    config: &TrainConfig,
) -> Result<(Model, Model)> {
    let (d, u) = dataset.label_counts();
    if d == 0 {
        return Err(Error::SingleLabel(Label::Undesirable.as_str()));
    }
    if u == 0 {
        return Err(Error::SingleLabel(Label::Desirable.as_str()));
    }
    let config = TrainConfig {
        checkpoint_dir: None,
        ..config.clone()
    };
    let objective = Objective::Kto(*kto);
    let (plus, _) = train(base, base, dataset, &objective, &config, None)?;
    let (minus, _) = train(base, base, &flip_labels(dataset), &objective, &config, None)?;
    Ok((plus.snapshot(), minus.snapshot()))
}

/// Which frozen model scores token rewards during the second step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    /// The warm-start model the pipeline began from.
    #[default]
    Base,
    PiPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub weights: WeightConfig,
    pub tkto: TktoConfig,
    /// Value-function settings for the contrastive KTO runs.
    pub contrastive: TktoConfig,
    pub reference: ReferenceChoice,
    /// Optimisation settings for the contrastive pair.
    pub contrastive_train: TrainConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: WeightConfig::default(),
            tkto: TktoConfig::default(),
            contrastive: TktoConfig::default(),
            reference: ReferenceChoice::Base,
            contrastive_train: TrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: Model,
    pub pi_plus: Model,
    pub pi_minus: Model,
    pub weights: TokenWeightTable,
    pub log: RunLog,
    /// Checkpoint digests keyed by file stem (`base-ref`, `pi-plus`, ...).
    pub digests: Vec<(String, String)>,
}

impl PipelineOutput {
    pub fn digest(&self, stage: &str) -> Option<&str> {
        self.digests
            .iter()
            .find(|(s, _)| s == stage)
            .map(|(_, d)| d.as_str())
    }
}

/// File names written by [`run_tkto_pipeline`].
pub const PIPELINE_FILES: [&str; 6] = [
    "base-ref.ckpt",
    "pi-plus.ckpt",
    "pi-minus.ckpt",
    "final.ckpt",
    "weights.jsonl",
    "runlog.csv",
];

/// Contrastive pair → token weights → TKTO, starting from `base`.
///
/// With `out_dir`, writes every file in [`PIPELINE_FILES`]. The weight
/// table's provenance digests are those of the π⁺/π⁻ checkpoint bytes.
pub fn run_tkto_pipeline(
    base: &Model,
    dataset: &Dataset,
    config: &PipelineConfig,
    probe: Option<&Probe>,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    config.weights.validate()?;
    let (pi_plus, pi_minus) = train_contrastive_pair(
        base,
        dataset,
        &config.contrastive,
        &config.contrastive_train,
    )
    .map_err(|e| e.in_stage("contrastive"))?;
    run_tkto_from_pair(base, pi_plus, pi_minus, dataset, config, probe, out_dir)
}

/// The pipeline after step 1, for callers that already hold the contrastive
/// pair (e.g. several weight settings over one pair).
pub fn run_tkto_from_pair(
    base: &Model,
    pi_plus: Model,
    pi_minus: Model,
    dataset: &Dataset,
    config: &PipelineConfig,
    probe: Option<&Probe>,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    config.weights.validate()?;
    let base = base.snapshot();
    let (pi_plus, pi_minus) = (pi_plus.snapshot(), pi_minus.snapshot());
    let plus_bytes = checkpoint::to_bytes(&pi_plus)?;
    let minus_bytes = checkpoint::to_bytes(&pi_minus)?;
    let plus_digest = checkpoint::digest_bytes(&plus_bytes);
    let minus_digest = checkpoint::digest_bytes(&minus_bytes);

    let weights = estimate_token_weights(&pi_plus, &pi_minus, dataset, &config.weights)
        .map_err(|e| e.in_stage("weights"))?
        .with_provenance(&plus_digest, &minus_digest);

    let reference = match config.reference {
        ReferenceChoice::Base => &base,
        ReferenceChoice::PiPlus => &pi_plus,
    };
    let train_config = TrainConfig {
        checkpoint_dir: None,
        ..config.train.clone()
    };
    let objective = Objective::Tkto {
        config: config.tkto,
        weights: weights.clone(),
    };
    let (model, log) = train(&base, reference, dataset, &objective, &train_config, probe)
        .map_err(|e| e.in_stage("tkto"))?;
    let model = model.snapshot();

    let base_bytes = checkpoint::to_bytes(&base)?;
    let final_bytes = checkpoint::to_bytes(&model)?;
    let digests = vec![
        (
            "base-ref".to_string(),
            checkpoint::digest_bytes(&base_bytes),
        ),
        ("pi-plus".to_string(), plus_digest),
        ("pi-minus".to_string(), minus_digest),
        ("final".to_string(), checkpoint::digest_bytes(&final_bytes)),
    ];

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let write = |name: &str, data: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, data).map_err(|e| Error::file(p, e))
        };
        write("base-ref.ckpt", &base_bytes)?;
        write("pi-plus.ckpt", &plus_bytes)?;
        write("pi-minus.ckpt", &minus_bytes)?;
        write("final.ckpt", &final_bytes)?;
        weights.write_jsonl(&dir.join("weights.jsonl"))?;
        log.write_csv(&dir.join("runlog.csv"))?;
    }

    Ok(PipelineOutput {
        model,
        pi_plus,
        pi_minus,
        weights,
        log,
        digests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskConfig};
    use crate::model::ModelConfig;

    fn small() -> (Model, Dataset) {
        let m = Model::new(ModelConfig::default()).unwrap();
        let d = generate(&TaskConfig::default(), 12, 12, 3).unwrap();
        (m, d)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (m, d) = small();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, log) = train(&m, &m, &d, &Objective::Sft, &cfg, None).unwrap();
        assert_eq!(out.params(), m.params());
        assert_eq!(log.steps(), 0);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 7, 0);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 7, 0));
        assert_ne!(a, epoch_order(50, 7, 1));
        assert_ne!(a, epoch_order(50, 8, 0));
    }

    #[test]
    fn dpo_needs_pairs() {
        let (m, d) = small();
        let err = train(
            &m,
            &m,
            &d,
            &Objective::Dpo { beta: 0.1 },
            &TrainConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::ObjectiveDataset {
                objective: "dpo",
                ..
            }
        ));
    }

    #[test]
    fn contrastive_pair_rejects_one_label() {
        let (m, d) = small();
        let only = d.filter_label(Label::Desirable);
        let kto = TktoConfig::default();
        assert!(matches!(
            train_contrastive_pair(&m, &only, &kto, &TrainConfig::default()),
            Err(Error::SingleLabel(_))
        ));
    }

    #[test]
    fn run_log_csv_round_trip() {
        let log = RunLog {
            rows: vec![
                RunLogRow {
                    step: 0,
                    loss: None,
                    ll_desirable: Some(-3.4),
                    ll_undesirable: Some(-3.5),
                    wall_ms: 0,
                },
                RunLogRow {
                    step: 1,
                    loss: Some(0.25),
                    ll_desirable: None,
                    ll_undesirable: None,
                    wall_ms: 12,
                },
            ],
        };
        let csv = log.to_csv().unwrap();
        assert!(csv.starts_with("step,loss,ll_desirable,ll_undesirable,wall_ms\n0,,-3.4,-3.5,0\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runlog.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(RunLog::read_csv(&p).unwrap(), log);
        assert_eq!(log.probe_endpoints(), Some(((-3.4, -3.5), (-3.4, -3.5))));
    }
}
