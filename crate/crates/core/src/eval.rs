//! Metrics and analyses over frozen models.
//!
//! This is the only module that reads [`Sample::meta`].

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, Label, Sample, TaskConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::TokenWeightTable;
use crate::trainer::{run_tkto_from_pair, train_contrastive_pair, PipelineConfig};

/// Per-sample error rate above which a sample counts as a bad case.
pub const BAD_THRESHOLD: f64 = 0.3;

/// Token-sequence Levenshtein distance.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    strsim::generic_levenshtein(&a.to_vec(), &b.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleEval {
    pub index: usize,
    pub correct: bool,
    pub distance: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub accuracy: f64,
    pub error_rate: f64,
    pub bad_ratio: f64,
    pub n: usize,
    pub rows: Vec<SampleEval>,
}

impl EvalReport {
    /// Aggregates per-sample rows.
    pub fn from_rows(model_id: impl Into<String>, rows: Vec<SampleEval>) -> Self {
        let n = rows.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let mean_err = if n == 0 {
            0.0
        } else {
            rows.iter().map(|r| r.error_rate).sum::<f64>() / n as f64
        };
        Self {
            model_id: model_id.into(),
            accuracy: frac(rows.iter().filter(|r| r.correct).count()),
            error_rate: mean_err,
            bad_ratio: frac(rows.iter().filter(|r| r.error_rate > BAD_THRESHOLD).count()),
            n,
            rows,
        }
    }

    pub fn to_csv(reports: &[EvalReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model_id", "accuracy", "error_rate", "bad_ratio", "n"])?;
        for r in reports {
            w.write_record([
                r.model_id.clone(),
                r.accuracy.to_string(),
                r.error_rate.to_string(),
                r.bad_ratio.to_string(),
                r.n.to_string(),
            ])?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes CSV text to `path`.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn meta_of(index: usize, s: &Sample) -> Result<(usize, usize)> {
    let m = s.meta().ok_or(Error::MissingMeta { index })?;
    Ok((m.cue_id, m.realization_position))
}

/// The desirable target for a sample: its own target with the realization
/// position set to the cue-consistent token.
pub fn desirable_target(task: &TaskConfig, index: usize, sample: &Sample) -> Result<Vec<usize>> {
    let (cue_id, pos) = meta_of(index, sample)?;
    let rule = task.cues.get(cue_id).ok_or(Error::IndexOutOfRange {
        op: "cue_id",
        index: cue_id,
        bound: task.cues.len(),
    })?;
    let mut target = sample.target.clone();
    let slot = target.get_mut(pos).ok_or(Error::IndexOutOfRange {
        op: "realization_position",
        index: pos,
        bound: sample.target.len(),
    })?;
    *slot = rule.realization;
    Ok(target)
}

/// Greedy-decodes every prompt once and scores it.
///
/// A sample is correct iff the decoded token at its realization position is
/// the cue-consistent realization. The error rate is the edit distance to the
/// desirable target over the desirable target's length.
pub fn evaluate(
    model: &Model,
    eval_set: &Dataset,
    task: &TaskConfig,
    model_id: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(eval_set.len());
    for (index, s) in eval_set.samples.iter().enumerate() {
        let want = desirable_target(task, index, s)?;
        let (_, pos) = meta_of(index, s)?;
        let decoded = model.greedy_decode(&s.prompt, want.len())?;
        let distance = levenshtein(&decoded, &want);
        rows.push(SampleEval {
            index,
            correct: decoded.get(pos) == Some(&want[pos]),
            distance,
            error_rate: distance as f64 / want.len().max(1) as f64,
        });
    }
    Ok(EvalReport::from_rows(model_id, rows))
}

pub fn targeted_accuracy(model: &Model, eval_set: &Dataset, task: &TaskConfig) -> Result<f64> {
    Ok(evaluate(model, eval_set, task, "")?.accuracy)
}

/// `(mean error rate, bad ratio)`.
pub fn error_rate(model: &Model, eval_set: &Dataset, task: &TaskConfig) -> Result<(f64, f64)> {
    let r = evaluate(model, eval_set, task, "")?;
    Ok((r.error_rate, r.bad_ratio))
}

/// Fixed-width histogram with underflow and overflow bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, width: f64) -> Self {
        let bins = ((hi - lo) / width).round() as usize;
        Self {
            lo,
            width,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        }
    }

    /// Width 0.1 over [−5, 5].
    pub fn rewards() -> Self {
        Self::new(-5.0, 5.0, 0.1)
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.width * self.counts.len() as f64
    }

    pub fn add(&mut self, x: f64) {
        let k = ((x - self.lo) / self.width).floor();
        if k < 0.0 {
            self.underflow += 1;
        } else if k >= self.counts.len() as f64 {
            self.overflow += 1;
        } else {
            self.counts[k as usize] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }

    pub fn bin_start(&self, k: usize) -> f64 {
        self.lo + self.width * k as f64
    }

    /// Bins holding a strict local maximum of at least `min_count`.
    pub fn peaks(&self, min_count: usize) -> Vec<usize> {
        let c = &self.counts;
        (0..c.len())
            .filter(|&k| {
                c[k] >= min_count
                    && (k == 0 || c[k] > c[k - 1])
                    && (k + 1 == c.len() || c[k] >= c[k + 1])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardAnalysis {
    pub mean_all: f64,
    pub mean_desirable_target: f64,
    pub mean_undesirable_target: f64,
    pub n_all: usize,
    pub n_desirable_target: usize,
    pub n_undesirable_target: usize,
    pub hist_all: Histogram,
    pub hist_desirable_target: Histogram,
    pub hist_undesirable_target: Histogram,
}

impl RewardAnalysis {
    pub fn histograms_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "bin_lo",
            "bin_hi",
            "all",
            "desirable_target",
            "undesirable_target",
        ])?;
        let h = [
            &self.hist_all,
            &self.hist_desirable_target,
            &self.hist_undesirable_target,
        ];
        w.write_record(
            ["-inf".to_string(), h[0].lo.to_string()]
                .into_iter()
                .chain(h.iter().map(|x| x.underflow.to_string())),
        )?;
        for k in 0..h[0].counts.len() {
            let lo = h[0].bin_start(k);
            let hi = h[0].bin_start(k + 1);
            w.write_record(
                [format!("{lo:.1}"), format!("{hi:.1}")]
                    .into_iter()
                    .chain(h.iter().map(|x| x.counts[k].to_string())),
            )?;
        }
        w.write_record(
            [h[0].hi().to_string(), "inf".to_string()]
                .into_iter()
                .chain(h.iter().map(|x| x.overflow.to_string())),
        )?;
        finish(w)
    }
}

/// Per-token `log π⁺ − log π⁻` over the dataset, aggregated over all tokens
/// and over realization positions split by label.
pub fn analyze_rewards(
    pi_plus: &Model,
    pi_minus: &Model,
    dataset: &Dataset,
) -> Result<RewardAnalysis> {
    pi_plus.check_compatible(pi_minus)?;
    let mut acc = [(0.0f64, 0usize); 3];
    let mut hists = [
        Histogram::rewards(),
        Histogram::rewards(),
        Histogram::rewards(),
    ];
    for (index, s) in dataset.samples.iter().enumerate() {
        let (_, pos) = meta_of(index, s)?;
        let plus = pi_plus.target_logprobs(&s.prompt, &s.target)?;
        let minus = pi_minus.target_logprobs(&s.prompt, &s.target)?;
        for (t, (p, m)) in plus.iter().zip(&minus).enumerate() {
            let r = p - m;
            let mut bump = |k: usize| {
                acc[k].0 += r;
                acc[k].1 += 1;
                hists[k].add(r);
            };
            bump(0);
            if t == pos {
                bump(if s.label == Label::Desirable { 1 } else { 2 });
            }
        }
    }
    let mean = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
    let [h0, h1, h2] = hists;
    Ok(RewardAnalysis {
        mean_all: mean(acc[0]),
        mean_desirable_target: mean(acc[1]),
        mean_undesirable_target: mean(acc[2]),
        n_all: acc[0].1,
        n_desirable_target: acc[1].1,
        n_undesirable_target: acc[2].1,
        hist_all: h0,
        hist_desirable_target: h1,
        hist_undesirable_target: h2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightRow {
    pub sample_index: usize,
    pub position: usize,
    pub token_id: usize,
    pub weight: f64,
    pub is_target: bool,
}

/// Per-token weights of the requested samples, in request order.
pub fn weight_map(
    table: &TokenWeightTable,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<WeightRow>> {
    let mut rows = Vec::new();
    for &i in indices {
        let s = dataset.samples.get(i).ok_or(Error::IndexOutOfRange {
            op: "weight_map",
            index: i,
            bound: dataset.len(),
        })?;
        let w = table.row(i).ok_or(Error::IndexOutOfRange {
            op: "weight_map",
            index: i,
            bound: table.len(),
        })?;
        if w.len() != s.target.len() {
            return Err(Error::WeightMisaligned {
                sample_index: i,
                expected: s.target.len(),
                found: w.len(),
            });
        }
        let (_, pos) = meta_of(i, s)?;
        rows.extend(
            s.target
                .iter()
                .zip(w)
                .enumerate()
                .map(|(t, (&tok, &wt))| WeightRow {
                    sample_index: i,
                    position: t,
                    token_id: tok,
                    weight: wt,
                    is_target: t == pos,
                }),
        );
    }
    Ok(rows)
}

pub fn weight_map_csv(rows: &[WeightRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "sample_index",
            "position",
            "token_id",
            "weight",
            "is_target",
        ])?;
    }
    finish(w)
}

/// Mean weight at realization positions, mean elsewhere, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightContrast {
    pub target_mean: f64,
    pub other_mean: f64,
    pub ratio: f64,
}

pub fn weight_contrast(table: &TokenWeightTable, dataset: &Dataset) -> Result<WeightContrast> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let rows = weight_map(table, dataset, &all)?;
    let (mut ts, mut tn, mut os, mut on) = (0.0, 0usize, 0.0, 0usize);
    for r in &rows {
        if r.is_target {
            ts += r.weight;
            tn += 1;
        } else {
            os += r.weight;
            on += 1;
        }
    }
    let target_mean = ts / tn.max(1) as f64;
    let other_mean = os / on.max(1) as f64;
    Ok(WeightContrast {
        target_mean,
        other_mean,
        ratio: target_mean / other_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub lo: f64,
    #[serde(rename = "U")]
    pub hi: f64,
    pub accuracy: f64,
    pub error_rate: f64,
    pub bad_ratio: f64,
}

/// The ranges of the standard sensitivity study.
pub const DEFAULT_RANGES: [(f64, f64); 3] = [(-1.0, 1.0), (-2.0, 2.0), (-3.0, 3.0)];

/// Parses `"-1,1;-2,2"` into clamp ranges.
pub fn parse_ranges(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let bad = || Error::InvalidConfig(format!("clamp range {part:?} is not \"L,U\""));
            let (l, u) = part.split_once(',').ok_or_else(bad)?;
            let l: f64 = l.trim().parse().map_err(|_| bad())?;
            let u: f64 = u.trim().parse().map_err(|_| bad())?;
            if l > u {
                return Err(Error::InvalidClamp { lo: l, hi: u });
            }
            Ok((l, u))
        })
        .collect()
}

/// Runs the pipeline once per clamp range and evaluates each final model.
///
/// Step 1 does not depend on the clamp range, so the contrastive pair is
/// trained once and shared; every range otherwise uses the same seed and
/// settings.
pub fn clamp_sweep(
    base: &Model,
    dataset: &Dataset,
    eval_set: &Dataset,
    task: &TaskConfig,
    ranges: &[(f64, f64)],
    config: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    for &(lo, hi) in ranges {
        if lo > hi {
            return Err(Error::SweepRange {
                lo,
                hi,
                source: Box::new(Error::InvalidClamp { lo, hi }),
            });
        }
    }
    let (pi_plus, pi_minus) = train_contrastive_pair(
        base,
        dataset,
        &config.contrastive,
        &config.contrastive_train,
    )
    .map_err(|e| e.in_stage("contrastive"))?;
    ranges
        .iter()
        .map(|&(lo, hi)| {
            let tag = |e: Error| Error::SweepRange {
                lo,
                hi,
                source: Box::new(e),
            };
            let mut cfg = config.clone();
            cfg.weights.clamp_lo = lo;
            cfg.weights.clamp_hi = hi;
            let out = run_tkto_from_pair(
                base,
                pi_plus.clone(),
                pi_minus.clone(),
                dataset,
                &cfg,
                None,
                None,
            )
            .map_err(tag)?;
            let r = evaluate(&out.model, eval_set, task, "").map_err(tag)?;
            Ok(SweepRow {
                lo,
                hi,
                accuracy: r.accuracy,
                error_rate: r.error_rate,
                bad_ratio: r.bad_ratio,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["L", "U", "accuracy", "error_rate", "bad_ratio"])?;
    }
    finish(w)
}
