//! Synthetic ambiguous-token task.
//!
//! Every prompt opens with a context cue, carries filler, and closes with a
//! polyseme token. The target "reads" the prompt back: it copies the filler
//! and then realizes the polyseme as one of several realization tokens,
//! followed by [`EOS`]. Which realization is correct depends only on the cue,
//! so a model has to look back across the whole prompt to get it right.
//!
//! Samples carry one utterance-level label. The position of the realization
//! token is stored as analysis-only metadata that training never reads; see
//! [`Sample::meta`].

use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Desirable,
    Undesirable,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Desirable => Label::Undesirable,
            Label::Undesirable => Label::Desirable,
        }
    }

    pub fn is_desirable(self) -> bool {
        self == Label::Desirable
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Desirable => "desirable",
            Label::Undesirable => "undesirable",
        }
    }
}

/// Token-level annotation kept for evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub cue_id: usize,
    pub realization_position: usize,
}

thread_local! {
    static META_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`Sample::meta`] reads on the current thread so far.
pub fn meta_reads() -> usize {
    META_READS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub label: Label,
    meta: Option<SampleMeta>,
}

impl Sample {
    pub fn new(prompt: Vec<usize>, target: Vec<usize>, label: Label) -> Self {
        Self {
            prompt,
            target,
            label,
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: SampleMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    /// Token-level annotation. Only evaluation code may call this; every
    /// call is counted per thread (see [`meta_reads`]) so tests can assert
    /// that training never looks.
    pub fn meta(&self) -> Option<&SampleMeta> {
        META_READS.with(|c| c.set(c.get() + 1));
        self.meta.as_ref()
    }

    fn with_label(&self, label: Label) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }
}

/// One cue and the realization it selects for the polyseme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueRule {
    pub cue: usize,
    pub realization: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    /// Realization map, one entry per cue.
    pub cues: Vec<CueRule>,
    pub polyseme_token: usize,
    pub prompt_len: usize,
    pub target_len: usize,
    /// Half-open filler id range `[start, end)`.
    pub filler_range: (usize, usize),
    /// Fraction of `min(n_desirable, n_undesirable)` samples generated as
    /// prompt-sharing desirable/undesirable pairs.
    pub pair_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            cues: vec![
                CueRule {
                    cue: 1,
                    realization: 4,
                },
                CueRule {
                    cue: 2,
                    realization: 5,
                },
            ],
            polyseme_token: 3,
            prompt_len: 8,
            target_len: 8,
            filler_range: (6, 32),
            pair_fraction: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn num_cues(&self) -> usize {
        self.cues.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.cues.len() < 2 {
            return bad("at least two cues are needed for an ambiguous polyseme".into());
        }
        let (lo, hi) = self.filler_range;
        if lo >= hi || hi > self.vocab_size {
            return bad(format!(
                "filler range [{lo}, {hi}) must be non-empty and inside vocabulary of {}",
                self.vocab_size
            ));
        }
        let mut special = vec![EOS, self.polyseme_token];
        for rule in &self.cues {
            special.push(rule.cue);
            special.push(rule.realization);
        }
        for &t in &special {
            if t >= self.vocab_size {
                return bad(format!(
                    "token {t} does not fit vocabulary of size {}",
                    self.vocab_size
                ));
            }
            if (lo..hi).contains(&t) {
                return bad(format!("token {t} overlaps the filler range"));
            }
        }
        let mut sorted = special.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != special.len() {
            return bad(
                "cue, polyseme, realization and end tokens must be pairwise distinct".into(),
            );
        }
        if self.prompt_len < 3 {
            return bad("prompt needs room for cue, filler and polyseme".into());
        }
        if self.target_len != self.prompt_len {
            return bad(format!(
                "target_len {} must equal prompt_len {}: the target reads the prompt back",
                self.target_len, self.prompt_len
            ));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return bad("pair_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Index of the realization token inside every target.
    pub fn realization_position(&self) -> usize {
        self.prompt_len - 2
    }

    fn cue_index(&self, token: usize) -> Option<usize> {
        self.cues.iter().position(|r| r.cue == token)
    }

    /// Realization used by undesirable samples for cue index `cue_id`.
    pub fn wrong_realization(&self, cue_id: usize) -> usize {
        self.cues[(cue_id + 1) % self.cues.len()].realization
    }

    /// Desirability recomputed from tokens alone: the target must contain the
    /// realization mapped from the prompt's cue. `None` for malformed samples.
    pub fn is_desirable(&self, prompt: &[usize], target: &[usize]) -> Option<bool> {
        let cue_id = prompt.iter().find_map(|&t| self.cue_index(t))?;
        let realization = target
            .iter()
            .copied()
            .find(|t| self.cues.iter().any(|r| r.realization == *t))?;
        Some(realization == self.cues[cue_id].realization)
    }

    fn build(&self, cue_id: usize, filler: &[usize], label: Label) -> Sample {
        let rule = self.cues[cue_id];
        let mut prompt = Vec::with_capacity(self.prompt_len);
        prompt.push(rule.cue);
        prompt.extend_from_slice(filler);
        prompt.push(self.polyseme_token);

        let realization = match label {
            Label::Desirable => rule.realization,
            Label::Undesirable => self.wrong_realization(cue_id),
        };
        let mut target = filler.to_vec();
        target.push(realization);
        target.push(EOS);

        Sample::new(prompt, target, label).with_meta(SampleMeta {
            cue_id,
            realization_position: self.realization_position(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `(desirable_idx, undesirable_idx)` pairs sharing an identical prompt.
    pub pairing: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            pairing: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(desirable, undesirable)` counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let d = self
            .samples
            .iter()
            .filter(|s| s.label.is_desirable())
            .count();
        (d, self.samples.len() - d)
    }

    pub fn filter_label(&self, label: Label) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| s.label == label)
                .cloned()
                .collect(),
        )
    }
}

/// Generates `n_desirable + n_undesirable` samples, desirable first.
///
/// `pair_fraction · min(n_desirable, n_undesirable)` desirable samples share
/// their prompt (and filler) with one undesirable sample; the rest get fresh
/// prompts. Cues are assigned greedily to the least-used cue, so they stay
/// balanced across the whole dataset.
pub fn generate(
    config: &TaskConfig,
    n_desirable: usize,
    n_undesirable: usize,
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pairs = (config.pair_fraction * n_desirable.min(n_undesirable) as f64).round() as usize;
    let filler_len = config.prompt_len - 2;
    let (lo, hi) = config.filler_range;

    let mut cue_counts = vec![0usize; config.num_cues()];
    let mut next_cue = |weight: usize| {
        let cue = (0..cue_counts.len())
            .min_by_key(|&c| (cue_counts[c], c))
            .expect("at least two cues");
        cue_counts[cue] += weight;
        cue
    };
    let draw_filler = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..filler_len).map(|_| rng.gen_range(lo..hi)).collect()
    };

    let mut desirable = Vec::with_capacity(n_desirable);
    let mut undesirable = Vec::with_capacity(n_undesirable);
    for _ in 0..n_pairs {
        let cue = next_cue(2);
        let filler = draw_filler(&mut rng);
        desirable.push(config.build(cue, &filler, Label::Desirable));
        undesirable.push(config.build(cue, &filler, Label::Undesirable));
    }
    for _ in n_pairs..n_desirable {
        let cue = next_cue(1);
        let filler = draw_filler(&mut rng);
        desirable.push(config.build(cue, &filler, Label::Desirable));
    }
    for _ in n_pairs..n_undesirable {
        let cue = next_cue(1);
        let filler = draw_filler(&mut rng);
        undesirable.push(config.build(cue, &filler, Label::Undesirable));
    }
    desirable.extend(undesirable);
    Ok(Dataset::new(desirable))
}

/// Generates a warm-start corpus in which the polyseme leans towards a
/// dominant reading (the first cue's realization). Under the first cue it is
/// always read correctly; under any other cue the cue-consistent realization
/// appears with probability `fidelity` and the dominant one otherwise. Labels
/// are recomputed from tokens.
pub fn generate_corpus(config: &TaskConfig, n: usize, fidelity: f64, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if !(0.0..=1.0).contains(&fidelity) {
        return Err(Error::InvalidConfig("fidelity must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.filler_range;
    let samples = (0..n)
        .map(|i| {
            let cue_id = i % config.num_cues();
            let filler: Vec<usize> = (0..config.prompt_len - 2)
                .map(|_| rng.gen_range(lo..hi))
                .collect();
            let faithful = rng.gen_bool(fidelity);
            let reading = if cue_id == 0 || faithful { cue_id } else { 0 };
            let label = if reading == cue_id {
                Label::Desirable
            } else {
                Label::Undesirable
            };
            let mut s = config.build(cue_id, &filler, label);
            s.target[config.realization_position()] = config.cues[reading].realization;
            s
        })
        .collect();
    Ok(Dataset::new(samples))
}

/// Greedily matches each desirable sample, in order, with the first unmatched
/// undesirable sample that has the identical prompt.
pub fn pair(dataset: &Dataset) -> Dataset {
    let mut open: HashMap<&[usize], VecDeque<usize>> = HashMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.label == Label::Undesirable {
            open.entry(s.prompt.as_slice()).or_default().push_back(i);
        }
    }
    let mut pairs = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.label != Label::Desirable {
            continue;
        }
        if let Some(j) = open
            .get_mut(s.prompt.as_slice())
            .and_then(VecDeque::pop_front)
        {
            pairs.push((i, j));
        }
    }
    Dataset {
        samples: dataset.samples.clone(),
        pairing: Some(pairs),
    }
}

/// Only the members of `pair(dataset)`, re-indexed, pairing kept.
pub fn paired_only(dataset: &Dataset) -> Dataset {
    let paired = pair(dataset);
    let pairs = paired.pairing.unwrap_or_default();
    let mut samples = Vec::with_capacity(2 * pairs.len());
    let mut pairing = Vec::with_capacity(pairs.len());
    for (d, u) in pairs {
        pairing.push((samples.len(), samples.len() + 1));
        samples.push(dataset.samples[d].clone());
        samples.push(dataset.samples[u].clone());
    }
    Dataset {
        samples,
        pairing: Some(pairing),
    }
}

/// Inverts every label; all tokens, metadata and the pairing index are kept.
/// Pairs are stored desirable-first, so their members swap sides.
pub fn flip_labels(dataset: &Dataset) -> Dataset {
    Dataset {
        samples: dataset
            .samples
            .iter()
            .map(|s| s.with_label(s.label.flipped()))
            .collect(),
        pairing: dataset
            .pairing
            .as_ref()
            .map(|p| p.iter().map(|&(d, u)| (u, d)).collect()),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    prompt: Vec<usize>,
    target: Vec<usize>,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SampleMeta>,
}

/// One JSON object per line: `prompt`, `target`, `label`, `meta`.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let record = SampleRecord {
            prompt: s.prompt.clone(),
            target: s.target.clone(),
            label: s.label,
            meta: s.meta,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(Sample {
            prompt: record.prompt,
            target: record.target,
            label: record.label,
            meta: record.meta,
        });
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TaskConfig {
        TaskConfig::default()
    }

    #[test]
    fn desirable_target_uses_cue_realization() {
        let d = generate(&cfg(), 10, 10, 1).unwrap();
        for s in &d.samples {
            let meta = *s.meta().unwrap();
            let r = s.target[meta.realization_position];
            let right = cfg().cues[meta.cue_id].realization;
            assert_eq!(r == right, s.label.is_desirable());
            assert_eq!(s.prompt[0], cfg().cues[meta.cue_id].cue);
            assert_eq!(*s.prompt.last().unwrap(), cfg().polyseme_token);
            assert_eq!(*s.target.last().unwrap(), EOS);
            assert_eq!(&s.target[..6], &s.prompt[1..7]);
        }
    }

    #[test]
    fn counts_and_cue_balance() {
        let d = generate(&cfg(), 100, 100, 42).unwrap();
        assert_eq!(d.label_counts(), (100, 100));
        let mut per_cue = [0usize; 2];
        for s in &d.samples {
            per_cue[s.meta().unwrap().cue_id] += 1;
        }
        assert!(per_cue[0].abs_diff(per_cue[1]) <= 1, "{per_cue:?}");
        assert_eq!(per_cue[0] + per_cue[1], 200);
    }

    #[test]
    fn unbalanced_counts_keep_cues_balanced() {
        let d = generate(&cfg(), 7, 2, 3).unwrap();
        let mut per_cue = [0usize; 2];
        for s in &d.samples {
            per_cue[s.meta().unwrap().cue_id] += 1;
        }
        assert!(per_cue[0].abs_diff(per_cue[1]) <= 1, "{per_cue:?}");
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&cfg(), 20, 20, 42).unwrap();
        assert_eq!(a, generate(&cfg(), 20, 20, 42).unwrap());
        let b = generate(&cfg(), 20, 20, 43).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.label_counts(), b.label_counts());
    }

    #[test]
    fn rejects_overlapping_tokens() {
        let mut c = cfg();
        c.polyseme_token = 10;
        assert!(matches!(
            generate(&c, 1, 1, 0),
            Err(Error::InvalidConfig(_))
        ));
        let mut c = cfg();
        c.vocab_size = 5;
        c.filler_range = (5, 5);
        assert!(generate(&c, 1, 1, 0).is_err());
        let mut c = cfg();
        c.cues[1].realization = 4;
        assert!(generate(&c, 1, 1, 0).is_err());
    }

    #[test]
    fn pairing_definition() {
        let prompt = vec![1, 6, 7, 3];
        let mk = |label| Sample::new(prompt.clone(), vec![6, 7, 4, 0], label);
        let d = Dataset::new(vec![
            mk(Label::Desirable),
            mk(Label::Desirable),
            mk(Label::Undesirable),
            mk(Label::Desirable),
        ]);
        let p = pair(&d);
        assert_eq!(p.pairing, Some(vec![(0, 2)]));

        let one_sided = Dataset::new(vec![mk(Label::Desirable), mk(Label::Desirable)]);
        assert_eq!(pair(&one_sided).pairing, Some(vec![]));
    }

    #[test]
    fn paired_only_keeps_just_pairs() {
        let d = generate(&cfg(), 40, 30, 9).unwrap();
        let p = paired_only(&d);
        let pairs = p.pairing.as_ref().unwrap();
        assert_eq!(p.len(), 2 * pairs.len());
        assert_eq!(pairs.len(), pair(&d).pairing.unwrap().len());
        for &(a, b) in pairs {
            assert_eq!(p.samples[a].prompt, p.samples[b].prompt);
            assert!(p.samples[a].label.is_desirable() && !p.samples[b].label.is_desirable());
        }
    }

    #[test]
    fn paired_members_share_prompt() {
        let d = pair(&generate(&cfg(), 50, 30, 5).unwrap());
        let pairs = d.pairing.as_ref().unwrap();
        assert_eq!(pairs.len(), 15);
        for &(i, j) in pairs {
            assert_eq!(d.samples[i].prompt, d.samples[j].prompt);
            assert!(d.samples[i].label.is_desirable());
            assert!(!d.samples[j].label.is_desirable());
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let d = pair(&generate(&cfg(), 12, 8, 9).unwrap());
        let f = flip_labels(&d);
        assert_eq!(f.label_counts(), (8, 12));
        assert_eq!(f.samples[0].label, Label::Undesirable);
        assert_eq!(f.samples[0].prompt, d.samples[0].prompt);
        assert_eq!(flip_labels(&f), d);
    }

    #[test]
    fn stored_label_matches_token_rule() {
        let c = cfg();
        let d = generate(&c, 30, 30, 11).unwrap();
        for s in &d.samples {
            assert_eq!(
                c.is_desirable(&s.prompt, &s.target),
                Some(s.label.is_desirable())
            );
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = generate(&cfg(), 5, 4, 2).unwrap();
        write_jsonl(&d, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), d);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"prompt\":["));

        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());

        let good = r#"{"prompt":[1,3],"target":[4,0],"label":"desirable","meta":{"cue_id":0,"realization_position":0}}"#;
        let bad = r#"{"prompt":[1,3],"target":[4,0],"label":"neutral","meta":{"cue_id":0,"realization_position":0}}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_jsonl(&path) {
            Err(Error::Jsonl { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
        let extra = r#"{"prompt":[1],"target":[0],"label":"desirable","score":1}"#;
        std::fs::write(&path, format!("{extra}\n")).unwrap();
        assert!(matches!(
            read_jsonl(&path),
            Err(Error::Jsonl { line: 1, .. })
        ));
    }

    #[test]
    fn corpus_leans_to_dominant_reading() {
        let c = cfg();
        let d = generate_corpus(&c, 2000, 0.4, 5).unwrap();
        let pos = c.realization_position();
        let mut faithful = [0usize; 2];
        for s in &d.samples {
            assert_eq!(
                c.is_desirable(&s.prompt, &s.target),
                Some(s.label.is_desirable())
            );
            let cue_id = s.meta().unwrap().cue_id;
            if s.target[pos] == c.cues[cue_id].realization {
                faithful[cue_id] += 1;
            } else {
                assert_eq!(s.target[pos], c.cues[0].realization);
            }
        }
        assert_eq!(faithful[0], 1000);
        let share = faithful[1] as f64 / 1000.0;
        assert!((share - 0.4).abs() < 0.05, "{share}");
    }

    #[test]
    fn meta_reads_are_counted() {
        let d = generate(&cfg(), 2, 0, 0).unwrap();
        let before = meta_reads();
        let _ = d.samples[0].meta();
        assert_eq!(meta_reads(), before + 1);
    }
}
