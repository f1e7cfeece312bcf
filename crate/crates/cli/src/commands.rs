use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tkto_core::data::{self, Dataset};
use tkto_core::eval::{self, EvalReport};
use tkto_core::objectives::estimate_token_weights;
use tkto_core::recipe::Recipe;
use tkto_core::trainer::{run_tkto_pipeline, train, Objective};
use tkto_core::{checkpoint, Error, Model, TokenWeightTable};

use crate::args::*;
use crate::config::{ensure_parent, out_root, sibling_manifest, Manifest};
use crate::UserError;

fn user(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    let (name, msg) = (path.display().to_string(), e.to_string());
    if msg.contains(&name) {
        UserError(msg).into()
    } else {
        UserError(format!("{name}: {msg}")).into()
    }
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    checkpoint::load(path).map_err(|e| user(path, e))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    data::read_jsonl(path).map_err(|e| user(path, e))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    eval::write_text(path, text).map_err(|e| user(path, e))
}

fn base_model(recipe: &Recipe, base: Option<&Path>) -> anyhow::Result<Model> {
    match base {
        Some(p) => load_model(p),
        None => {
            println!("warm start: {} corpus samples", recipe.corpus_size);
            Ok(recipe.warm_model()?)
        }
    }
}

/// Metrics need sample metadata; data without it yields none.
fn metrics(
    model: &Model,
    data: &Dataset,
    recipe: &Recipe,
    id: &str,
) -> anyhow::Result<Option<EvalReport>> {
    match eval::evaluate(model, data, &recipe.task, id) {
        Ok(r) => Ok(Some(r)),
        Err(Error::MissingMeta { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn report_json(r: &EvalReport) -> serde_json::Value {
    json!({
        "model_id": r.model_id,
        "accuracy": r.accuracy,
        "error_rate": r.error_rate,
        "bad_ratio": r.bad_ratio,
        "n": r.n,
    })
}

pub fn gen_data(cmd: &Command, a: &GenDataArgs, recipe: &Recipe) -> anyhow::Result<()> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("data.jsonl"));
    let nd = a.n_desirable.unwrap_or(recipe.train_size);
    let nu = a.n_undesirable.unwrap_or(recipe.train_size);
    let d =
        data::generate(&recipe.task, nd, nu, recipe.seed).map_err(|e| UserError(e.to_string()))?;
    ensure_parent(&out)?;
    data::write_jsonl(&d, &out).map_err(|e| user(&out, e))?;

    let (des, und) = d.label_counts();
    let mut cues = vec![0usize; recipe.task.num_cues()];
    for s in &d.samples {
        if let Some(m) = s.meta() {
            cues[m.cue_id] += 1;
        }
    }
    let cue_text: Vec<String> = cues
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i}:{n}"))
        .collect();
    println!(
        "wrote {} samples: desirable {des} undesirable {und} cues {}",
        d.len(),
        cue_text.join(" ")
    );

    let mut m = Manifest::new(cmd, recipe);
    m.output(&out)?;
    m.metrics = json!({ "desirable": des, "undesirable": und, "cues": cues });
    m.write(&sibling_manifest(&out))
}

pub fn train_cmd(cmd: &Command, a: &TrainArgs, recipe: &Recipe) -> anyhow::Result<()> {
    let name = a.objective.as_str();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("train-{name}-{}", recipe.seed)));
    let raw = load_data(&a.data)?;
    let dataset = match (a.objective, a.paired) {
        (ObjectiveName::Dpo, false) => {
            return Err(UserError(
                "dpo consumes (desirable, undesirable) pairs; pass --paired".into(),
            )
            .into())
        }
        (_, true) => data::paired_only(&raw),
        (_, false) => raw,
    };
    if a.paired && dataset.is_empty() {
        return Err(user(
            &a.data,
            "no desirable/undesirable pair shares a prompt",
        ));
    }
    let base = base_model(recipe, a.base.as_deref())?;
    let probe = recipe.probe()?;
    fs::create_dir_all(&out).map_err(|e| user(&out, e))?;

    let final_model = if a.objective == ObjectiveName::Tkto {
        let p = run_tkto_pipeline(&base, &dataset, &recipe.pipeline, Some(&probe), Some(&out))
            .map_err(user_if_data)?;
        p.model
    } else {
        let objective = match a.objective {
            ObjectiveName::Sft => Objective::Sft,
            ObjectiveName::Dpo => Objective::Dpo {
                beta: recipe.pipeline.tkto.beta,
            },
            _ => Objective::Kto(recipe.pipeline.tkto),
        };
        let (model, log) = train(
            &base,
            &base,
            &dataset,
            &objective,
            &recipe.pipeline.train,
            Some(&probe),
        )
        .map_err(user_if_data)?;
        checkpoint::save(&base.snapshot(), &out.join("base-ref.ckpt"))?;
        checkpoint::save(&model, &out.join("final.ckpt"))?;
        log.write_csv(&out.join("runlog.csv"))?;
        model
    };

    let mut m = Manifest::new(cmd, recipe);
    m.input("data", &a.data)?;
    if let Some(b) = &a.base {
        m.input("base", b)?;
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    names.sort();
    for p in &names {
        m.output(p)?;
    }
    // recorded against the unfiltered training file so `eval` can repeat it
    let full = load_data(&a.data)?;
    if let Some(r) = metrics(&final_model, &full, recipe, name)? {
        println!(
            "{name}: accuracy {:.4} error_rate {:.4} bad_ratio {:.4} (n {})",
            r.accuracy, r.error_rate, r.bad_ratio, r.n
        );
        m.metrics = report_json(&r);
    }
    m.write(&out.join("manifest.json"))
}

/// Objective/dataset incompatibilities are the caller's to fix.
fn user_if_data(e: Error) -> anyhow::Error {
    if e.is_user_error() {
        UserError(e.to_string()).into()
    } else {
        e.into()
    }
}

pub fn eval_cmd(cmd: &Command, a: &EvalArgs, recipe: &Recipe) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| out_root().join("eval.csv"));
    let model = load_model(&a.model)?;
    let d = load_data(&a.data)?;
    let id = a.model_id.clone().unwrap_or_else(|| {
        a.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let r = eval::evaluate(&model, &d, &recipe.task, &id).map_err(|e| user(&a.data, e))?;
    write(&out, &EvalReport::to_csv(std::slice::from_ref(&r))?)?;
    println!(
        "{id}: accuracy {:.4} error_rate {:.4} bad_ratio {:.4} (n {})",
        r.accuracy, r.error_rate, r.bad_ratio, r.n
    );
    let mut m = Manifest::new(cmd, recipe);
    m.input("model", &a.model)?;
    m.input("data", &a.data)?;
    m.output(&out)?;
    m.metrics = report_json(&r);
    m.write(&sibling_manifest(&out))
}

pub fn analyze(cmd: &Command, a: &AnalyzeArgs, recipe: &Recipe) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| out_root().join("analyze"));
    let plus = load_model(&a.pi_plus)?;
    let minus = load_model(&a.pi_minus)?;
    let d = load_data(&a.data)?;
    let table = match &a.weights {
        Some(p) => {
            let t = TokenWeightTable::read_jsonl(p).map_err(|e| user(p, e))?;
            let expect = (
                checkpoint::file_digest(&a.pi_plus)?,
                checkpoint::file_digest(&a.pi_minus)?,
            );
            if (t.pi_plus.as_str(), t.pi_minus.as_str()) != (expect.0.as_str(), expect.1.as_str()) {
                return Err(user(
                    p,
                    "weight table was not estimated from this pi+/pi- pair",
                ));
            }
            t
        }
        None => estimate_token_weights(&plus, &minus, &d, &recipe.pipeline.weights)
            .map_err(user_if_data)?,
    };
    fs::create_dir_all(&out).map_err(|e| user(&out, e))?;

    let rewards = eval::analyze_rewards(&plus, &minus, &d).map_err(user_if_data)?;
    write(
        &out.join("reward_histograms.csv"),
        &rewards.histograms_csv()?,
    )?;
    let rows = eval::weight_map(&table, &d, &a.indices).map_err(user_if_data)?;
    write(&out.join("weight_map.csv"), &eval::weight_map_csv(&rows)?)?;
    let contrast = eval::weight_contrast(&table, &d).map_err(user_if_data)?;
    let summary = json!({
        "mean_reward_all": rewards.mean_all,
        "mean_reward_desirable_target": rewards.mean_desirable_target,
        "mean_reward_undesirable_target": rewards.mean_undesirable_target,
        "undesirable_target_peaks": rewards.hist_undesirable_target.peaks(20).len(),
        "weight_target_mean": contrast.target_mean,
        "weight_other_mean": contrast.other_mean,
        "weight_ratio": contrast.ratio,
    });
    write(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    println!(
        "rewards: desirable targets {:.3}, all {:.3}, undesirable targets {:.3}; weight ratio {:.2}",
        rewards.mean_desirable_target, rewards.mean_all, rewards.mean_undesirable_target, contrast.ratio
    );

    let mut m = Manifest::new(cmd, recipe);
    m.input("pi_plus", &a.pi_plus)?;
    m.input("pi_minus", &a.pi_minus)?;
    m.input("data", &a.data)?;
    if let Some(w) = &a.weights {
        m.input("weights", w)?;
    }
    for f in ["reward_histograms.csv", "weight_map.csv", "summary.json"] {
        m.output(&out.join(f))?;
    }
    m.metrics = summary;
    m.write(&out.join("manifest.json"))
}

pub fn sweep(cmd: &Command, a: &SweepArgs, recipe: &Recipe) -> anyhow::Result<()> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("sweep.csv"));
    let ranges = eval::parse_ranges(&a.ranges).map_err(|e| UserError(format!("--ranges: {e}")))?;
    let d = load_data(&a.data)?;
    let eval_set = match &a.eval_data {
        Some(p) => load_data(p)?,
        None => recipe.eval_set()?,
    };
    let base = base_model(recipe, a.base.as_deref())?;
    let rows = eval::clamp_sweep(
        &base,
        &d,
        &eval_set,
        &recipe.task,
        &ranges,
        &recipe.pipeline,
    )
    .map_err(user_if_data)?;
    write(&out, &eval::sweep_csv(&rows)?)?;
    for r in &rows {
        println!(
            "({}, {}): accuracy {:.4} error_rate {:.4} bad_ratio {:.4}",
            r.lo, r.hi, r.accuracy, r.error_rate, r.bad_ratio
        );
    }
    let mut m = Manifest::new(cmd, recipe);
    m.input("data", &a.data)?;
    if let Some(p) = &a.eval_data {
        m.input("eval_data", p)?;
    }
    if let Some(b) = &a.base {
        m.input("base", b)?;
    }
    m.output(&out)?;
    m.metrics = serde_json::to_value(&rows)?;
    m.write(&sibling_manifest(&out))
}
