use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};
use tkto_core::checkpoint;
use tkto_core::recipe::Recipe;

use crate::args::{Command, Common, TrainArgs};
use crate::UserError;

pub const OUT_DIR_VAR: &str = "TKTO_OUT_DIR";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Defaults, then the config file (a config or a run manifest), then flags.
pub fn resolve(common: &Common, train: Option<&TrainArgs>) -> anyhow::Result<Recipe> {
    let mut recipe = match &common.config {
        Some(path) => load_config(path)?,
        None => Recipe::default(),
    };
    if let Some(seed) = common.seed {
        reseed(&mut recipe, seed);
    }
    if let Some(t) = train {
        if let Some(e) = t.epochs {
            recipe.pipeline.train.epochs = e;
        }
        if let Some(lr) = t.learning_rate {
            recipe.pipeline.train.learning_rate = lr;
        }
        if let Some(b) = t.beta {
            recipe.pipeline.tkto.beta = b;
        }
    }
    Ok(recipe)
}

fn load_config(path: &Path) -> anyhow::Result<Recipe> {
    let text =
        fs::read_to_string(path).map_err(|e| UserError(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| UserError(format!("{}: {e}", path.display())))?;
    let value = match value.get("config") {
        Some(inner) if value.get("invocation").is_some() => inner.clone(),
        _ => value,
    };
    serde_json::from_value(value).map_err(|e| UserError(format!("{}: {e}", path.display())).into())
}

pub fn reseed(recipe: &mut Recipe, seed: u64) {
    recipe.seed = seed;
    recipe.model.seed = seed;
    recipe.warm.seed = seed;
    recipe.pipeline.contrastive_train.seed = seed;
    recipe.pipeline.train.seed = seed;
}

pub fn echo(recipe: &Recipe) -> anyhow::Result<()> {
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(recipe)?
    );
    Ok(())
}

/// Everything needed to repeat a run: the invocation, the resolved config
/// and the digests of what went in and came out.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub invocation: &'a Command,
    pub config: &'a Recipe,
    pub inputs: Value,
    pub outputs: Value,
    pub metrics: Value,
}

impl<'a> Manifest<'a> {
    pub fn new(invocation: &'a Command, config: &'a Recipe) -> Self {
        Self {
            tool: "tkto",
            version: env!("CARGO_PKG_VERSION"),
            invocation,
            config,
            inputs: json!({}),
            outputs: json!({}),
            metrics: Value::Null,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        let digest = checkpoint::file_digest(path)?;
        self.inputs[role] = json!({ "path": path, "sha256": digest });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.outputs[name] = json!(checkpoint::file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

/// `x.csv` -> `x.csv.manifest.json`.
pub fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
