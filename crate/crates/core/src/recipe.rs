//! The desk-scale experiment: data, warm start, TKTO pipeline and the
//! comparison runs that share its budget.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate, generate_corpus, Dataset, TaskConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::objectives::TktoConfig;
use crate::trainer::{
    run_tkto_pipeline, train, warm_start, Objective, PipelineConfig, PipelineOutput, Probe, RunLog,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    /// Per label.
    pub train_size: usize,
    /// Per label.
    pub eval_size: usize,
    /// Per label.
    pub probe_size: usize,
    pub corpus_size: usize,
    /// Chance a non-default cue is realized faithfully in the warm-start corpus.
    pub corpus_fidelity: f64,
    pub warm: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for Recipe {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

/// Everything a recipe trains, before any metadata-aware evaluation.
pub struct Fitted {
    pub train_set: Dataset,
    pub eval_set: Dataset,
    pub probe: Probe,
    pub warm: Model,
    pub pipeline: PipelineOutput,
}

pub struct RecipeRun {
    pub train_set: Dataset,
    pub eval_set: Dataset,
    pub probe: Probe,
    pub warm: Model,
    pub warm_report: EvalReport,
    pub pipeline: PipelineOutput,
    pub final_report: EvalReport,
}

impl Recipe {
    pub fn with_seed(seed: u64) -> Self {
        let stage = |learning_rate| TrainConfig {
            seed,
            learning_rate,
            probe_interval: 25,
            ..TrainConfig::default()
        };
        Self {
            seed,
            task: TaskConfig::default(),
            model: ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            train_size: 2000,
            eval_size: 200,
            probe_size: 200,
            corpus_size: 1400,
            corpus_fidelity: 0.4,
            warm: stage(3e-3),
            pipeline: PipelineConfig {
                tkto: TktoConfig {
                    beta: 1.0,
                    ..TktoConfig::default()
                },
                contrastive_train: stage(1e-3),
                train: stage(3e-4),
                ..PipelineConfig::default()
            },
        }
    }

    pub fn train_set(&self) -> Result<Dataset> {
        generate(&self.task, self.train_size, self.train_size, self.seed)
    }

    pub fn eval_set(&self) -> Result<Dataset> {
        generate(&self.task, self.eval_size, self.eval_size, self.seed + 1000)
    }

    pub fn probe(&self) -> Result<Probe> {
        let d = generate(
            &self.task,
            self.probe_size,
            self.probe_size,
            self.seed + 2000,
        )?;
        Ok(Probe::new(&d))
    }

    pub fn warm_model(&self) -> Result<Model> {
        let corpus = generate_corpus(
            &self.task,
            self.corpus_size,
            self.corpus_fidelity,
            self.seed + 3000,
        )?;
        let init = Model::new(self.model.clone())?;
        Ok(warm_start(&init, &corpus, &self.warm, None)?.0)
    }

    /// Data, warm start and pipeline. Never reads sample metadata.
    pub fn fit(&self, out_dir: Option<&Path>) -> Result<Fitted> {
        let train_set = self.train_set()?;
        let eval_set = self.eval_set()?;
        let probe = self.probe()?;
        let warm = self.warm_model()?;
        let pipeline = run_tkto_pipeline(&warm, &train_set, &self.pipeline, Some(&probe), out_dir)?;
        Ok(Fitted {
            train_set,
            eval_set,
            probe,
            warm,
            pipeline,
        })
    }

    pub fn evaluate(&self, fitted: Fitted) -> Result<RecipeRun> {
        let warm_report = evaluate(&fitted.warm, &fitted.eval_set, &self.task, "warm")?;
        let final_report = evaluate(&fitted.pipeline.model, &fitted.eval_set, &self.task, "tkto")?;
        Ok(RecipeRun {
            train_set: fitted.train_set,
            eval_set: fitted.eval_set,
            probe: fitted.probe,
            warm: fitted.warm,
            warm_report,
            pipeline: fitted.pipeline,
            final_report,
        })
    }

    pub fn run(&self, out_dir: Option<&Path>) -> Result<RecipeRun> {
        self.evaluate(self.fit(out_dir)?)
    }

    /// Sequence-level KTO from the same warm start, same settings and budget.
    pub fn train_kto(&self, run: &RecipeRun) -> Result<Model> {
        let objective = Objective::Kto(self.pipeline.tkto);
        Ok(train(
            &run.warm,
            &run.warm,
            &run.train_set,
            &objective,
            &self.pipeline.train,
            None,
        )?
        .0)
    }

    /// SFT on the desirable half from the same warm start, probed like TKTO.
    pub fn train_sft(&self, run: &RecipeRun) -> Result<(Model, RunLog)> {
        train(
            &run.warm,
            &run.warm,
            &run.train_set,
            &Objective::Sft,
            &self.pipeline.train,
            Some(&run.probe),
        )
    }
}
